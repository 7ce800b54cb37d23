//! The mechanism network: a context-integrated, permutation-equivariant
//! transformer that maps (bids, bidder contexts, item contexts) to a
//! feasible allocation and individually-rational payments.
//!
//! Tensors use a flattened layout: a batch of auctions with cells
//! (sample, bidder, item) is the matrix [(count*n*m), channels] in
//! sample-major, bidder-then-item order. All building blocks act per cell
//! or aggregate over rows/columns/cells of one sample, which is what makes
//! the parameter count independent of the auction scale.

use std::fmt;

use crate::env::ContextKind;
use crate::rng::{indexed_rng, stream_seed};
use crate::tensor::{Tensor, TensorError};

pub mod checkpoint;
mod forward;

pub use forward::{
    build_forward, extract_outcomes, revenue_mean, utilities_all_bidders, utilities_of_bidders,
    BatchInput, ForwardNodes, GradMode,
};

/// Architecture hyperparameters. `d` is the cell feature width, `d_h` the
/// transformer hidden width (the implementation requires `d == d_h`),
/// `heads` the attention head count, and `embed_dim` the embedding width
/// for discrete contexts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetArch {
    pub layers: usize,
    pub d: usize,
    pub d_h: usize,
    pub heads: usize,
    pub embed_dim: usize,
}

impl Default for NetArch {
    fn default() -> Self {
        Self {
            layers: 2,
            d: 64,
            d_h: 64,
            heads: 4,
            embed_dim: 16,
        }
    }
}

impl NetArch {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.layers == 0 {
            return Err(NetError::Arch("at least one interaction layer required".into()));
        }
        if self.d != self.d_h {
            return Err(NetError::Arch(format!(
                "cell width d={} must equal transformer width d_h={}",
                self.d, self.d_h
            )));
        }
        if self.d < 2 {
            return Err(NetError::Arch("d must be at least 2".into()));
        }
        if self.heads == 0 || self.d_h % self.heads != 0 {
            return Err(NetError::Arch(format!(
                "d_h={} must be divisible by heads={}",
                self.d_h, self.heads
            )));
        }
        if self.embed_dim == 0 {
            return Err(NetError::Arch("embed_dim must be positive".into()));
        }
        Ok(())
    }

    /// Per-head projection width.
    pub fn head_dim(&self) -> usize {
        self.d_h / self.heads
    }
}

/// Architecture plus the context interface the network was built for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetShape {
    pub arch: NetArch,
    pub bidder_ctx: ContextKind,
    pub item_ctx: ContextKind,
}

impl NetShape {
    pub fn new(arch: NetArch, bidder_ctx: ContextKind, item_ctx: ContextKind) -> Result<Self, NetError> {
        arch.validate()?;
        Ok(Self {
            arch,
            bidder_ctx,
            item_ctx,
        })
    }

    /// Width of the bidder-context representation fed to the input layer
    /// (continuous contexts pass through unchanged).
    pub fn bidder_width(&self) -> usize {
        match self.bidder_ctx {
            ContextKind::Discrete { .. } => self.arch.embed_dim,
            ContextKind::Continuous { dim } => dim,
        }
    }

    pub fn item_width(&self) -> usize {
        match self.item_ctx {
            ContextKind::Discrete { .. } => self.arch.embed_dim,
            ContextKind::Continuous { dim } => dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    fan_in: usize,
    zero_init: bool,
}

/// Positions of each role within the canonical parameter list.
#[derive(Debug, Clone)]
pub(crate) struct TransformerIdx {
    pub wq: Vec<usize>,
    pub wk: Vec<usize>,
    pub wv: Vec<usize>,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerIdx {
    pub row: TransformerIdx,
    pub col: TransformerIdx,
    pub conv3_w: usize,
    pub conv3_b: usize,
    pub conv4_w: usize,
    pub conv4_b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamIndex {
    pub embed_bidder: Option<usize>,
    pub embed_item: Option<usize>,
    pub conv1_w: usize,
    pub conv1_b: usize,
    pub conv2_w: usize,
    pub conv2_b: usize,
    pub layers: Vec<LayerIdx>,
}

fn push_spec(
    specs: &mut Vec<ParamSpec>,
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
    zero_init: bool,
) -> usize {
    specs.push(ParamSpec {
        name,
        shape,
        fan_in,
        zero_init,
    });
    specs.len() - 1
}

fn push_transformer(specs: &mut Vec<ParamSpec>, arch: &NetArch, prefix: &str) -> TransformerIdx {
    let d = arch.d;
    let dh = arch.d_h;
    let dp = arch.head_dim();
    let mut wq = Vec::new();
    let mut wk = Vec::new();
    let mut wv = Vec::new();
    for h in 0..arch.heads {
        wq.push(push_spec(specs, format!("{prefix}.head{h}.wq"), vec![d, dp], d, false));
        wk.push(push_spec(specs, format!("{prefix}.head{h}.wk"), vec![d, dp], d, false));
        wv.push(push_spec(specs, format!("{prefix}.head{h}.wv"), vec![d, dp], d, false));
    }
    let w1 = push_spec(specs, format!("{prefix}.mlp.w1"), vec![dh, dh], dh, false);
    let b1 = push_spec(specs, format!("{prefix}.mlp.b1"), vec![dh], dh, true);
    let w2 = push_spec(specs, format!("{prefix}.mlp.w2"), vec![dh, dh], dh, false);
    let b2 = push_spec(specs, format!("{prefix}.mlp.b2"), vec![dh], dh, true);
    TransformerIdx {
        wq,
        wk,
        wv,
        w1,
        b1,
        w2,
        b2,
    }
}

pub(crate) fn layout(shape: &NetShape) -> (Vec<ParamSpec>, ParamIndex) {
    let arch = &shape.arch;
    let d = arch.d;
    let dh = arch.d_h;
    let mut specs: Vec<ParamSpec> = Vec::new();

    let embed_bidder = match shape.bidder_ctx {
        ContextKind::Discrete { domain } => Some(push_spec(
            &mut specs,
            "embed.bidder".into(),
            vec![domain, arch.embed_dim],
            arch.embed_dim,
            false,
        )),
        ContextKind::Continuous { .. } => None,
    };
    let embed_item = match shape.item_ctx {
        ContextKind::Discrete { domain } => Some(push_spec(
            &mut specs,
            "embed.item".into(),
            vec![domain, arch.embed_dim],
            arch.embed_dim,
            false,
        )),
        ContextKind::Continuous { .. } => None,
    };

    let in_ch = 1 + shape.bidder_width() + shape.item_width();
    let conv1_w = push_spec(&mut specs, "input.conv1.w".into(), vec![in_ch, d], in_ch, false);
    let conv1_b = push_spec(&mut specs, "input.conv1.b".into(), vec![d], in_ch, true);
    let conv2_w = push_spec(&mut specs, "input.conv2.w".into(), vec![d, d - 1], d, false);
    let conv2_b = push_spec(&mut specs, "input.conv2.b".into(), vec![d - 1], d, true);

    let mut layers = Vec::with_capacity(arch.layers);
    for l in 0..arch.layers {
        let row = push_transformer(&mut specs, arch, &format!("layer{l}.row"));
        let col = push_transformer(&mut specs, arch, &format!("layer{l}.col"));
        let d_out = if l + 1 == arch.layers { 3 } else { d };
        let cat = 2 * dh + d;
        let conv3_w = push_spec(&mut specs, format!("layer{l}.conv3.w"), vec![cat, d], cat, false);
        let conv3_b = push_spec(&mut specs, format!("layer{l}.conv3.b"), vec![d], cat, true);
        let conv4_w = push_spec(&mut specs, format!("layer{l}.conv4.w"), vec![d, d_out], d, false);
        let conv4_b = push_spec(&mut specs, format!("layer{l}.conv4.b"), vec![d_out], d, true);
        layers.push(LayerIdx {
            row,
            col,
            conv3_w,
            conv3_b,
            conv4_w,
            conv4_b,
        });
    }

    (
        specs,
        ParamIndex {
            embed_bidder,
            embed_item,
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            layers,
        },
    )
}

/// All learnable tensors of one mechanism, named and shaped. The count
/// depends only on the architecture and context interface, never on the
/// number of bidders or items.
#[derive(Debug, Clone, PartialEq)]
pub struct MechanismParams {
    shape: NetShape,
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor<f32>>,
}

impl MechanismParams {
    /// Weights uniform in +-sqrt(1/fan_in), biases zero.
    pub fn init(shape: NetShape, seed: u64) -> Self {
        use rand::Rng;
        let (specs, _) = layout(&shape);
        let stream = stream_seed(seed, "net-init");
        let tensors = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                if spec.zero_init {
                    Tensor::zeros(spec.shape.clone())
                } else {
                    let bound = (1.0 / spec.fan_in as f64).sqrt();
                    let mut rng = indexed_rng(stream, i as u64);
                    let n: usize = spec.shape.iter().product();
                    let data = (0..n)
                        .map(|_| rng.gen_range(-bound..bound) as f32)
                        .collect();
                    Tensor::new(spec.shape.clone(), data).expect("spec shape")
                }
            })
            .collect();
        Self {
            shape,
            specs,
            tensors,
        }
    }

    pub(crate) fn from_tensors(shape: NetShape, tensors: Vec<Tensor<f32>>) -> Result<Self, NetError> {
        let (specs, _) = layout(&shape);
        if specs.len() != tensors.len() {
            return Err(NetError::Arch(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (spec, t) in specs.iter().zip(&tensors) {
            if spec.shape != t.shape() {
                return Err(NetError::Arch(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(Self {
            shape,
            specs,
            tensors,
        })
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .map(|i| &self.tensors[i])
    }

    /// Total scalar parameter count.
    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// Allocation and payments for one auction, with the intermediate maps
/// kept for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct AuctionOutcome {
    pub n: usize,
    pub m: usize,
    /// n*m allocation probabilities g, row-major by bidder.
    pub alloc: Vec<f32>,
    /// Per-bidder payments.
    pub pay: Vec<f32>,
    /// Pre-weighting allocation probabilities h (columns sum to one).
    pub alloc_prob: Vec<f32>,
    /// Allocation weights q in (0,1).
    pub alloc_weight: Vec<f32>,
    /// Payment fractions in (0,1).
    pub pay_frac: Vec<f32>,
}

impl AuctionOutcome {
    /// Quasilinear utility of `bidder` with true values `values` (n*m).
    pub fn utility(&self, values: &[f32], bidder: usize) -> f64 {
        let mut won = 0.0f64;
        for j in 0..self.m {
            won += self.alloc[bidder * self.m + j] as f64 * values[bidder * self.m + j] as f64;
        }
        won - self.pay[bidder] as f64
    }
}

#[derive(Debug)]
pub enum NetError {
    Arch(String),
    /// Discrete context id outside the embedding table.
    ContextId { id: u32, table: usize },
    Tensor(TensorError),
    Io(std::io::Error),
    Checkpoint(String),
}

impl fmt::Display for NetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Arch(msg) => write!(f, "architecture: {msg}"),
            Self::ContextId { id, table } => {
                write!(f, "context id {id} out of range for embedding table of size {table}")
            }
            Self::Tensor(e) => write!(f, "tensor: {e}"),
            Self::Io(e) => write!(f, "checkpoint io: {e}"),
            Self::Checkpoint(msg) => write!(f, "checkpoint format: {msg}"),
        }
    }
}

impl std::error::Error for NetError {}

impl From<TensorError> for NetError {
    fn from(e: TensorError) -> Self {
        NetError::Tensor(e)
    }
}

impl From<std::io::Error> for NetError {
    fn from(e: std::io::Error) -> Self {
        NetError::Io(e)
    }
}
