//! Contextual auction environments: the nine built-in settings, context
//! and valuation samplers, and conditional distributions for the
//! Myerson baseline.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::rng::{indexed_rng, stream_seed};

pub mod dataset;
mod law;

pub use law::{normal_cdf, normal_pdf, normal_quantile, sigmoid64, Law};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SettingId {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
    H,
    I,
}

impl SettingId {
    pub const ALL: [SettingId; 9] = [
        SettingId::A,
        SettingId::B,
        SettingId::C,
        SettingId::D,
        SettingId::E,
        SettingId::F,
        SettingId::G,
        SettingId::H,
        SettingId::I,
    ];

    pub fn parse(s: &str) -> Result<Self, EnvError> {
        match s.trim() {
            "A" | "a" => Ok(SettingId::A),
            "B" | "b" => Ok(SettingId::B),
            "C" | "c" => Ok(SettingId::C),
            "D" | "d" => Ok(SettingId::D),
            "E" | "e" => Ok(SettingId::E),
            "F" | "f" => Ok(SettingId::F),
            "G" | "g" => Ok(SettingId::G),
            "H" | "h" => Ok(SettingId::H),
            "I" | "i" => Ok(SettingId::I),
            other => Err(EnvError::UnknownSetting(other.to_string())),
        }
    }
}

impl fmt::Display for SettingId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SettingId::A => "A",
            SettingId::B => "B",
            SettingId::C => "C",
            SettingId::D => "D",
            SettingId::E => "E",
            SettingId::F => "F",
            SettingId::G => "G",
            SettingId::H => "H",
            SettingId::I => "I",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContextKind {
    /// Ids drawn uniformly from {1, ..., domain}.
    Discrete { domain: usize },
    /// Vectors drawn uniformly from [-1, 1]^dim.
    Continuous { dim: usize },
}

impl ContextKind {
    /// Number of f32 values stored per entity.
    pub fn width(&self) -> usize {
        match *self {
            ContextKind::Discrete { .. } => 1,
            ContextKind::Continuous { dim } => dim,
        }
    }
}

/// One of the built-in contextual auction settings, possibly rescaled to
/// a different number of bidders or items.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SettingSpec {
    pub id: SettingId,
    pub n: usize,
    pub m: usize,
    pub bidder_ctx: ContextKind,
    pub item_ctx: ContextKind,
}

impl SettingSpec {
    pub fn new(id: SettingId) -> Self {
        use ContextKind::{Continuous, Discrete};
        let (n, m, bidder_ctx, item_ctx) = match id {
            SettingId::A => (3, 1, Discrete { domain: 5 }, Discrete { domain: 1 }),
            SettingId::B => (3, 1, Discrete { domain: 5 }, Discrete { domain: 2 }),
            SettingId::C => (5, 1, Continuous { dim: 10 }, Continuous { dim: 10 }),
            SettingId::D => (2, 5, Discrete { domain: 10 }, Discrete { domain: 10 }),
            SettingId::E => (3, 10, Discrete { domain: 10 }, Discrete { domain: 10 }),
            SettingId::F => (5, 10, Discrete { domain: 10 }, Discrete { domain: 10 }),
            SettingId::G => (2, 5, Continuous { dim: 10 }, Continuous { dim: 10 }),
            SettingId::H => (3, 10, Continuous { dim: 10 }, Continuous { dim: 10 }),
            SettingId::I => (5, 10, Continuous { dim: 10 }, Continuous { dim: 10 }),
        };
        Self {
            id,
            n,
            m,
            bidder_ctx,
            item_ctx,
        }
    }

    /// Same conditional value law at a different auction scale. Every
    /// built-in law is defined per bidder-item pair, so any positive
    /// (n, m) extends it.
    pub fn with_scale(&self, n: usize, m: usize) -> Result<Self, EnvError> {
        if n == 0 || m == 0 {
            return Err(EnvError::InvalidScale { n, m });
        }
        Ok(Self { n, m, ..*self })
    }
}

/// Context values for `count` entities, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub enum ContextData {
    /// 1-based ids, one per entity.
    Discrete(Vec<u32>),
    Continuous { dim: usize, data: Vec<f32> },
}

impl ContextData {
    pub fn kind_width(&self) -> usize {
        match self {
            ContextData::Discrete(_) => 1,
            ContextData::Continuous { dim, .. } => *dim,
        }
    }

    /// Context of one entity.
    pub fn get(&self, idx: usize) -> CtxRef<'_> {
        match self {
            ContextData::Discrete(ids) => CtxRef::Discrete(ids[idx]),
            ContextData::Continuous { dim, data } => {
                CtxRef::Continuous(&data[idx * dim..(idx + 1) * dim])
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ContextData::Discrete(ids) => ids.len(),
            ContextData::Continuous { dim, data } => data.len() / dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub enum CtxRef<'a> {
    Discrete(u32),
    Continuous(&'a [f32]),
}

/// A sampled collection of auctions: values plus public contexts.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SettingSpec,
    pub count: usize,
    pub seed: u64,
    /// count * n * m values, sample-major then bidder then item.
    pub values: Vec<f32>,
    /// count * n bidder contexts.
    pub bidder_ctx: ContextData,
    /// count * m item contexts.
    pub item_ctx: ContextData,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.spec.n
    }

    pub fn m(&self) -> usize {
        self.spec.m
    }

    /// Value matrix of one sample.
    pub fn sample_values(&self, idx: usize) -> &[f32] {
        let nm = self.spec.n * self.spec.m;
        &self.values[idx * nm..(idx + 1) * nm]
    }

    pub fn bidder_context(&self, sample: usize, bidder: usize) -> CtxRef<'_> {
        self.bidder_ctx.get(sample * self.spec.n + bidder)
    }

    pub fn item_context(&self, sample: usize, item: usize) -> CtxRef<'_> {
        self.item_ctx.get(sample * self.spec.m + item)
    }
}

#[derive(Debug)]
pub enum EnvError {
    UnknownSetting(String),
    InvalidScale { n: usize, m: usize },
    Io(std::io::Error),
    Format(String),
}

impl fmt::Display for EnvError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::UnknownSetting(s) => write!(f, "unknown setting '{s}' (expected A..I)"),
            Self::InvalidScale { n, m } => write!(f, "invalid auction scale {n}x{m}"),
            Self::Io(e) => write!(f, "dataset io: {e}"),
            Self::Format(msg) => write!(f, "dataset format: {msg}"),
        }
    }
}

impl std::error::Error for EnvError {}

impl From<std::io::Error> for EnvError {
    fn from(e: std::io::Error) -> Self {
        EnvError::Io(e)
    }
}

/// Conditional law of `v[bidder, item]` given its two contexts. The bidder
/// index enters only where a setting's density family depends on it.
pub fn value_law(spec: &SettingSpec, bidder: usize, x: CtxRef<'_>, y: CtxRef<'_>) -> Law {
    match spec.id {
        SettingId::A => Law::TruncNormal {
            mean: discrete_id(x) as f64 / 6.0,
            sd: 0.1,
        },
        SettingId::B => {
            if discrete_id(y) == 1 {
                Law::TruncNormal {
                    mean: discrete_id(x) as f64 / 6.0,
                    sd: 0.1,
                }
            } else {
                Law::TruncExp {
                    rate: (bidder + 1) as f64 / 6.0,
                }
            }
        }
        SettingId::C | SettingId::G | SettingId::H | SettingId::I => Law::Uniform {
            upper: sigmoid64(ctx_dot(x, y)),
        },
        SettingId::D | SettingId::E | SettingId::F => {
            let sum = discrete_id(x) as u64 + discrete_id(y) as u64;
            Law::TruncNormal {
                mean: ((sum % 10) + 1) as f64 / 11.0,
                sd: 0.05,
            }
        }
    }
}

fn discrete_id(c: CtxRef<'_>) -> u32 {
    match c {
        CtxRef::Discrete(id) => id,
        CtxRef::Continuous(_) => panic!("discrete context expected"),
    }
}

fn ctx_dot(x: CtxRef<'_>, y: CtxRef<'_>) -> f64 {
    match (x, y) {
        (CtxRef::Continuous(a), CtxRef::Continuous(b)) => {
            a.iter().zip(b).map(|(&p, &q)| p as f64 * q as f64).sum()
        }
        _ => panic!("continuous contexts expected"),
    }
}

/// Conditional CDF at `t` for the pair's law.
pub fn conditional_cdf(spec: &SettingSpec, bidder: usize, x: CtxRef<'_>, y: CtxRef<'_>, t: f64) -> f64 {
    value_law(spec, bidder, x, y).cdf(t)
}

/// Conditional density at `t` for the pair's law.
pub fn conditional_pdf(spec: &SettingSpec, bidder: usize, x: CtxRef<'_>, y: CtxRef<'_>, t: f64) -> f64 {
    value_law(spec, bidder, x, y).pdf(t)
}

fn sample_context_block(
    kind: ContextKind,
    entities: usize,
    count: usize,
    stream: u64,
    substream_offset: u64,
) -> ContextData {
    use rand::Rng;
    match kind {
        ContextKind::Discrete { domain } => {
            let mut ids = Vec::with_capacity(count * entities);
            for k in 0..count {
                let mut rng = indexed_rng(stream, substream_offset + k as u64);
                for _ in 0..entities {
                    ids.push(rng.gen_range(1..=domain as u32));
                }
            }
            ContextData::Discrete(ids)
        }
        ContextKind::Continuous { dim } => {
            let mut data = Vec::with_capacity(count * entities * dim);
            for k in 0..count {
                let mut rng = indexed_rng(stream, substream_offset + k as u64);
                for _ in 0..entities * dim {
                    data.push(rng.gen_range(-1.0f64..1.0) as f32);
                }
            }
            ContextData::Continuous { dim, data }
        }
    }
}

/// Bidder and item contexts for `count` auctions.
pub fn sample_contexts(spec: &SettingSpec, count: usize, seed: u64) -> (ContextData, ContextData) {
    let stream = stream_seed(seed, "contexts");
    let bidders = sample_context_block(spec.bidder_ctx, spec.n, count, stream, 0);
    let items = sample_context_block(spec.item_ctx, spec.m, count, stream, count as u64);
    (bidders, items)
}

/// Valuations conditioned on already-sampled contexts.
pub fn sample_valuations(
    spec: &SettingSpec,
    bidder_ctx: &ContextData,
    item_ctx: &ContextData,
    count: usize,
    seed: u64,
) -> Vec<f32> {
    let stream = stream_seed(seed, "values");
    let mut values = Vec::with_capacity(count * spec.n * spec.m);
    for k in 0..count {
        let mut rng = indexed_rng(stream, k as u64);
        for i in 0..spec.n {
            let x = bidder_ctx.get(k * spec.n + i);
            for j in 0..spec.m {
                let y = item_ctx.get(k * spec.m + j);
                let law = value_law(spec, i, x, y);
                values.push(law.sample(&mut rng) as f32);
            }
        }
    }
    values
}

/// Samples a full dataset; reproducible bit-for-bit from (spec, count, seed).
pub fn sample_dataset(spec: &SettingSpec, count: usize, seed: u64) -> Dataset {
    let (bidder_ctx, item_ctx) = sample_contexts(spec, count, seed);
    let values = sample_valuations(spec, &bidder_ctx, &item_ctx, count, seed);
    Dataset {
        spec: *spec,
        count,
        seed,
        values,
        bidder_ctx,
        item_ctx,
    }
}

/// Upper bound of each bid coordinate's support, per (sample, bidder, item).
/// Misreports are projected into [0, upper].
pub fn misreport_upper(data: &Dataset) -> Vec<f32> {
    let spec = &data.spec;
    let mut upper = Vec::with_capacity(data.count * spec.n * spec.m);
    for k in 0..data.count {
        for i in 0..spec.n {
            let x = data.bidder_context(k, i);
            for j in 0..spec.m {
                let y = data.item_context(k, j);
                upper.push(value_law(spec, i, x, y).upper() as f32);
            }
        }
    }
    upper
}
