//! Graph construction for the mechanism network forward pass.
//!
//! One graph evaluates a whole batch of auctions (or misreport variants):
//! cell features live in [(count*n*m), channels] matrices, the row and
//! column transformers run as grouped attention over contiguous row
//! blocks, and the item-axis softmax works on a permuted, reshaped view.

use std::sync::Arc;

use super::{layout, AuctionOutcome, MechanismParams, NetError, ParamIndex, TransformerIdx};
use crate::env::{ContextData, Dataset};
use crate::tensor::{Graph, NodeId, Scalar, Tensor};

/// A batch of bid profiles to push through the network. Each variant e
/// takes its public contexts from `data` sample `sample_of_variant[e]`,
/// while its bids come from `bids`. For plain forwards over a dataset
/// slice, `sample_of_variant` simply lists the slice indices.
#[derive(Debug, Clone, Copy)]
pub struct BatchInput<'a> {
    pub data: &'a Dataset,
    /// count*n*m bid values, variant-major.
    pub bids: &'a [f32],
    /// Dataset sample backing each variant's contexts.
    pub sample_of_variant: &'a [u32],
}

impl<'a> BatchInput<'a> {
    pub fn count(&self) -> usize {
        self.sample_of_variant.len()
    }

    pub fn n(&self) -> usize {
        self.data.spec.n
    }

    pub fn m(&self) -> usize {
        self.data.spec.m
    }
}

/// Which leaves of the forward graph should receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    None,
    /// All network parameters.
    Params,
    /// The bid tensor only.
    Bids,
}

/// Node handles produced by [`build_forward`].
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    /// [(count*n*m), 1] allocation g = q * h.
    pub alloc: NodeId,
    /// [(count*n*m), 1] allocation probabilities h.
    pub alloc_prob: NodeId,
    /// [(count*n*m), 1] allocation weights q.
    pub alloc_weight: NodeId,
    /// [(count*n), 1] payment fractions.
    pub pay_frac: NodeId,
    /// [(count*n), 1] payments.
    pub pay: NodeId,
    /// Bid leaf.
    pub bids: NodeId,
    /// Parameter leaves aligned with `MechanismParams::tensors`.
    pub params: Vec<NodeId>,
    /// Input-layer output: [(count*n*m), d] cell features (channel 0 is
    /// the raw bid).
    pub input_cells: NodeId,
    /// Output of each interaction layer; the last has 3 channels.
    pub layer_outputs: Vec<NodeId>,
    /// Per-sample global feature of each interaction layer: [count, d].
    pub layer_globals: Vec<NodeId>,
}

fn cast_tensor<F: Scalar>(t: &Tensor<f32>) -> Tensor<F> {
    Tensor::new(
        t.shape().to_vec(),
        t.data().iter().map(|&v| F::from_f64(v as f64)).collect(),
    )
    .expect("shape preserved")
}

fn context_leaf<F: Scalar>(
    g: &mut Graph<F>,
    ctx: &ContextData,
    samples: &[u32],
    entities: usize,
    table: Option<NodeId>,
) -> Result<NodeId, NetError> {
    match ctx {
        ContextData::Discrete(ids) => {
            let table = table.expect("discrete context requires an embedding table");
            let (rows, _) = g.value(table).matrix_dims("embed")?;
            let mut idx = Vec::with_capacity(samples.len() * entities);
            for &s in samples {
                for e in 0..entities {
                    let id = ids[s as usize * entities + e];
                    if id == 0 || id as usize > rows {
                        return Err(NetError::ContextId { id, table: rows });
                    }
                    idx.push(id - 1);
                }
            }
            Ok(g.gather_rows(table, Arc::new(idx))?)
        }
        ContextData::Continuous { dim, data } => {
            let mut block = Vec::with_capacity(samples.len() * entities * dim);
            for &s in samples {
                let start = s as usize * entities * dim;
                block.extend(
                    data[start..start + entities * dim]
                        .iter()
                        .map(|&v| F::from_f64(v as f64)),
                );
            }
            let t = Tensor::new(vec![samples.len() * entities, *dim], block)?;
            Ok(g.leaf(t))
        }
    }
}

struct Permutations {
    /// Position (e, j, i) reads cell (e, i, j).
    to_item_major: Arc<Vec<u32>>,
    /// Position (e, i, j) reads item-major position (e, j, i).
    to_bidder_major: Arc<Vec<u32>>,
    /// Cell (e, i, j) -> bidder row e*n + i.
    cell_bidder: Arc<Vec<u32>>,
    /// Cell (e, i, j) -> item row e*m + j.
    cell_item: Arc<Vec<u32>>,
}

fn permutations(count: usize, n: usize, m: usize) -> Permutations {
    let cells = count * n * m;
    let mut to_item_major = Vec::with_capacity(cells);
    let mut to_bidder_major = Vec::with_capacity(cells);
    let mut cell_bidder = Vec::with_capacity(cells);
    let mut cell_item = Vec::with_capacity(cells);
    for e in 0..count {
        for j in 0..m {
            for i in 0..n {
                to_item_major.push((e * n * m + i * m + j) as u32);
            }
        }
        for i in 0..n {
            for j in 0..m {
                to_bidder_major.push((e * n * m + j * n + i) as u32);
                cell_bidder.push((e * n + i) as u32);
                cell_item.push((e * m + j) as u32);
            }
        }
    }
    Permutations {
        to_item_major: Arc::new(to_item_major),
        to_bidder_major: Arc::new(to_bidder_major),
        cell_bidder: Arc::new(cell_bidder),
        cell_item: Arc::new(cell_item),
    }
}

fn transformer_block<F: Scalar>(
    g: &mut Graph<F>,
    x: NodeId,
    idx: &TransformerIdx,
    params: &[NodeId],
    groups: usize,
    heads: usize,
) -> Result<NodeId, NetError> {
    let wq_heads: Vec<NodeId> = idx.wq.iter().map(|&i| params[i]).collect();
    let wk_heads: Vec<NodeId> = idx.wk.iter().map(|&i| params[i]).collect();
    let wv_heads: Vec<NodeId> = idx.wv.iter().map(|&i| params[i]).collect();
    let wq = g.concat_cols(&wq_heads)?;
    let wk = g.concat_cols(&wk_heads)?;
    let wv = g.concat_cols(&wv_heads)?;
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let att = g.multi_head_attention(q, k, v, groups, heads)?;
    let h1 = g.matmul(att, params[idx.w1])?;
    let h1 = g.add_row_bias(h1, params[idx.b1])?;
    let h1 = g.relu(h1);
    let out = g.matmul(h1, params[idx.w2])?;
    let out = g.add_row_bias(out, params[idx.b2])?;
    Ok(out)
}

/// Builds the full forward pass and returns handles to the outcome nodes.
pub fn build_forward<F: Scalar>(
    g: &mut Graph<F>,
    params: &MechanismParams,
    input: &BatchInput<'_>,
    mode: GradMode,
) -> Result<ForwardNodes, NetError> {
    let count = input.count();
    let n = input.n();
    let m = input.m();
    let cells = count * n * m;
    assert_eq!(input.bids.len(), cells, "bid length must be count*n*m");
    let arch = &params.shape().arch;
    let (_, index): (_, ParamIndex) = layout(params.shape());

    let param_nodes: Vec<NodeId> = params
        .tensors()
        .iter()
        .map(|t| {
            let cast = cast_tensor::<F>(t);
            if mode == GradMode::Params {
                g.param(cast)
            } else {
                g.leaf(cast)
            }
        })
        .collect();

    let bid_tensor = Tensor::new(
        vec![cells, 1],
        input.bids.iter().map(|&v| F::from_f64(v as f64)).collect(),
    )?;
    let bids = if mode == GradMode::Bids {
        g.param(bid_tensor)
    } else {
        g.leaf(bid_tensor)
    };

    let perms = permutations(count, n, m);

    // Context representations: continuous contexts pass through unchanged,
    // discrete ids index the learned embedding tables.
    let e_x = context_leaf(
        g,
        &input.data.bidder_ctx,
        input.sample_of_variant,
        n,
        index.embed_bidder.map(|i| param_nodes[i]),
    )?;
    let f_y = context_leaf(
        g,
        &input.data.item_ctx,
        input.sample_of_variant,
        m,
        index.embed_item.map(|i| param_nodes[i]),
    )?;

    // Initial cell representation [b_ij; e_xi; f_yj] and the two 1x1
    // convolutions; the raw bid is concatenated back so channel 0 of the
    // cell feature equals the bid exactly.
    let ex_cells = g.gather_rows(e_x, perms.cell_bidder.clone())?;
    let fy_cells = g.gather_rows(f_y, perms.cell_item.clone())?;
    let e0 = g.concat_cols(&[bids, ex_cells, fy_cells])?;
    let h = g.matmul(e0, param_nodes[index.conv1_w])?;
    let h = g.add_row_bias(h, param_nodes[index.conv1_b])?;
    let h = g.relu(h);
    let e2 = g.matmul(h, param_nodes[index.conv2_w])?;
    let e2 = g.add_row_bias(e2, param_nodes[index.conv2_b])?;
    let input_cells = g.concat_cols(&[bids, e2])?;
    let mut feat = input_cells;

    let mut layer_outputs = Vec::with_capacity(index.layers.len());
    let mut layer_globals = Vec::with_capacity(index.layers.len());
    for layer in &index.layers {
        let row_out = transformer_block(g, feat, &layer.row, &param_nodes, count * n, arch.heads)?;
        let item_major = g.gather_rows(feat, perms.to_item_major.clone())?;
        let col_tmp =
            transformer_block(g, item_major, &layer.col, &param_nodes, count * m, arch.heads)?;
        let col_out = g.gather_rows(col_tmp, perms.to_bidder_major.clone())?;
        // The global feature is recomputed from this layer's own input.
        let per_sample = g.group_mean_rows(feat, count)?;
        let global = g.repeat_rows(per_sample, n * m)?;
        let cat = g.concat_cols(&[row_out, col_out, global])?;
        let h3 = g.matmul(cat, param_nodes[layer.conv3_w])?;
        let h3 = g.add_row_bias(h3, param_nodes[layer.conv3_b])?;
        let h3 = g.relu(h3);
        let out = g.matmul(h3, param_nodes[layer.conv4_w])?;
        feat = g.add_row_bias(out, param_nodes[layer.conv4_b])?;
        layer_outputs.push(feat);
        layer_globals.push(per_sample);
    }

    // Output heads: per-item softmax over bidders, per-cell weight, and a
    // payment fraction from the per-bidder mean of the third channel.
    let f_h = g.slice_cols(feat, 0, 1)?;
    let f_q = g.slice_cols(feat, 1, 1)?;
    let f_p = g.slice_cols(feat, 2, 1)?;

    let fh_item_major = g.gather_rows(f_h, perms.to_item_major.clone())?;
    let fh_rows = g.reshape(fh_item_major, vec![count * m, n])?;
    let h_soft = g.softmax_rows(fh_rows)?;
    let h_flat = g.reshape(h_soft, vec![cells, 1])?;
    let alloc_prob = g.gather_rows(h_flat, perms.to_bidder_major.clone())?;

    let alloc_weight = g.sigmoid(f_q);
    let alloc = g.mul(alloc_weight, alloc_prob)?;

    let fp_rows = g.reshape(f_p, vec![count * n, m])?;
    let fp_mean = g.mean_rows(fp_rows)?;
    let pay_frac = g.sigmoid(fp_mean);

    let spend_cells = g.mul(alloc, bids)?;
    let spend_rows = g.reshape(spend_cells, vec![count * n, m])?;
    let spend = g.sum_rows(spend_rows)?;
    let pay = g.mul(pay_frac, spend)?;

    Ok(ForwardNodes {
        alloc,
        alloc_prob,
        alloc_weight,
        pay_frac,
        pay,
        bids,
        params: param_nodes,
    })
}

/// Mean over the batch of the summed payments (the empirical revenue).
pub fn revenue_mean<F: Scalar>(
    g: &mut Graph<F>,
    nodes: &ForwardNodes,
    count: usize,
    n: usize,
) -> Result<NodeId, NetError> {
    let per_sample = g.reshape(nodes.pay, vec![count, n])?;
    let sums = g.sum_rows(per_sample)?;
    Ok(g.mean_all(sums))
}

/// Utility of every bidder in every variant against the given true values
/// (count*n*m, variant-major): returns [(count*n), 1].
pub fn utilities_all_bidders<F: Scalar>(
    g: &mut Graph<F>,
    nodes: &ForwardNodes,
    true_values: &[f32],
    count: usize,
    n: usize,
    m: usize,
) -> Result<NodeId, NetError> {
    assert_eq!(true_values.len(), count * n * m);
    let values = g.leaf(Tensor::new(
        vec![count * n * m, 1],
        true_values.iter().map(|&v| F::from_f64(v as f64)).collect(),
    )?);
    let won_cells = g.mul(nodes.alloc, values)?;
    let won_rows = g.reshape(won_cells, vec![count * n, m])?;
    let won = g.sum_rows(won_rows)?;
    Ok(g.sub(won, nodes.pay)?)
}

/// Utility of one designated bidder per variant: returns [count, 1].
/// `true_values[e]` is the n*m value matrix backing variant e, and
/// `bidder_of_variant[e]` selects whose utility to report.
pub fn utilities_of_bidders<F: Scalar>(
    g: &mut Graph<F>,
    nodes: &ForwardNodes,
    true_values: &[f32],
    bidder_of_variant: &[u32],
    count: usize,
    n: usize,
    m: usize,
) -> Result<NodeId, NetError> {
    let all = utilities_all_bidders(g, nodes, true_values, count, n, m)?;
    let idx: Vec<u32> = bidder_of_variant
        .iter()
        .enumerate()
        .map(|(e, &i)| (e * n) as u32 + i)
        .collect();
    Ok(g.gather_rows(all, Arc::new(idx))?)
}

/// Reads per-variant outcomes out of an evaluated forward graph.
pub fn extract_outcomes<F: Scalar>(
    g: &Graph<F>,
    nodes: &ForwardNodes,
    count: usize,
    n: usize,
    m: usize,
) -> Vec<AuctionOutcome> {
    let alloc = g.value(nodes.alloc).data();
    let alloc_prob = g.value(nodes.alloc_prob).data();
    let alloc_weight = g.value(nodes.alloc_weight).data();
    let pay = g.value(nodes.pay).data();
    let pay_frac = g.value(nodes.pay_frac).data();
    (0..count)
        .map(|e| {
            let cell0 = e * n * m;
            let row0 = e * n;
            AuctionOutcome {
                n,
                m,
                alloc: alloc[cell0..cell0 + n * m].iter().map(|v| v.as_f64() as f32).collect(),
                pay: pay[row0..row0 + n].iter().map(|v| v.as_f64() as f32).collect(),
                alloc_prob: alloc_prob[cell0..cell0 + n * m]
                    .iter()
                    .map(|v| v.as_f64() as f32)
                    .collect(),
                alloc_weight: alloc_weight[cell0..cell0 + n * m]
                    .iter()
                    .map(|v| v.as_f64() as f32)
                    .collect(),
                pay_frac: pay_frac[row0..row0 + n].iter().map(|v| v.as_f64() as f32).collect(),
            }
        })
        .collect()
}
