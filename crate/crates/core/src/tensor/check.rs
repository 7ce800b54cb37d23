//! Finite-difference gradient verification.
//!
//! Reverse-mode gradients (usually in `f32`) are compared against central
//! finite differences of the same graph evaluated in `f64`, so the
//! difference quotient is not dominated by single-precision rounding.
//! The comparison never invokes the backward pass.

use super::{Graph, NodeId, Scalar, Tensor, TensorError};

/// A differentiable scalar-valued graph, generic over element precision.
pub trait GraphFn {
    fn build<F: Scalar>(
        &self,
        graph: &mut Graph<F>,
        inputs: &[NodeId],
    ) -> Result<NodeId, TensorError>;
}

/// Result of checking one graph against finite differences.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    /// Number of scalar partial derivatives compared.
    pub compared: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares reverse-mode gradients of `build` at `inputs` (run in `f32`)
/// against central finite differences (run in `f64`, step `step`).
///
/// An element passes when |ad - fd| <= abs_tol + rel_tol * max(|ad|, |fd|).
pub fn check_gradients<B: GraphFn>(
    name: &str,
    build: &B,
    inputs: &[Tensor<f64>],
    step: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<CheckOutcome, TensorError> {
    let ad = autodiff_gradients::<f32, B>(build, inputs)?;
    let fd = finite_difference_gradients(build, inputs, step)?;
    let mut outcome = CheckOutcome {
        name: name.to_string(),
        compared: 0,
        failures: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
    };
    for (a, f) in ad.iter().zip(&fd) {
        for (&av, &fv) in a.iter().zip(f) {
            outcome.compared += 1;
            let abs = (av - fv).abs();
            let scale = av.abs().max(fv.abs());
            outcome.max_abs_err = outcome.max_abs_err.max(abs);
            if scale > 0.0 {
                outcome.max_rel_err = outcome.max_rel_err.max(abs / scale);
            }
            if abs > abs_tol + rel_tol * scale {
                outcome.failures += 1;
            }
        }
    }
    Ok(outcome)
}

/// Reverse-mode gradients of the scalar output w.r.t. every input, in the
/// requested precision, returned as `f64` vectors.
pub fn autodiff_gradients<F: Scalar, B: GraphFn>(
    build: &B,
    inputs: &[Tensor<f64>],
) -> Result<Vec<Vec<f64>>, TensorError> {
    let mut graph: Graph<F> = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| {
            let cast: Vec<F> = t.data().iter().map(|&v| F::from_f64(v)).collect();
            graph.param(Tensor::new(t.shape().to_vec(), cast).unwrap())
        })
        .collect();
    let out = build.build(&mut graph, &ids)?;
    let grads = graph.backward(out)?;
    Ok(ids
        .iter()
        .zip(inputs)
        .map(|(&id, input)| match grads.get(id) {
            Some(g) => g.data().iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; input.numel()],
        })
        .collect())
}

/// Central finite differences of the scalar output, evaluated in `f64`.
pub fn finite_difference_gradients<B: GraphFn>(
    build: &B,
    inputs: &[Tensor<f64>],
    step: f64,
) -> Result<Vec<Vec<f64>>, TensorError> {
    let eval = |points: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut graph: Graph<f64> = Graph::new();
        let ids: Vec<NodeId> = points.iter().map(|t| graph.leaf(t.clone())).collect();
        let out = build.build(&mut graph, &ids)?;
        Ok(graph.value(out).item())
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[i].numel()];
        for j in 0..grad.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            grad[j] = (plus - minus) / (2.0 * step);
        }
        grads.push(grad);
    }
    Ok(grads)
}

pub(crate) fn fill_uniform(rng: &mut impl rand::Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Randomized finite-difference suite over every differentiable op kind.
/// Returns one outcome per case; `seed` fixes the random draws.
pub fn op_suite(seed: u64, cases_per_op: usize) -> Vec<CheckOutcome> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    macro_rules! case {
        ($name:expr, $inputs:expr, $builder:expr) => {{
            for c in 0..cases_per_op {
                let inputs = $inputs(&mut rng);
                let name = format!("{}[{}]", $name, c);
                out.push(
                    check_gradients(&name, &$builder, &inputs, 1e-3, 1e-4, 1e-6)
                        .expect("suite case must build"),
                );
            }
        }};
    }

    struct Matmul;
    impl GraphFn for Matmul {
        fn build<F: Scalar>(&self, g: &mut Graph<F>, ids: &[NodeId]) -> Result<NodeId, TensorError> {
            let y = g.matmul(ids[0], ids[1])?;
            Ok(g.sum_all(y))
        }
    }
    case!("matmul", |r: &mut rand_chacha::ChaCha8Rng| vec![
        fill_uniform(r, vec![3, 4], -1.0, 1.0),
        fill_uniform(r, vec![4, 2], -1.0, 1.0)
    ], Matmul);

    struct AddMul;
    impl GraphFn for AddMul {
        fn build<F: Scalar>(&self, g: &mut Graph<F>, ids: &[NodeId]) -> Result<NodeId, TensorError> {
            let s = g.add(ids[0], ids[1])?;
            let m = g.mul(s, ids[1])?;
            Ok(g.sum_all(m))
        }
    }
    case!("add_mul", |r: &mut rand_chacha::ChaCha8Rng| vec![
        fill_uniform(r, vec![2, 3], -1.0, 1.0),
        fill_uniform(r, vec![2, 3], -1.0, 1.0)
    ], AddMul);

    struct SubDot;
    impl GraphFn for SubDot {
        fn build<F: Scalar>(&self, g: &mut Graph<F>, ids: &[NodeId]) -> Result<NodeId, TensorError> {
            let d = g.sub(ids[0], ids[1])?;
            g.dot(d, ids[0])
        }
    }
    case!("sub_dot", |r: &mut rand_chacha::ChaCha8Rng| vec![
        fill_uniform(r, vec![5], -1.0, 1.0),
        fill_uniform(r, vec![5], -1.0, 1.0)
    ], SubDot);

    struct ReluPath;
    impl GraphFn for ReluPath {
        fn build<F: Scalar>(&self, g: &mut Graph<F>, ids: &[NodeId]) -> Result<NodeId, TensorError> {
            let y = g.relu(ids[0]);
            Ok(g.sum_all(y))
        }
    }
    // Keep points away from the ReLU kink where the derivative is undefined.
    case!("relu", |r: &mut rand_chacha::ChaCha8Rng| {
        let mut t = fill_uniform(r, vec![3, 3], -1.0, 1.0);
        for v in t.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1_f64.copysign(*v + 1e-9);
            }
        }
        vec![t]
    }, ReluPath);

    struct SigmoidPath;
    impl GraphFn for SigmoidPath {
        fn build<F: Scalar>(&self, g: &mut Graph<F>, ids: &[NodeId]) -> Result<NodeId, TensorError> {
            let y = g.sigmoid(ids[0]);
            Ok(g.mean_all(y))
        }
    }
    case!("sigmoid", |r: &mut rand_chacha::ChaCha8Rng| vec![
        fill_uniform(r, vec![4], -3.0, 3.0)
    ], SigmoidPath);

    struct SoftmaxPath;
    impl GraphFn for SoftmaxPath {
        fn build<F: Scalar>(&self, g: &mut Graph<F>, ids: &[NodeId]) -> Result<NodeId, TensorError> {
            let y = g.softmax_rows(ids[0])?;
            let w = g.mul(y, ids[1])?;
            Ok(g.sum_all(w))
        }
    }
    case!("softmax_rows", |r: &mut rand_chacha::ChaCha8Rng| vec![
        fill_uniform(r, vec![3, 4], -2.0, 2.0),
        fill_uniform(r, vec![3, 4], -1.0, 1.0)
    ], SoftmaxPath);

    struct Reductions;
    impl GraphFn for Reductions {
        fn build<F: Scalar>(&self, g: &mut Graph<F>, ids: &[NodeId]) -> Result<NodeId, TensorError> {
            let m = g.mean_rows(ids[0])?;
            let s = g.sum_rows(ids[0])?;
            let d = g.mul(m, s)?;
            Ok(g.mean_all(d))
        }
    }
    case!("row_reductions", |r: &mut rand_chacha::ChaCha8Rng| vec![
        fill_uniform(r, vec![3, 5], -1.0, 1.0)
    ], Reductions);

    struct BiasConv;
    impl GraphFn for BiasConv {
        fn build<F: Scalar>(&self, g: &mut Graph<F>, ids: &[NodeId]) -> Result<NodeId, TensorError> {
            let y = g.matmul(ids[0], ids[1])?;
            let z = g.add_row_bias(y, ids[2])?;
            let a = g.relu(z);
            Ok(g.sum_all(a))
        }
    }
    case!("affine_relu", |r: &mut rand_chacha::ChaCha8Rng| {
        let a = fill_uniform(r, vec![4, 3], -1.0, 1.0);
        let w = fill_uniform(r, vec![3, 2], -1.0, 1.0);
        let mut bias = fill_uniform(r, vec![2], -0.5, 0.5);
        // Shift the bias until no pre-activation sits near the ReLU kink,
        // where the derivative is undefined and finite differences disagree.
        for j in 0..2 {
            loop {
                let near_kink = (0..4).any(|i| {
                    let mut acc = bias.data()[j];
                    for p in 0..3 {
                        acc += a.data()[i * 3 + p] * w.data()[p * 2 + j];
                    }
                    acc.abs() < 0.02
                });
                if !near_kink {
                    break;
                }
                bias.data_mut()[j] += 0.037;
            }
        }
        vec![a, w, bias]
    }, BiasConv);

    struct LayoutOps;
    impl GraphFn for LayoutOps {
        fn build<F: Scalar>(&self, g: &mut Graph<F>, ids: &[NodeId]) -> Result<NodeId, TensorError> {
            let cat = g.concat_cols(&[ids[0], ids[1]])?;
            let idx = std::sync::Arc::new(vec![2u32, 0, 1, 2]);
            let gathered = g.gather_rows(cat, idx)?;
            let sliced = g.slice_cols(gathered, 1, 3)?;
            let t = g.transpose(sliced)?;
            let r = g.reshape(t, vec![4, 3])?;
            let rep = g.repeat_rows(r, 2)?;
            let gm = g.group_mean_rows(rep, 4)?;
            Ok(g.sum_all(gm))
        }
    }
    case!("layout_ops", |r: &mut rand_chacha::ChaCha8Rng| vec![
        fill_uniform(r, vec![3, 2], -1.0, 1.0),
        fill_uniform(r, vec![3, 2], -1.0, 1.0)
    ], LayoutOps);

    struct Attention;
    impl GraphFn for Attention {
        fn build<F: Scalar>(&self, g: &mut Graph<F>, ids: &[NodeId]) -> Result<NodeId, TensorError> {
            let att = g.multi_head_attention(ids[0], ids[1], ids[2], 2, 2)?;
            let w = g.mul(att, ids[3])?;
            Ok(g.sum_all(w))
        }
    }
    case!("multi_head_attention", |r: &mut rand_chacha::ChaCha8Rng| vec![
        fill_uniform(r, vec![6, 4], -1.0, 1.0),
        fill_uniform(r, vec![6, 4], -1.0, 1.0),
        fill_uniform(r, vec![6, 4], -1.0, 1.0),
        fill_uniform(r, vec![6, 4], -1.0, 1.0)
    ], Attention);

    struct ThreeLayerNet;
    impl GraphFn for ThreeLayerNet {
        fn build<F: Scalar>(&self, g: &mut Graph<F>, ids: &[NodeId]) -> Result<NodeId, TensorError> {
            let h1 = g.matmul(ids[0], ids[1])?;
            let h1b = g.add_row_bias(h1, ids[2])?;
            let a1 = g.relu(h1b);
            let h2 = g.matmul(a1, ids[3])?;
            let a2 = g.sigmoid(h2);
            let h3 = g.matmul(a2, ids[4])?;
            Ok(g.mean_all(h3))
        }
    }
    case!("three_layer_net", |r: &mut rand_chacha::ChaCha8Rng| vec![
        fill_uniform(r, vec![3, 4], -1.0, 1.0),
        fill_uniform(r, vec![4, 5], -0.7, 0.7),
        fill_uniform(r, vec![5], -0.3, 0.3),
        fill_uniform(r, vec![5, 4], -0.7, 0.7),
        fill_uniform(r, vec![4, 1], -0.7, 0.7)
    ], ThreeLayerNet);

    struct ScalePath;
    impl GraphFn for ScalePath {
        fn build<F: Scalar>(&self, g: &mut Graph<F>, ids: &[NodeId]) -> Result<NodeId, TensorError> {
            let y = g.scale(ids[0], -1.7);
            Ok(g.sum_all(y))
        }
    }
    case!("scale", |r: &mut rand_chacha::ChaCha8Rng| vec![
        fill_uniform(r, vec![2, 2], -1.0, 1.0)
    ], ScalePath);

    out
}
