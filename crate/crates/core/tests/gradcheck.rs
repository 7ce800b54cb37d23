//! Finite-difference verification of every differentiable op, plus
//! softmax distribution properties.

use auction_forge_core::tensor::check::{self, GraphFn};
use auction_forge_core::tensor::{Graph, NodeId, Scalar, Tensor, TensorError};
use proptest::prelude::*;

#[test]
fn every_op_matches_finite_differences() {
    let outcomes = check::op_suite(0xC0FFEE, 4);
    assert!(outcomes.len() >= 40, "suite too small: {}", outcomes.len());
    for o in &outcomes {
        assert!(
            o.passed(),
            "{}: {} of {} partials failed (max rel {:.3e}, max abs {:.3e})",
            o.name,
            o.failures,
            o.compared,
            o.max_rel_err,
            o.max_abs_err
        );
    }
}

#[test]
fn three_layer_net_gradient_rel_error_under_1e4() {
    // The op suite runs a 3-layer net with step 1e-3; assert the bound here
    // explicitly as well.
    let outcomes = check::op_suite(42, 2);
    for o in outcomes.iter().filter(|o| o.name.starts_with("three_layer_net")) {
        assert!(o.passed(), "{}: max rel {:.3e}", o.name, o.max_rel_err);
    }
}

#[test]
fn double_precision_autodiff_agrees_with_itself() {
    // f64 AD against f64 finite differences is tight; catches backward
    // formula errors that f32 noise could mask.
    struct Mixed;
    impl GraphFn for Mixed {
        fn build<F: Scalar>(
            &self,
            g: &mut Graph<F>,
            ids: &[NodeId],
        ) -> Result<NodeId, TensorError> {
            let h = g.matmul(ids[0], ids[1])?;
            let s = g.sigmoid(h);
            let sm = g.softmax_rows(s)?;
            let att = g.multi_head_attention(sm, sm, sm, 1, 2)?;
            Ok(g.mean_all(att))
        }
    }
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![
        check_fill(&mut rng, vec![3, 3]),
        check_fill(&mut rng, vec![3, 4]),
    ];
    let ad = check::autodiff_gradients::<f64, _>(&Mixed, &inputs).unwrap();
    let fd = check::finite_difference_gradients(&Mixed, &inputs, 1e-5).unwrap();
    for (a, f) in ad.iter().zip(&fd) {
        for (&av, &fv) in a.iter().zip(f) {
            assert!(
                (av - fv).abs() <= 1e-9 + 1e-7 * av.abs().max(fv.abs()),
                "ad {av} vs fd {fv}"
            );
        }
    }
}

fn check_fill(rng: &mut impl rand::Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Softmax output is a probability vector and is invariant (to 1e-6)
    /// under an additive shift of its input.
    #[test]
    fn softmax_is_shift_invariant_probability_vector(
        row in proptest::collection::vec(-8.0f32..8.0, 1..12),
        shift in -5.0f32..5.0,
    ) {
        let n = row.len();
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, n], row.clone()).unwrap());
        let y = g.softmax_rows(x).unwrap();
        let base = g.value(y).data().to_vec();

        let sum: f32 = base.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        for &v in &base {
            prop_assert!(v >= 0.0);
        }

        let shifted: Vec<f32> = row.iter().map(|v| v + shift).collect();
        let xs = g.leaf(Tensor::new(vec![1, n], shifted).unwrap());
        let ys = g.softmax_rows(xs).unwrap();
        for (&a, &b) in base.iter().zip(g.value(ys).data()) {
            prop_assert!((a - b).abs() < 1e-6, "shift changed softmax: {a} vs {b}");
        }
    }

    /// Gather followed by scatter-add backward preserves total mass.
    #[test]
    fn gather_rows_gradient_mass_is_conserved(
        rows in 1usize..6,
        cols in 1usize..5,
        pick in proptest::collection::vec(0usize..6, 1..10),
    ) {
        let idx: Vec<u32> = pick.iter().map(|&i| (i % rows) as u32).collect();
        let count = idx.len();
        let mut g: Graph<f32> = Graph::new();
        let x = g.param(Tensor::full(vec![rows, cols], 0.5));
        let y = g.gather_rows(x, std::sync::Arc::new(idx)).unwrap();
        let s = g.sum_all(y);
        let grads = g.backward(s).unwrap();
        let total: f32 = grads.get(x).unwrap().data().iter().sum();
        prop_assert!((total - (count * cols) as f32).abs() < 1e-4);
    }
}
