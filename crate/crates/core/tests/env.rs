//! Distribution-level tests of the auction environments: support
//! containment, law shapes, reproducibility and dataset files.

use auction_forge_core::env::{
    self, conditional_cdf, conditional_pdf, dataset, sample_dataset, value_law, ContextData,
    CtxRef, Law, SettingId, SettingSpec,
};

#[test]
fn setting_a_contexts_have_expected_domains() {
    let spec = SettingSpec::new(SettingId::A);
    assert_eq!((spec.n, spec.m), (3, 1));
    let data = sample_dataset(&spec, 2000, 11);
    match &data.bidder_ctx {
        ContextData::Discrete(ids) => {
            assert!(ids.iter().all(|&id| (1..=5).contains(&id)));
        }
        _ => panic!("setting A bidder contexts are discrete"),
    }
    match &data.item_ctx {
        ContextData::Discrete(ids) => assert!(ids.iter().all(|&id| id == 1)),
        _ => panic!("setting A item contexts are discrete"),
    }
}

#[test]
fn setting_c_contexts_are_in_unit_cube() {
    let spec = SettingSpec::new(SettingId::C);
    let data = sample_dataset(&spec, 500, 3);
    match &data.bidder_ctx {
        ContextData::Continuous { dim, data } => {
            assert_eq!(*dim, 10);
            assert!(data.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        _ => panic!("setting C bidder contexts are continuous"),
    }
}

#[test]
fn discrete_id_mean_matches_uniform_law() {
    // Uniform over {1..5} has mean 3; 1e5 draws pin it to ±0.02.
    let spec = SettingSpec::new(SettingId::A);
    let count = 100_000 / spec.n + 1;
    let data = sample_dataset(&spec, count, 123);
    let ids = match &data.bidder_ctx {
        ContextData::Discrete(ids) => ids,
        _ => unreachable!(),
    };
    let mean = ids.iter().map(|&v| v as f64).sum::<f64>() / ids.len() as f64;
    assert!((mean - 3.0).abs() < 0.02, "mean id {mean}");
}

#[test]
fn setting_a_mid_context_values_average_one_half() {
    // x = 3 gives a normal with mean 0.5; truncation to [0,1] is symmetric.
    let spec = SettingSpec::new(SettingId::A);
    let law = value_law(&spec, 0, CtxRef::Discrete(3), CtxRef::Discrete(1));
    let mut rng = auction_forge_core::rng::indexed_rng(99, 0);
    let draws = 100_000;
    let mut sum = 0.0;
    for _ in 0..draws {
        sum += law.sample(&mut rng);
    }
    let mean = sum / draws as f64;
    assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
}

#[test]
fn setting_d_mean_parameter_follows_modular_formula() {
    let spec = SettingSpec::new(SettingId::D);
    let law = value_law(&spec, 0, CtxRef::Discrete(9), CtxRef::Discrete(2));
    match law {
        Law::TruncNormal { mean, sd } => {
            assert!((mean - 2.0 / 11.0).abs() < 1e-12);
            assert!((sd - 0.05).abs() < 1e-12);
        }
        other => panic!("unexpected law {other:?}"),
    }
}

#[test]
fn setting_b_item_context_selects_density_family() {
    let spec = SettingSpec::new(SettingId::B);
    let normal = value_law(&spec, 1, CtxRef::Discrete(4), CtxRef::Discrete(1));
    assert!(matches!(normal, Law::TruncNormal { .. }));
    // Second item context: exponential with rate indexed by the bidder.
    for bidder in 0..3 {
        let law = value_law(&spec, bidder, CtxRef::Discrete(4), CtxRef::Discrete(2));
        match law {
            Law::TruncExp { rate } => {
                assert!((rate - (bidder + 1) as f64 / 6.0).abs() < 1e-12)
            }
            other => panic!("unexpected law {other:?}"),
        }
    }
}

#[test]
fn every_setting_respects_value_supports() {
    for id in SettingId::ALL {
        let spec = SettingSpec::new(id);
        let count = (100_000 / (spec.n * spec.m)).max(1000);
        let data = sample_dataset(&spec, count, 7 + id as u64);
        for k in 0..data.count {
            let values = data.sample_values(k);
            for i in 0..spec.n {
                for j in 0..spec.m {
                    let v = values[i * spec.m + j] as f64;
                    let law = value_law(&spec, i, data.bidder_context(k, i), data.item_context(k, j));
                    assert!(
                        v >= 0.0 && v <= law.upper() + 1e-6,
                        "setting {id}: value {v} outside [0, {}]",
                        law.upper()
                    );
                }
            }
        }
    }
}

#[test]
fn uniform_law_cdf_is_ratio_to_support() {
    let spec = SettingSpec::new(SettingId::C);
    let x = vec![0.3f32; 10];
    let y = vec![0.2f32; 10];
    let s = env::sigmoid64(x.iter().zip(&y).map(|(&a, &b)| a as f64 * b as f64).sum());
    let cdf = conditional_cdf(
        &spec,
        0,
        CtxRef::Continuous(&x),
        CtxRef::Continuous(&y),
        s / 2.0,
    );
    assert!((cdf - 0.5).abs() < 1e-9);
    assert_eq!(
        conditional_cdf(&spec, 0, CtxRef::Continuous(&x), CtxRef::Continuous(&y), 1.0),
        1.0
    );
}

#[test]
fn mid_context_cdf_at_center_is_half_and_matches_quadrature() {
    let spec = SettingSpec::new(SettingId::A);
    let x = CtxRef::Discrete(3);
    let y = CtxRef::Discrete(1);
    assert!((conditional_cdf(&spec, 0, x, y, 0.5) - 0.5).abs() < 1e-9);
    // Independent check: integrate the density numerically up to 0.5.
    let steps = 4096;
    let h = 0.5 / steps as f64;
    let mut acc = conditional_pdf(&spec, 0, x, y, 0.0) + conditional_pdf(&spec, 0, x, y, 0.5);
    for i in 1..steps {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * conditional_pdf(&spec, 0, x, y, i as f64 * h);
    }
    let integral = acc * h / 3.0;
    assert!((integral - 0.5).abs() < 1e-7, "integral {integral}");
}

#[test]
fn empirical_cdf_matches_conditional_cdf() {
    // Kolmogorov-Smirnov distance below 0.01 on 1e5 draws.
    let cases = [
        (SettingSpec::new(SettingId::A), 0usize, 3u32, 1u32),
        (SettingSpec::new(SettingId::B), 2, 2, 2),
        (SettingSpec::new(SettingId::D), 0, 9, 2),
    ];
    for (spec, bidder, xid, yid) in cases {
        let law = value_law(&spec, bidder, CtxRef::Discrete(xid), CtxRef::Discrete(yid));
        let mut rng = auction_forge_core::rng::indexed_rng(1234, 0);
        let mut draws: Vec<f64> = (0..100_000).map(|_| law.sample(&mut rng)).collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = draws.len() as f64;
        let mut ks = 0.0f64;
        for (i, &t) in draws.iter().enumerate() {
            let f = law.cdf(t);
            ks = ks.max((f - i as f64 / n).abs());
            ks = ks.max(((i + 1) as f64 / n - f).abs());
        }
        assert!(ks < 0.01, "{:?}: KS = {ks}", spec.id);
    }
}

#[test]
fn datasets_are_bit_exact_reproducible() {
    let spec = SettingSpec::new(SettingId::G);
    let a = sample_dataset(&spec, 200, 555);
    let b = sample_dataset(&spec, 200, 555);
    assert_eq!(a, b);
    let c = sample_dataset(&spec, 200, 556);
    assert_ne!(a.values, c.values);
}

#[test]
fn binary_dataset_round_trips_exactly() {
    let dir = std::env::temp_dir().join("afc-env-test");
    std::fs::create_dir_all(&dir).unwrap();
    for id in [SettingId::A, SettingId::C] {
        let spec = SettingSpec::new(id);
        let data = sample_dataset(&spec, 50, 42);
        let path = dir.join(format!("ds-{id}.bin"));
        dataset::write_binary(&data, &path).unwrap();
        let back = dataset::read_binary(&path).unwrap();
        assert_eq!(data, back, "setting {id} round trip");
        dataset::write_csv(&data, &dir.join(format!("ds-{id}.csv"))).unwrap();
    }
}

#[test]
fn rescaled_spec_keeps_law_and_changes_scale() {
    let spec = SettingSpec::new(SettingId::D);
    let wide = spec.with_scale(2, 7).unwrap();
    assert_eq!((wide.n, wide.m), (2, 7));
    assert_eq!(wide.id, SettingId::D);
    assert!(spec.with_scale(0, 3).is_err());
    let data = sample_dataset(&wide, 20, 9);
    assert_eq!(data.values.len(), 20 * 2 * 7);
}
