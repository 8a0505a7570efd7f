//! Random network prediction: fitting behavior, the forward oracle and the
//! normalization properties.

use crnp::eval::median;
use crnp::rnp::{normalize_uncertainty, LayerKind, NormScope, RnpConfig, RnpModule};
use crnp::tensor::{ParamStore, Rng, Tensor};
use crnp::train::{Optimizer, OptimizerKind};
use proptest::prelude::*;

fn module(cfg: RnpConfig, seed: u64) -> (RnpModule, ParamStore) {
    let mut store = ParamStore::new();
    let m = RnpModule::new(cfg, &mut store, "rnp", &mut Rng::new(seed)).unwrap();
    (m, store)
}

/// Dense stack evaluated by hand from raw weights: `[w0, b0, w1, b1, ...]`,
/// LeakyReLU(0.25) between layers, none after the last.
fn dense_oracle(store: &ParamStore, ids: &[crnp::tensor::ParamId], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let layers = ids.len() / 2;
    for l in 0..layers {
        let w = store.value(ids[2 * l]);
        let b = store.value(ids[2 * l + 1]);
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        let mut out = b.data().to_vec();
        for j in 0..cols {
            for i in 0..rows {
                out[j] += h[i] * w.data()[i * cols + j];
            }
        }
        if l + 1 < layers {
            for v in &mut out {
                if *v < 0.0 {
                    *v *= 0.25;
                }
            }
        }
        h = out;
    }
    h
}

#[test]
fn layer_counts_follow_target_and_predictor_depths() {
    let (m, _) = module(RnpConfig::new(8, 32, LayerKind::Dense), 0);
    // weight + bias per layer: 3 hidden + output vs 2 hidden + output
    assert_eq!(m.target_ids().len(), 8);
    assert_eq!(m.predictor_ids().len(), 6);
}

#[test]
fn single_point_fit_drives_residual_to_zero() {
    let cfg = RnpConfig::new(4, 8, LayerKind::Dense).with_weight_decay(0.0);
    let (m, mut store) = module(cfg, 3);
    let x = Tensor::from_rows(&[vec![0.5, -1.0, 0.25, 2.0]]).unwrap();
    let start = m.data_term(&store, &x).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::adam(), 0.0);
    for _ in 0..2000 {
        m.fit_step(&mut store, &mut opt, &x, 1e-2).unwrap();
    }
    let end = m.data_term(&store, &x).unwrap();
    assert!(start > 1e-2, "start {start}");
    assert!(end < 1e-6 * start.max(1.0), "start {start} end {end}");
}

#[test]
fn five_hundred_steps_reduce_the_data_term() {
    let (m, mut store) = module(RnpConfig::new(6, 6, LayerKind::Dense), 5);
    let x = Tensor::randn(&[32, 6], 1.0, &mut Rng::new(9));
    let before = m.data_term(&store, &x).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::adam(), 0.0);
    for _ in 0..500 {
        m.fit_step(&mut store, &mut opt, &x, 1e-3).unwrap();
    }
    let after = m.data_term(&store, &x).unwrap();
    assert!(after < before, "before {before} after {after}");
}

#[test]
fn unregularized_objective_matches_forward_oracle() {
    let cfg = RnpConfig::new(5, 7, LayerKind::Dense).with_weight_decay(0.0);
    let (m, mut store) = module(cfg, 21);
    let x = Tensor::randn(&[4, 5], 1.0, &mut Rng::new(2));
    let mut expected = 0.0;
    for i in 0..4 {
        let phi = dense_oracle(&store, &m.predictor_ids(), x.row(i));
        let psi = dense_oracle(&store, &m.target_ids(), x.row(i));
        expected += phi.iter().zip(&psi).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    let before = store.digest(&m.predictor_ids());
    let mut frozen = Optimizer::new(OptimizerKind::sgd(0.0), 0.0);
    let got = m.fit_step(&mut store, &mut frozen, &x, 0.0).unwrap();
    assert_eq!(store.digest(&m.predictor_ids()), before);
    assert!((got - expected).abs() <= 1e-12 * expected.max(1.0), "{got} vs {expected}");
}

#[test]
fn regularizer_adds_lambda_times_squared_predictor_norm() {
    let lambda = 0.5;
    let cfg = RnpConfig::new(3, 3, LayerKind::Dense).with_weight_decay(lambda);
    let (m, mut store) = module(cfg, 4);
    let x = Tensor::randn(&[2, 3], 1.0, &mut Rng::new(8));
    let data = m.data_term(&store, &x).unwrap();
    let norm: f64 = m
        .predictor_ids()
        .iter()
        .flat_map(|&id| store.value(id).data().to_vec())
        .map(|v| v * v)
        .sum();
    let mut frozen = Optimizer::new(OptimizerKind::sgd(0.0), 0.0);
    let got = m.fit_step(&mut store, &mut frozen, &x, 0.0).unwrap();
    assert!((got - (data + lambda * norm)).abs() < 1e-10);
}

#[test]
fn target_is_untouched_by_fitting_and_scoring() {
    let (m, mut store) = module(RnpConfig::new(4, 4, LayerKind::Dense), 1);
    let digest = store.digest(&m.target_ids());
    let x = Tensor::randn(&[8, 4], 1.0, &mut Rng::new(1));
    let mut opt = Optimizer::new(OptimizerKind::adam(), 0.0);
    for _ in 0..20 {
        m.fit_step(&mut store, &mut opt, &x, 1e-2).unwrap();
        m.score(&store, &x).unwrap();
    }
    assert_eq!(store.digest(&m.target_ids()), digest);
    assert_eq!(m.target_digest(), digest);
}

/// Two 2-D clusters at (+-2, 0); a held-out point near a center scores
/// below a point five standard deviations out.
#[test]
fn near_points_score_below_far_points() {
    let sigma = 0.5;
    let mut wins = Vec::new();
    for seed in 0..20u64 {
        let mut rng = Rng::new(seed);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|i| {
                let cx = if i % 2 == 0 { -2.0 } else { 2.0 };
                vec![cx + sigma * rng.normal(), sigma * rng.normal()]
            })
            .collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let cfg = RnpConfig::new(2, 16, LayerKind::Dense).with_widths(32, 16);
        let (m, mut store) = module(cfg, seed + 100);
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.0);
        for _ in 0..300 {
            m.fit_step(&mut store, &mut opt, &x, 1e-2).unwrap();
        }
        let probe = Tensor::from_rows(&[vec![2.0 + 0.1, 0.1], vec![2.0, 5.0 * sigma]]).unwrap();
        let u = m.score(&store, &probe).unwrap();
        wins.push(u.data()[1] - u.data()[0]);
    }
    assert!(median(&wins) > 0.0, "margins {wins:?}");
}

#[test]
fn normalization_examples() {
    let u = Tensor::vector(vec![1.0, 2.0, 4.0]);
    assert_eq!(normalize_uncertainty(&u, NormScope::Global).unwrap().data(), &[0.25, 0.5, 1.0]);
    let z = Tensor::vector(vec![0.0, 0.0]);
    assert_eq!(normalize_uncertainty(&z, NormScope::Global).unwrap().data(), &[0.0, 0.0]);
}

fn nonneg_tensor() -> impl Strategy<Value = Tensor> {
    (1usize..5, 1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(b, c, h, w)| {
        prop::collection::vec(0.0f64..10.0, b * c * h * w)
            .prop_map(move |d| Tensor::new(&[b, c, h, w], d).unwrap())
    })
}

proptest! {
    #[test]
    fn capacity_holds_for_every_constructible_config(
        n in 1usize..12, m in 1usize..12, tw in 1usize..24, pw in 1usize..24, seed in 0u64..4,
    ) {
        let cfg = RnpConfig::new(n, m, LayerKind::Dense).with_widths(tw, pw);
        let mut store = ParamStore::new();
        if let Ok(r) = RnpModule::new(cfg, &mut store, "r", &mut Rng::new(seed)) {
            prop_assert!(r.predictor_param_count(&store) < r.target_param_count(&store));
        }
    }

    #[test]
    fn scores_are_non_negative(seed in 0u64..1000, scale in 0.0f64..100.0) {
        let (m, store) = module(RnpConfig::new(3, 5, LayerKind::Dense), seed);
        let x = Tensor::randn(&[6, 3], scale, &mut Rng::new(seed + 1));
        let u = m.score(&store, &x).unwrap();
        prop_assert_eq!(u.shape(), &[6][..]);
        prop_assert!(u.data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn normalization_bounds_order_and_idempotence(u in nonneg_tensor(), pick in 0usize..3) {
        let scope = [NormScope::Batch, NormScope::Spatial, NormScope::Global][pick];
        let n = normalize_uncertainty(&u, scope).unwrap();
        prop_assert!(n.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for (a, b) in u.data().iter().zip(n.data()) {
            prop_assert_eq!(*a == 0.0, *b == 0.0);
        }
        let mx = n.data().iter().cloned().fold(0.0, f64::max);
        prop_assert!(mx == 0.0 || mx == 1.0);
        // within the global scope, order is preserved
        if scope == NormScope::Global {
            for i in 0..u.numel() {
                for j in 0..u.numel() {
                    if u.data()[i] < u.data()[j] {
                        prop_assert!(n.data()[i] <= n.data()[j]);
                    }
                }
            }
        }
        // every scope maximum is now 0 or 1, so a second pass divides by 1
        let again = normalize_uncertainty(&n, scope).unwrap();
        prop_assert_eq!(again.data(), n.data());
    }
}
