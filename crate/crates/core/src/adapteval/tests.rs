use super::*;
use crate::dataset::TrajectoryDataset;
use crate::models::{init_three_net, vf_eval, Activation, ThreeNetConfig};
use crate::systems::{generate_dataset, Assignment, EnvironmentGrid, SplitCounts, SystemName, SystemSpec};
use proptest::prelude::*;
use rand::SeedableRng;

fn env(v: f64) -> Assignment {
    [("g".to_string(), v)].into_iter().collect()
}

fn toy_dataset() -> TrajectoryDataset {
    let mut spec = SystemSpec::new(SystemName::Sp);
    spec.t_eval = (0..5).map(|k| 0.25 * k as f64).collect();
    let grid = EnvironmentGrid {
        train: vec![env(4.0), env(9.0)],
        adapt: vec![env(6.5), env(12.0), env(15.0)],
    };
    let counts = SplitCounts {
        train: 2,
        test: 1,
        ood_train: 1,
        ood_test: 1,
    };
    generate_dataset(&spec, &grid, counts, &IntegratorSpec::ground_truth(), 5).unwrap()
}

fn params(d: usize, d_xi: usize, act: Activation, seed: u64) -> ThreeNetParams {
    let mut c = ThreeNetConfig::compact(d, d_xi, 6);
    c.activation = act;
    init_three_net(&c, seed).unwrap()
}

fn adapt_cfg(iterations: usize) -> AdaptConfig {
    AdaptConfig {
        lr: 1e-2,
        iterations,
        tol: 0.0,
        lambda1: 1e-3,
        lambda2: 0.0,
        solver: IntegratorSpec::rk4(0.05),
    }
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

// ---------------------------------------------------------------------------
// metrics

#[test]
fn metrics_worked_example() {
    let m = metrics_of(&t(&[1, 2], &[1.1, 1.8]), &t(&[1, 2], &[1.0, 2.0])).unwrap();
    assert!((m.mse - 0.025).abs() < 1e-12);
    assert!((m.mape.unwrap() - 10.0).abs() < 1e-9);
    assert_eq!(m.per_env.len(), 1);
    assert_eq!(m.per_env[0].mse, m.mse);
}

#[test]
fn mape_drops_tiny_denominators() {
    let m = metrics_of(&t(&[2, 2], &[5.0, 2.2, 0.3, -0.3]), &t(&[2, 2], &[0.0, 2.0, 1e-3, -1e-4])).unwrap();
    assert!((m.per_env[0].mape.unwrap() - 10.0).abs() < 1e-9);
    assert_eq!(m.per_env[1].mape, None);
    assert!((m.mape.unwrap() - 10.0).abs() < 1e-9);
    // mse keeps every element
    let oracle = (25.0 + 0.04 + (0.3f64 - 1e-3).powi(2) + (0.3f64 - 1e-4).powi(2)) / 4.0;
    assert!((m.mse - oracle).abs() < 1e-12);
}

#[test]
fn metrics_reject_shape_mismatch() {
    assert!(metrics_of(&t(&[1, 2], &[0.0, 0.0]), &t(&[2, 1], &[0.0, 0.0])).is_err());
}

// ---------------------------------------------------------------------------
// uncertainty

#[test]
fn uq_hand_example() {
    // one point, three candidates 1, 2, 3, truth 2
    let u = uq_from_candidates(&t(&[1, 3, 1, 1, 1], &[1.0, 2.0, 3.0]), &t(&[1, 1, 1, 1], &[2.0])).unwrap();
    assert!((u.mu.data()[0] - 2.0).abs() < 1e-15);
    assert!((u.sigma.data()[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(u.cl, 100.0);
    assert_eq!(u.rel_mse, Some(0.0));
    assert_eq!(u.mape, Some(0.0));
    assert_eq!(u.candidates, 3);
}

#[test]
fn uq_coverage_boundary() {
    // σ̂ = 1 for candidates ±1; truth at exactly 3 is inside, 3.5 is outside
    let c = t(&[1, 2, 1, 2, 1], &[-1.0, -1.0, 1.0, 1.0]);
    let u = uq_from_candidates(&c, &t(&[1, 1, 2, 1], &[3.0, 3.5])).unwrap();
    assert_eq!(u.cl, 50.0);
}

#[test]
fn uq_degenerate_spread() {
    let c = t(&[1, 2, 1, 1, 1], &[1.0, 1.0]);
    assert_eq!(uq_from_candidates(&c, &t(&[1, 1, 1, 1], &[1.0])).unwrap().cl, 100.0);
    assert_eq!(uq_from_candidates(&c, &t(&[1, 1, 1, 1], &[1.0 + 1e-9])).unwrap().cl, 0.0);
}

#[test]
fn uq_needs_two_candidates() {
    let r = uq_from_candidates(&t(&[1, 1, 1, 1, 1], &[1.0]), &t(&[1, 1, 1, 1], &[1.0]));
    assert!(r.is_err());
}

#[test]
fn uq_relative_mse_by_state_vector() {
    // d = 2; candidates collapse so μ̂ is the candidate itself
    let c = t(&[1, 2, 1, 2, 2], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    let x = t(&[1, 1, 2, 2], &[2.0, 0.0, 1e-4, 0.0]);
    let u = uq_from_candidates(&c, &x).unwrap();
    // second point is filtered; first contributes ‖(1,0)‖² / ‖(2,0)‖² = 1/4
    assert!((u.rel_mse.unwrap() - 100.0 * 0.25 / 2.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetric_candidates_centre_on_the_truth(x in -5.0f64..5.0, s in 0.01f64..2.0, p in 1usize..4) {
        // p pairs x ± s: mean x, std s, rel-mse 0, full coverage
        let data: Vec<f64> = (0..p).flat_map(|_| [x - s, x + s]).collect();
        let u = uq_from_candidates(&t(&[1, 2 * p, 1, 1, 1], &data), &t(&[1, 1, 1, 1], &[x])).unwrap();
        prop_assert!((u.mu.data()[0] - x).abs() < 1e-12);
        prop_assert!((u.sigma.data()[0] - s).abs() < 1e-12);
        prop_assert_eq!(u.cl, 100.0);
        if x.abs() > MAPE_FLOOR {
            prop_assert!(u.rel_mse.unwrap() < 1e-20);
        }
    }

    #[test]
    fn identical_candidates_have_zero_spread(v in proptest::collection::vec(-3.0f64..3.0, 4), p in 2usize..5) {
        let data: Vec<f64> = (0..p).flat_map(|_| v.clone()).collect();
        let u = uq_from_candidates(&t(&[1, p, 2, 1, 2], &data), &t(&[1, 2, 1, 2], &v)).unwrap();
        prop_assert!(u.sigma.data().iter().all(|&s| s == 0.0));
        prop_assert_eq!(u.mu.data(), &v[..]);
        prop_assert_eq!(u.cl, 100.0);
    }
}

#[test]
fn uq_with_equal_contexts_collapses_to_the_forecast() {
    let ds = toy_dataset();
    let p = params(2, 2, Activation::Swish, 3);
    let solver = IntegratorSpec::rk4(0.05);
    let targets = ContextSet::from_rows(vec![vec![0.1, -0.2]; 3]).unwrap();
    let expansion = ContextSet::from_rows(vec![vec![0.1, -0.2]; 2]).unwrap();
    let u = uq_metrics(&p, &targets, &expansion, &ds.ood_test, TaylorOrder::One, &solver).unwrap();
    let f = forecast(&p, &targets, &ds.ood_test, &solver).unwrap();
    assert!(u.sigma.max_abs() == 0.0);
    assert!(u.mu.sub(&f).unwrap().max_abs() < 1e-12);
}

#[test]
fn uq_metrics_checks_inputs() {
    let ds = toy_dataset();
    let p = params(2, 2, Activation::Swish, 3);
    let solver = IntegratorSpec::rk4(0.05);
    let one = ContextSet::zeros(1, 2);
    let three = ContextSet::zeros(3, 2);
    assert!(uq_metrics(&p, &three, &one, &ds.ood_test, TaylorOrder::One, &solver).is_err());
    assert!(uq_metrics(&p, &one, &three, &ds.ood_test, TaylorOrder::One, &solver).is_err());
}

// ---------------------------------------------------------------------------
// adaptation

#[test]
fn zero_iterations_return_zero_contexts() {
    let ds = toy_dataset();
    let p = params(2, 2, Activation::Swish, 1);
    for r in [
        adapt_sequential(&p, &ds.ood_train, &adapt_cfg(0)).unwrap(),
        adapt_bulk(&p, &ds.ood_train, &adapt_cfg(0)).unwrap(),
    ] {
        assert_eq!(r.contexts, ContextSet::zeros(3, 2));
        assert!(r.curves.iter().all(Vec::is_empty));
        assert!(r.failures.iter().all(Option::is_none));
    }
}

#[test]
fn bulk_matches_sequential_and_freezes_weights() {
    let ds = toy_dataset();
    let p = params(2, 2, Activation::Swish, 1);
    let before = p.fingerprint();
    let cfg = adapt_cfg(15);
    let seq = adapt_sequential(&p, &ds.ood_train, &cfg).unwrap();
    let bulk = adapt_bulk(&p, &ds.ood_train, &cfg).unwrap();
    assert_eq!(p.fingerprint(), before);
    let diff = seq.contexts.xi.sub(&bulk.contexts.xi).unwrap().max_abs();
    assert!(diff < 1e-8, "bulk and sequential contexts differ by {diff}");
    for (a, b) in seq.curves.iter().zip(&bulk.curves) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
        }
    }
}

#[test]
fn adaptation_reduces_each_loss() {
    let ds = toy_dataset();
    let p = params(2, 2, Activation::Swish, 2);
    let r = adapt_sequential(&p, &ds.ood_train, &adapt_cfg(40)).unwrap();
    for c in &r.curves {
        assert!(c.last().unwrap() < &c[0], "{c:?}");
    }
}

#[test]
fn sequential_adaptation_is_order_independent() {
    let ds = toy_dataset();
    let p = params(2, 2, Activation::Swish, 4);
    let cfg = adapt_cfg(5);
    let fwd = adapt_sequential(&p, &ds.ood_train, &cfg).unwrap();
    let rev = adapt_sequential(&p, &ds.ood_train.select_envs(&[2, 1, 0]), &cfg).unwrap();
    for e in 0..3 {
        assert_eq!(fwd.contexts.row(e), rev.contexts.row(2 - e));
    }
}

#[test]
fn adaptation_stops_on_tolerance() {
    let ds = toy_dataset();
    let p = params(2, 2, Activation::Swish, 2);
    let mut cfg = adapt_cfg(200);
    cfg.tol = 0.5;
    let r = adapt_sequential(&p, &ds.ood_train, &cfg).unwrap();
    assert!(r.curves.iter().all(|c| c.len() < 200));
}

#[test]
fn adaptation_rejects_bad_config() {
    let ds = toy_dataset();
    let p = params(2, 2, Activation::Swish, 2);
    let mut cfg = adapt_cfg(1);
    cfg.lr = 0.0;
    assert!(adapt_sequential(&p, &ds.ood_train, &cfg).is_err());
    let wrong = params(3, 2, Activation::Swish, 2);
    assert!(adapt_bulk(&wrong, &ds.ood_train, &adapt_cfg(1)).is_err());
}

#[test]
fn adapt_curve_csv_has_one_row_per_iteration() {
    let ds = toy_dataset();
    let p = params(2, 2, Activation::Swish, 2);
    let r = adapt_sequential(&p, &ds.ood_train, &adapt_cfg(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curve.csv");
    r.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().count(), 1 + 9);
}

// ---------------------------------------------------------------------------
// identification

#[test]
fn identity_contexts_recover_the_parameters() {
    let xi: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.3 - 0.5]).collect();
    let fit = identify_linear(&xi, &xi, None).unwrap();
    assert!((fit.q_matrix[0][0] - 1.0).abs() < 1e-12);
    assert!(fit.q_offset[0].abs() < 1e-12);
    assert!(fit.train_mse < 1e-24);
    assert!(!fit.ridge);
}

#[test]
fn affine_relation_is_exact_and_generalises() {
    let xi: Vec<Vec<f64>> = vec![vec![0.0], vec![1.0], vec![-2.0]];
    let c: Vec<Vec<f64>> = xi.iter().map(|x| vec![2.0 * x[0] + 1.0]).collect();
    let hx = vec![vec![3.0]];
    let hc = vec![vec![7.0]];
    let fit = identify_linear(&xi, &c, Some((&hx, &hc))).unwrap();
    assert!((fit.q_matrix[0][0] - 2.0).abs() < 1e-12);
    assert!((fit.q_offset[0] - 1.0).abs() < 1e-12);
    assert!(fit.heldout_mse.unwrap() < 1e-22);
    assert!((fit.heldout_predictions.unwrap()[0][0] - 7.0).abs() < 1e-11);
}

#[test]
fn least_squares_residual_matches_closed_form() {
    // y = (0, 1, 1) at x = (0, 1, 2): slope 1/2, offset 1/6
    let xi = vec![vec![0.0], vec![1.0], vec![2.0]];
    let c = vec![vec![0.0], vec![1.0], vec![1.0]];
    let fit = identify_linear(&xi, &c, None).unwrap();
    assert!((fit.q_matrix[0][0] - 0.5).abs() < 1e-12);
    assert!((fit.q_offset[0] - 1.0 / 6.0).abs() < 1e-12);
    let oracle = [1.0f64 / 6.0, -1.0 / 3.0, 1.0 / 6.0];
    for (r, o) in fit.residuals.iter().zip(oracle) {
        assert!((r[0] - o).abs() < 1e-12);
    }
    assert!((fit.train_mse - (1.0 / 36.0 + 1.0 / 9.0 + 1.0 / 36.0) / 3.0).abs() < 1e-12);
}

#[test]
fn rank_deficient_design_uses_the_ridge() {
    let xi = vec![vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]];
    let c = vec![vec![2.0], vec![4.0], vec![6.0]];
    let fit = identify_linear(&xi, &c, None).unwrap();
    assert!(fit.ridge);
    assert!(fit.train_mse < 1e-12);
}

#[test]
fn identification_needs_two_environments() {
    assert!(identify_linear(&[vec![1.0]], &[vec![1.0]], None).is_err());
    assert!(identify_linear(&[vec![1.0], vec![2.0]], &[vec![1.0]], None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn identification_is_equivariant_to_affine_context_maps(
        seed in 0u64..1000,
        a in proptest::sample::select(vec![-3.0, -0.5, 0.25, 2.0]),
        b in -2.0f64..2.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xi: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let c: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let moved: Vec<Vec<f64>> = xi.iter().map(|x| vec![a * x[0] + b]).collect();
        let f1 = identify_linear(&xi, &c, None).unwrap();
        let f2 = identify_linear(&moved, &c, None).unwrap();
        for (r1, r2) in f1.residuals.iter().flatten().zip(f2.residuals.iter().flatten()) {
            prop_assert!((r1 - r2).abs() < 1e-9);
        }
    }
}

// ---------------------------------------------------------------------------
// affine probe

fn probe_states() -> Tensor {
    t(&[3, 2], &[0.5, -0.2, 1.0, 0.3, -0.7, 0.1])
}

#[test]
fn linear_network_has_no_curvature() {
    let p = params(2, 2, Activation::Identity, 9);
    let ctx = ContextSet::from_rows(vec![vec![0.0, 1.0], vec![1.0, -1.0], vec![0.5, 0.5]]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = affine_probe(&p, &ctx, &probe_states(), 0.2, 12, &mut rng).unwrap();
    assert!(r.max_curvature < 1e-12);
    assert!(r.affine_residual < 1e-10);
}

#[test]
fn nonlinear_network_curves() {
    let p = params(2, 2, Activation::Swish, 9);
    let ctx = ContextSet::from_rows(vec![vec![0.0, 1.0], vec![1.0, -1.0], vec![0.5, 0.5]]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = affine_probe(&p, &ctx, &probe_states(), 0.2, 12, &mut rng).unwrap();
    assert!(r.max_curvature > 1e-6);
    assert!(r.affine_residual > 0.0);
    assert!(r.residual_curvature > 0.0);
}

#[test]
fn probe_matches_second_difference() {
    // one scalar context and no jitter: the probe is ‖∂²f/∂ξ²‖ at that point
    let p = params(2, 1, Activation::Swish, 5);
    let ctx = ContextSet::from_rows(vec![vec![0.4]]).unwrap();
    let x = t(&[1, 2], &[0.3, -0.8]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = affine_probe(&p, &ctx, &x, 0.0, 1, &mut rng).unwrap();
    let h = 1e-4;
    let f = |v: f64| vf_eval(&p, &t(&[2], &[0.3, -0.8]), &t(&[1], &[v])).unwrap();
    let dd = f(0.4 + h).sub(&f(0.4)).unwrap().sub(&f(0.4).sub(&f(0.4 - h)).unwrap()).unwrap().scale(1.0 / (h * h));
    let oracle = dd.norm_l2();
    assert!((r.max_curvature - oracle).abs() < 1e-5 * oracle.max(1.0), "{} vs {oracle}", r.max_curvature);
}

#[test]
fn affine_inversion_of_scaled_parameters() {
    // ξ = 2c + 1 componentwise, so c = ξ/2 − 1/2
    let c: Vec<Vec<f64>> = vec![vec![0.0, 1.0], vec![1.0, 0.5], vec![-1.0, 2.0], vec![0.5, -0.5]];
    let xi: Vec<Vec<f64>> = c.iter().map(|r| r.iter().map(|v| 2.0 * v + 1.0).collect()).collect();
    let fit = identify_linear(&xi, &c, None).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            let want = if i == j { 0.5 } else { 0.0 };
            assert!((fit.q_matrix[i][j] - want).abs() < 1e-12);
        }
        assert!((fit.q_offset[i] + 0.5).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scaling_parameters_scales_the_map(seed in 0u64..1000, s in proptest::sample::select(vec![-4.0, -1.0, 0.5, 2.0, 8.0])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xi: Vec<Vec<f64>> = (0..5).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let c: Vec<Vec<f64>> = (0..5).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let scaled: Vec<Vec<f64>> = c.iter().map(|r| vec![s * r[0]]).collect();
        let f1 = identify_linear(&xi, &c, None).unwrap();
        let f2 = identify_linear(&xi, &scaled, None).unwrap();
        // power-of-two scales are exact in floating point
        prop_assert_eq!(f2.q_offset[0], s * f1.q_offset[0]);
        for j in 0..2 {
            prop_assert_eq!(f2.q_matrix[0][j], s * f1.q_matrix[0][j]);
        }
    }
}

fn metrics_duplicate(pred: &[f64], truth: &[f64]) -> (f64, Option<f64>) {
    let mut se = 0.0;
    let mut ape = Vec::new();
    for i in 0..truth.len() {
        se += (truth[i] - pred[i]).powi(2);
        if truth[i].abs() > 1e-3 {
            ape.push(100.0 * ((truth[i] - pred[i]) / truth[i]).abs());
        }
    }
    let mape = if ape.is_empty() { None } else { Some(ape.iter().sum::<f64>() / ape.len() as f64) };
    (se / truth.len() as f64, mape)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_match_a_duplicate_implementation(pairs in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..40)) {
        let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let truth: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let n = pred.len();
        let m = metrics_of(&t(&[1, n], &pred), &t(&[1, n], &truth)).unwrap();
        let (mse, mape) = metrics_duplicate(&pred, &truth);
        prop_assert!((m.mse - mse).abs() < 1e-12);
        match (m.mape, mape) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12 * b.max(1.0)),
            (a, b) => prop_assert_eq!(a, b),
        }
    }
}

#[test]
fn metrics_agree_with_the_inner_loss_data_term() {
    let ds = toy_dataset();
    let p = params(2, 2, Activation::Swish, 6);
    let solver = IntegratorSpec::rk4(0.05);
    let ctx = ContextSet::from_rows(vec![vec![0.2, -0.1], vec![0.0, 0.3], vec![-0.4, 0.1]]).unwrap();
    let m = metrics(&p, &ctx, &ds.ood_train, &solver).unwrap();
    let pred = forecast(&p, &ctx, &ds.ood_train, &solver).unwrap();
    for e in 0..3 {
        let pe = pred.slice(0, e, e + 1).unwrap();
        let xe = ds.ood_train.x.slice(0, e, e + 1).unwrap();
        let n = ds.ood_train.n_steps();
        let (pe, xe) = (pe.reshape(&[n, 2]).unwrap(), xe.reshape(&[n, 2]).unwrap());
        let data = crate::metatrain::inner_loss(&p, ctx.row(e), &pe, &xe, 0.0, 0.0).unwrap();
        assert!((m.per_env[e].mse - data).abs() < 1e-12);
    }
}
