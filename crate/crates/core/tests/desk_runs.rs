//! Seeded training runs on the pendulum desk task.

use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ncf_core::adapteval::{adapt_sequential, metrics, AdaptConfig};
use ncf_core::dataset::TrajectoryDataset;
use ncf_core::metatrain::{
    train, train_baseline, Algorithm, BaselineConfig, BaselineMode, LrDrop, ModelConfig, PoolKind, PoolStrategy,
    TrainConfig, TrainReport,
};
use ncf_core::models::{Activation, TaylorOrder};
use ncf_core::odeint::IntegratorSpec;
use ncf_core::systems::{corrupt, generate_dataset, preset_counts, preset_grid, Preset, SplitCounts, SystemName, SystemSpec};

fn sp_desk(counts: SplitCounts) -> TrajectoryDataset {
    let name = SystemName::Sp;
    generate_dataset(
        &SystemSpec::new(name),
        &preset_grid(name, Preset::Desk),
        counts,
        &IntegratorSpec::ground_truth(),
        3,
    )
    .unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        seed: 1,
        algorithm: Algorithm::Ordinary,
        taylor_order: TaylorOrder::One,
        pool: PoolStrategy { kind: PoolKind::RandomAll, size: 2 },
        lambda1: 1e-3,
        lambda2: 0.0,
        lr_theta: 3e-3,
        lr_xi: 3e-3,
        lr_schedule: vec![LrDrop { epoch: epochs * 2 / 3, factor: 0.1 }],
        beta: 0.0,
        epochs,
        inner_theta: 1,
        inner_xi: 1,
        inner_tol: 0.0,
        solver: IntegratorSpec::rk4(0.1),
        model: ModelConfig::compact(2, 16),
        validate_every: 0,
    }
}

struct Run {
    ds: TrajectoryDataset,
    cfg: TrainConfig,
    report: TrainReport,
}

fn run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let ds = sp_desk(preset_counts(SystemName::Sp));
        let cfg = config(500);
        let report = train(&ds, &cfg).unwrap();
        Run { ds, cfg, report }
    })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    for (rank, i) in idx.into_iter().enumerate() {
        r[i] = rank as f64;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn loss_drops_tenfold_in_500_epochs() {
    let r = run();
    assert!(r.report.aborted.is_none());
    let first = r.report.epochs.first().unwrap().terms.data;
    let last = r.report.epochs.last().unwrap().terms.data;
    assert!(last * 10.0 <= first, "{first:.3e} → {last:.3e}");
}

#[test]
fn contexts_are_ordered_by_gravity_along_the_first_principal_axis() {
    let r = run();
    let rows = r.report.contexts.rows();
    let (m, d) = (rows.len(), rows[0].len());
    let mut x = DMatrix::from_fn(m, d, |i, j| rows[i][j]);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let eig = SymmetricEigen::new(x.transpose() * &x);
    let top = eig.eigenvalues.imax();
    let scores: Vec<f64> = (x * eig.eigenvectors.column(top)).iter().copied().collect();
    let gs: Vec<f64> = r.ds.metadata.train_envs.iter().map(|e| e["g"]).collect();
    // the principal axis has no preferred sign
    let rho = spearman(&scores, &gs).abs();
    assert!(rho > 0.9, "rank correlation {rho:.3}");
}

#[test]
fn adaptation_is_robust_to_small_observation_noise() {
    let r = run();
    let solver = r.cfg.solver;
    let acfg = AdaptConfig { lr: 1e-2, iterations: 1000, tol: 1e-8, lambda1: 1e-3, lambda2: 0.0, solver };
    let recover = |eta: f64| {
        let mut split = r.ds.ood_train.clone();
        if eta > 0.0 {
            split.x = corrupt(&split.x, eta, &mut ChaCha8Rng::seed_from_u64(17));
        }
        let a = adapt_sequential(&r.report.params, &split, &acfg).unwrap();
        metrics(&r.report.params, &a.contexts, &r.ds.ood_test, &solver).unwrap().mse
    };
    let clean = recover(0.0);
    for eta in [0.01, 0.05] {
        let noisy = recover(eta);
        assert!(noisy < 10.0 * clean, "η={eta}: {noisy:.3e} vs clean {clean:.3e}");
    }
}

#[test]
fn one_per_env_with_a_single_trajectory_overfits() {
    let ds = sp_desk(SplitCounts { train: 1, test: 32, ood_train: 1, ood_test: 1 });
    let cfg = BaselineConfig {
        seed: 1,
        state_hidden: vec![16],
        state_out: 16,
        main_hidden: vec![16, 16],
        activation: Activation::Swish,
        lr: 3e-3,
        epochs: 1500,
        solver: IntegratorSpec::rk4(0.1),
        validate_every: 0,
    };
    let ope = train_baseline(&ds, BaselineMode::Ope, &cfg).unwrap();
    let train_mse = ope.env_mse(&ds.train, &cfg.solver).unwrap();
    let test_mse = ope.env_mse(&ds.test, &cfg.solver).unwrap();
    // median over environments; one unstable extrapolation should not decide it
    let mut ratios: Vec<f64> = test_mse.iter().zip(&train_mse).map(|(te, tr)| te / tr).collect();
    ratios.sort_by(f64::total_cmp);
    let median = 0.5 * (ratios[3] + ratios[4]);
    assert!(median > 10.0, "test/train ratios {ratios:.3?}");
}
