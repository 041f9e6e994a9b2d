use super::*;
use crate::models::vf_eval;
use crate::systems::{generate_dataset, Assignment, EnvironmentGrid, SplitCounts, SystemName, SystemSpec};
use proptest::prelude::*;
use rand::Rng;

fn env(name: &str, v: f64) -> Assignment {
    [(name.to_string(), v)].into_iter().collect()
}

/// Pendulum data on a short grid.
pub(super) fn toy_dataset(gs: &[f64], trajs: usize, steps: usize) -> TrajectoryDataset {
    let mut spec = SystemSpec::new(SystemName::Sp);
    spec.t_eval = (0..steps).map(|k| 0.25 * k as f64).collect();
    let grid = EnvironmentGrid {
        train: gs.iter().map(|&g| env("g", g)).collect(),
        adapt: vec![env("g", 6.5)],
    };
    let counts = SplitCounts {
        train: trajs,
        test: trajs,
        ood_train: 1,
        ood_test: 1,
    };
    generate_dataset(&spec, &grid, counts, &IntegratorSpec::ground_truth(), 11).unwrap()
}

pub(super) fn toy_config(k: TaylorOrder, p: usize) -> TrainConfig {
    TrainConfig {
        seed: 1,
        algorithm: Algorithm::Ordinary,
        taylor_order: k,
        pool: PoolStrategy {
            kind: PoolKind::RandomAll,
            size: p,
        },
        lambda1: 1e-3,
        lambda2: 1e-3,
        lr_theta: 1e-3,
        lr_xi: 1e-3,
        lr_schedule: vec![],
        beta: 0.0,
        epochs: 0,
        inner_theta: 1,
        inner_xi: 1,
        inner_tol: 1e-6,
        solver: IntegratorSpec::rk4(0.05),
        model: ModelConfig::compact(2, 8),
        validate_every: 0,
    }
}

fn random_contexts(m: usize, d: usize, rng: &mut ChaCha8Rng) -> ContextSet {
    ContextSet {
        xi: Tensor::new(vec![m, d], (0..m * d).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap(),
    }
}

fn scalar_contexts(v: &[f64]) -> ContextSet {
    ContextSet::from_rows(v.iter().map(|&x| vec![x]).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// pools

#[test]
fn zero_contexts_nearest_first_picks_self() {
    let c = ContextSet::zeros(5, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for e in 0..5 {
        assert_eq!(build_pool(PoolStrategy::own(), e, &c, &mut rng).unwrap(), vec![e]);
    }
}

#[test]
fn nearest_first_orders_by_distance() {
    let c = scalar_contexts(&[0.0, 1.0, 10.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let nf = |p| PoolStrategy {
        kind: PoolKind::NearestFirst,
        size: p,
    };
    assert_eq!(build_pool(nf(2), 0, &c, &mut rng).unwrap(), vec![0, 1]);
    assert_eq!(build_pool(nf(2), 2, &c, &mut rng).unwrap(), vec![2, 1]);
    assert_eq!(build_pool(nf(3), 1, &c, &mut rng).unwrap(), vec![1, 0, 2]);
}

#[test]
fn nearest_first_ties_go_to_lowest_index() {
    let c = scalar_contexts(&[1.0, -1.0, 0.0, 1.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let nf = PoolStrategy {
        kind: PoolKind::NearestFirst,
        size: 3,
    };
    // e = 3 ties with 0 at distance 0: self first
    assert_eq!(build_pool(nf, 3, &c, &mut rng).unwrap(), vec![3, 0, 2]);
    assert_eq!(build_pool(nf, 2, &c, &mut rng).unwrap(), vec![2, 0, 1]);
}

#[test]
fn smallest_first_uses_l1_norm() {
    let c = ContextSet::from_rows(vec![vec![3.0, 0.0], vec![1.0, -1.5], vec![2.0, 0.1], vec![-0.5, 0.5]]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let sf = PoolStrategy {
        kind: PoolKind::SmallestFirst,
        size: 2,
    };
    assert_eq!(build_pool(sf, 0, &c, &mut rng).unwrap(), vec![3, 2]);
}

#[test]
fn random_all_is_seeded_and_distinct() {
    let c = ContextSet::zeros(9, 2);
    let ra = PoolStrategy {
        kind: PoolKind::RandomAll,
        size: 4,
    };
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..20).map(|e| build_pool(ra, e % 9, &c, &mut rng).unwrap()).collect::<Vec<_>>()
    };
    let a = draw(3);
    assert_eq!(a, draw(3));
    assert_ne!(a, draw(4));
    for pool in &a {
        let mut p = pool.clone();
        p.dedup();
        assert_eq!(p.len(), 4);
        assert!(p.iter().all(|&j| j < 9));
    }
    // every index is reachable
    let mut seen = [false; 9];
    a.iter().flatten().for_each(|&j| seen[j] = true);
    assert!(seen.iter().all(|&s| s));
}

#[test]
fn pool_larger_than_environments_fails() {
    let c = ContextSet::zeros(2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = PoolStrategy {
        kind: PoolKind::RandomAll,
        size: 3,
    };
    assert!(matches!(build_pool(s, 0, &c, &mut rng), Err(MetaError::PoolTooLarge { p: 3, m: 2 })));
}

// ---------------------------------------------------------------------------
// losses

fn small_params(seed: u64) -> ThreeNetParams {
    init_three_net(&ThreeNetConfig::compact(1, 2, 4), seed).unwrap()
}

#[test]
fn inner_loss_zero_and_substitution() {
    let mut p = small_params(0);
    let truth = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
    assert_eq!(inner_loss(&p, &[0.0, 0.0], &truth, &truth, 1.0, 0.0).unwrap(), 0.0);
    p.zero_output();
    let pred = Tensor::matrix(1, 1, vec![2.0]).unwrap();
    let zero = Tensor::matrix(1, 1, vec![0.0]).unwrap();
    assert_eq!(inner_loss(&p, &[0.0, 0.0], &pred, &zero, 0.0, 0.0).unwrap(), 4.0);
    assert!(inner_loss(&p, &[0.0], &pred, &zero, 0.0, 0.0).is_err());
    assert!(inner_loss(&p, &[0.0, 0.0], &truth, &pred, 0.0, 0.0).is_err());
}

#[test]
fn inner_loss_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..20 {
        let p = small_params(trial);
        let (n, d) = (5, 1);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect() };
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let xi = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let (l1, l2) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let got = inner_loss(
            &p,
            &xi,
            &Tensor::matrix(n, d, a.clone()).unwrap(),
            &Tensor::matrix(n, d, b.clone()).unwrap(),
            l1,
            l2,
        )
        .unwrap();
        let mut data = 0.0;
        for k in 0..n * d {
            data += (a[k] - b[k]) * (a[k] - b[k]);
        }
        data /= (n * d) as f64;
        let mut norm1 = 0.0;
        for v in xi {
            norm1 += v.abs();
        }
        let mut sq = 0.0;
        let mut count = 0usize;
        for t in p.tensors() {
            for v in t.data() {
                sq += v * v;
                count += 1;
            }
        }
        let expected = data + l1 * norm1 / 2.0 + l2 * sq / count as f64;
        assert!((got - expected).abs() < 1e-12);
    }
}

/// Per-trajectory loss by solo integration of `f(x, ξ^e)`.
fn reference_data_term(params: &ThreeNetParams, contexts: &ContextSet, split: &Split, solver: &IntegratorSpec) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for e in 0..split.n_envs() {
        let xi = Tensor::vector(contexts.row(e).to_vec());
        for i in 0..split.n_trajs() {
            let f = |x: &Tensor| -> std::result::Result<Tensor, DiffError> {
                Ok(vf_eval(params, x, &xi).map_err(|e| match e {
                    ModelError::Diff(d) => d,
                    other => panic!("{other}"),
                })?)
            };
            let x0 = Tensor::vector(split.state(e, i, 0).to_vec());
            let traj = integrate(&f, &x0, &split.t, solver).unwrap();
            for (k, xk) in traj.iter().enumerate() {
                for (a, b) in xk.data().iter().zip(split.state(e, i, k)) {
                    total += (a - b) * (a - b);
                }
            }
            count += split.n_steps() * split.state_size();
        }
    }
    total / count as f64
}

#[test]
fn own_pool_at_order_zero_is_a_plain_neural_ode_loss() {
    let ds = toy_dataset(&[3.0, 9.0, 15.0], 2, 6);
    let mut cfg = toy_config(TaylorOrder::Zero, 1);
    cfg.pool = PoolStrategy::own();
    cfg.lambda1 = 0.0;
    cfg.lambda2 = 0.0;
    let (params, _) = initial_state(&ds, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ctx = random_contexts(3, 2, &mut rng);
    let loss = total_loss(&params, &ctx, &ds.train, &cfg, &mut rng).unwrap();
    let reference = reference_data_term(&params, &ctx, &ds.train, &cfg.solver);
    assert!((loss.total - reference).abs() < 1e-12 * reference.max(1.0), "{} vs {reference}", loss.total);
    assert_eq!(loss.total, loss.data);
}

#[test]
fn equal_contexts_make_the_pool_size_irrelevant() {
    let ds = toy_dataset(&[3.0, 9.0, 15.0], 2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shared: Vec<f64> = (0..2).map(|_| rng.random_range(-0.5..0.5)).collect();
    let ctx = ContextSet::from_rows(vec![shared.clone(); 3]).unwrap();
    for k in [TaylorOrder::One, TaylorOrder::Two] {
        let base = {
            let mut cfg = toy_config(k, 1);
            cfg.pool = PoolStrategy::own();
            let (params, _) = initial_state(&ds, &cfg).unwrap();
            (total_loss(&params, &ctx, &ds.train, &cfg, &mut rng).unwrap(), params)
        };
        for p in 2..=3 {
            let cfg = toy_config(k, p);
            let loss = total_loss(&base.1, &ctx, &ds.train, &cfg, &mut rng).unwrap();
            assert!((loss.total - base.0.total).abs() < 1e-12, "k={k:?} p={p}");
        }
    }
}

#[test]
fn regularizers_vanish_without_penalties() {
    let ds = toy_dataset(&[3.0, 9.0], 2, 4);
    let mut cfg = toy_config(TaylorOrder::Two, 2);
    cfg.lambda1 = 0.0;
    cfg.lambda2 = 0.0;
    let (params, _) = initial_state(&ds, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ctx = random_contexts(2, 2, &mut rng);
    let loss = total_loss(&params, &ctx, &ds.train, &cfg, &mut rng).unwrap();
    assert!((loss.total - loss.data).abs() < 1e-12);
    assert_eq!((loss.l1, loss.l2), (0.0, 0.0));
}

#[test]
fn regularizer_values() {
    let ds = toy_dataset(&[3.0, 9.0], 1, 3);
    let cfg = toy_config(TaylorOrder::One, 2);
    let (params, _) = initial_state(&ds, &cfg).unwrap();
    let ctx = ContextSet::from_rows(vec![vec![0.5, -1.0], vec![0.25, 0.0]]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let loss = total_loss(&params, &ctx, &ds.train, &cfg, &mut rng).unwrap();
    // mean over environments of (λ1/dξ)‖ξ^e‖₁
    let l1 = 1e-3 / 2.0 * (1.5 + 0.25) / 2.0;
    assert!((loss.l1 - l1).abs() < 1e-15);
    let sq: f64 = params.tensors().iter().flat_map(|t| t.data().iter()).map(|v| v * v).sum();
    assert!((loss.l2 - 1e-3 * sq / params.num_params() as f64).abs() < 1e-15);
}

fn fd_check(k: TaylorOrder) {
    let ds = toy_dataset(&[4.0, 12.0], 1, 3);
    let mut cfg = toy_config(k, 2);
    cfg.model = ModelConfig::compact(2, 5);
    let (mut params, _) = initial_state(&ds, &cfg).unwrap();
    // nonzero biases exercise every path
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let theta: Vec<Tensor> = params
        .tensors()
        .iter()
        .map(|t| {
            let noise: Vec<f64> = (0..t.len()).map(|_| rng.random_range(-0.2..0.2)).collect();
            t.add(&Tensor::new(t.shape().to_vec(), noise).unwrap()).unwrap()
        })
        .collect();
    params = params.with_tensors(theta).unwrap();
    let ctx = random_contexts(2, 2, &mut rng);
    let pools = vec![vec![0, 1], vec![1, 0]];
    let g = total_loss_grad(&params, &ctx, &ds.train, &pools, &cfg).unwrap();
    let loss_at = |p: &ThreeNetParams, c: &ContextSet| total_loss_with_pools(p, c, &ds.train, &pools, &cfg).unwrap().total;
    let h = 1e-6;
    let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
        let fd = (plus - minus) / (2.0 * h);
        let rel = (analytic - fd).abs() / fd.abs().max(analytic.abs()).max(1e-6);
        assert!(rel < 1e-4, "{what}: analytic {analytic} vs fd {fd}");
    };
    let gt = g.theta.unwrap();
    let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    for (ti, t) in tensors.iter().enumerate() {
        for idx in (0..t.len()).step_by(3) {
            let bump = |s: f64| {
                let mut ts = tensors.clone();
                ts[ti].data_mut()[idx] += s;
                params.with_tensors(ts).unwrap()
            };
            check(gt[ti].data()[idx], loss_at(&bump(h), &ctx), loss_at(&bump(-h), &ctx), &format!("θ[{ti}][{idx}]"));
        }
    }
    let gc = g.contexts.unwrap();
    for idx in 0..ctx.xi.len() {
        let bump = |s: f64| {
            let mut c = ctx.clone();
            c.xi.data_mut()[idx] += s;
            c
        };
        check(gc.data()[idx], loss_at(&params, &bump(h)), loss_at(&params, &bump(-h)), &format!("ξ[{idx}]"));
    }
}

#[test]
fn total_loss_gradient_matches_fd_order_one() {
    fd_check(TaylorOrder::One);
}

#[test]
fn total_loss_gradient_matches_fd_order_two() {
    fd_check(TaylorOrder::Two);
}

#[test]
fn total_loss_gradient_matches_fd_order_zero() {
    fd_check(TaylorOrder::Zero);
}

fn permute_split(split: &Split, perm: &[usize]) -> Split {
    split.select_envs(perm)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn loss_is_invariant_under_environment_permutation(
        seed in 0u64..1000,
        perm_seed in 0u64..1000,
        k in 0u8..3,
    ) {
        let ds = toy_dataset(&[3.0, 8.0, 14.0], 1, 4);
        let cfg = toy_config(TaylorOrder::try_from(k).unwrap(), 2);
        let (params, _) = initial_state(&ds, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx = random_contexts(3, 2, &mut rng);
        let pools = build_pools(cfg.pool, &ctx, &mut rng).unwrap();
        let mut perm: Vec<usize> = vec![0, 1, 2];
        let mut prng = ChaCha8Rng::seed_from_u64(perm_seed);
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut prng);
        // new position a holds old environment perm[a]
        let mut inverse = vec![0; 3];
        for (a, &old) in perm.iter().enumerate() {
            inverse[old] = a;
        }
        let ctx_p = ContextSet { xi: ctx.xi.gather_rows(&perm).unwrap() };
        let pools_p: Vec<Vec<usize>> = perm.iter().map(|&old| pools[old].iter().map(|&j| inverse[j]).collect()).collect();
        let a = total_loss_with_pools(&params, &ctx, &ds.train, &pools, &cfg).unwrap().total;
        let b = total_loss_with_pools(&params, &ctx_p, &permute_split(&ds.train, &perm), &pools_p, &cfg).unwrap().total;
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn identical_contexts_collapse_candidates(seed in 0u64..1000, p in 1usize..4, k in 0u8..3) {
        let ds = toy_dataset(&[3.0, 8.0, 14.0], 1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let row: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ctx = ContextSet::from_rows(vec![row; 3]).unwrap();
        let order = TaylorOrder::try_from(k).unwrap();
        let cfg = toy_config(order, p);
        let (params, _) = initial_state(&ds, &cfg).unwrap();
        let with_p = total_loss(&params, &ctx, &ds.train, &cfg, &mut rng).unwrap().total;
        let mut own = cfg.clone();
        own.pool = PoolStrategy::own();
        let with_1 = total_loss(&params, &ctx, &ds.train, &own, &mut rng).unwrap().total;
        prop_assert!((with_p - with_1).abs() <= 1e-12 * with_1.max(1.0));
    }
}

// ---------------------------------------------------------------------------
// Adam

#[test]
fn adam_first_step_is_sign_scaled() {
    let mut p = vec![Tensor::vector(vec![1.0, -2.0, 0.5])];
    let g = vec![Tensor::vector(vec![3.0, -0.2, 0.0])];
    let mut adam = Adam::new(&[&p[0]]);
    adam.step(&mut p, &g, 0.01);
    let d = p[0].data();
    assert!((d[0] - 0.99).abs() < 1e-8);
    assert!((d[1] - (-1.99)).abs() < 1e-7);
    assert_eq!(d[2], 0.5);
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut p = vec![Tensor::vector(vec![1.0, 2.0])];
    let mut adam = Adam::new(&[&p[0]]);
    for _ in 0..5 {
        adam.step(&mut p, &[Tensor::zeros(&[2])], 0.1);
    }
    assert_eq!(p[0].data(), &[1.0, 2.0]);
    assert_eq!(adam.steps(), 5);
}

#[test]
fn adam_three_steps_follow_the_recursion() {
    let lr = 0.1;
    let mut p = vec![Tensor::scalar(0.0)];
    let mut adam = Adam::new(&[&p[0]]);
    let mut expected = 0.0;
    let (mut m, mut v) = (0.0f64, 0.0f64);
    for t in 1..=3 {
        adam.step(&mut p, &[Tensor::scalar(1.0)], lr);
        m = 0.9 * m + 0.1;
        v = 0.999 * v + 0.001;
        let m_hat = m / (1.0 - 0.9f64.powi(t));
        let v_hat = v / (1.0 - 0.999f64.powi(t));
        expected -= lr * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
    }
    // constant gradient: each bias-corrected step is lr/(1+ε)
    assert!((expected + 3.0 * lr / (1.0 + 1e-8)).abs() < 1e-12);
}

// ---------------------------------------------------------------------------
// training loops

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let ds = toy_dataset(&[3.0, 9.0], 1, 4);
    let mut cfg = toy_config(TaylorOrder::One, 2);
    cfg.lambda1 = 0.0;
    cfg.lambda2 = 0.0;
    let (params, ctx) = initial_state(&ds, &cfg).unwrap();
    let r = train_ordinary(&ds, &cfg).unwrap();
    assert_eq!(r.params, params);
    assert_eq!(r.contexts, ctx);
    assert!(r.epochs.is_empty());
    cfg.algorithm = Algorithm::Proximal;
    let r = train_proximal(&ds, &cfg).unwrap();
    assert_eq!(r.params, params);
}

#[test]
fn ordinary_training_reduces_the_loss() {
    let ds = toy_dataset(&[3.0, 9.0], 2, 6);
    let mut cfg = toy_config(TaylorOrder::One, 2);
    cfg.epochs = 60;
    cfg.lr_theta = 3e-3;
    cfg.lr_xi = 3e-3;
    let r = train_ordinary(&ds, &cfg).unwrap();
    assert_eq!(r.epochs.len(), 60);
    assert!(r.aborted.is_none());
    let first = r.epochs[0].terms.total;
    let last = r.epochs.last().unwrap().terms.total;
    assert!(last < 0.5 * first, "{first} → {last}");
    assert!(r.contexts.xi.max_abs() > 0.0);
}

#[test]
fn proximal_with_zero_beta_and_single_steps_is_ordinary() {
    let ds = toy_dataset(&[3.0, 9.0, 15.0], 1, 5);
    let mut cfg = toy_config(TaylorOrder::One, 2);
    cfg.epochs = 8;
    let ord = train_ordinary(&ds, &cfg).unwrap();
    cfg.algorithm = Algorithm::Proximal;
    let prox = train_proximal(&ds, &cfg).unwrap();
    for (a, b) in ord.epochs.iter().zip(&prox.epochs) {
        assert!((a.terms.total - b.terms.total).abs() < 1e-10);
    }
    for (a, b) in ord.params.tensors().iter().zip(prox.params.tensors()) {
        assert!(a.sub(b).unwrap().max_abs() < 1e-10);
    }
    assert!(ord.contexts.xi.sub(&prox.contexts.xi).unwrap().max_abs() < 1e-10);
}

#[test]
fn large_beta_keeps_weights_near_the_anchor() {
    // Adam normalizes step sizes, so the anchor bounds the excursion to a few
    // learning rates per coordinate instead of freezing the weights.
    let ds = toy_dataset(&[3.0, 9.0], 1, 4);
    let mut cfg = toy_config(TaylorOrder::One, 2);
    cfg.algorithm = Algorithm::Proximal;
    cfg.epochs = 1;
    cfg.inner_theta = 20;
    cfg.inner_xi = 1;
    cfg.inner_tol = 0.0;
    cfg.lr_theta = 1e-3;
    let (p0, _) = initial_state(&ds, &cfg).unwrap();
    let drift = |beta: f64| {
        let mut c = cfg.clone();
        c.beta = beta;
        let r = train_proximal(&ds, &c).unwrap();
        r.params
            .tensors()
            .iter()
            .zip(p0.tensors())
            .map(|(a, b)| a.sub(b).unwrap().max_abs())
            .fold(0.0, f64::max)
    };
    let anchored = drift(1e9);
    let free = drift(0.0);
    assert!(anchored < 2.0 * cfg.lr_theta, "{anchored}");
    assert!(free > 5.0 * anchored, "{free} vs {anchored}");
}

#[test]
fn proximal_inner_loops_descend_at_small_rate() {
    let ds = toy_dataset(&[3.0, 9.0], 1, 4);
    let mut cfg = toy_config(TaylorOrder::Two, 2);
    cfg.algorithm = Algorithm::Proximal;
    cfg.epochs = 3;
    cfg.inner_theta = 6;
    cfg.inner_xi = 6;
    cfg.inner_tol = 0.0;
    cfg.beta = 10.0;
    cfg.lr_theta = 1e-4;
    cfg.lr_xi = 1e-4;
    let r = train_proximal(&ds, &cfg).unwrap();
    assert_eq!(r.inner.len(), 6);
    for c in &r.inner {
        for w in c.losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "{} loop rose: {:?}", c.phase, c.losses);
        }
    }
}

#[test]
fn inner_loops_stop_on_small_relative_change() {
    let ds = toy_dataset(&[3.0, 9.0], 1, 4);
    let mut cfg = toy_config(TaylorOrder::One, 2);
    cfg.algorithm = Algorithm::Proximal;
    cfg.epochs = 1;
    cfg.inner_theta = 50;
    cfg.inner_xi = 50;
    cfg.inner_tol = 1.0;
    let r = train_proximal(&ds, &cfg).unwrap();
    assert!(r.inner.iter().all(|c| c.losses.len() == 2));
}

#[test]
fn validation_keeps_the_best_iterate() {
    let ds = toy_dataset(&[3.0, 9.0], 2, 5);
    let mut cfg = toy_config(TaylorOrder::One, 2);
    cfg.epochs = 10;
    cfg.validate_every = 2;
    cfg.lr_theta = 0.05; // aggressive enough to overshoot
    let r = train_ordinary(&ds, &cfg).unwrap();
    let best = r.best_val_mse.unwrap();
    let seen: Vec<f64> = r.epochs.iter().filter_map(|e| e.val_mse).collect();
    assert!(seen.iter().all(|v| best <= *v));
    let pred = forecast(&r.params, &r.contexts, &ds.test, &cfg.solver).unwrap();
    assert!((mse(&pred, &ds.test.x).unwrap() - best).abs() < 1e-12);
}

#[test]
fn forecast_matches_solo_integration() {
    let ds = toy_dataset(&[3.0, 9.0], 3, 6);
    let cfg = toy_config(TaylorOrder::Zero, 1);
    let (params, _) = initial_state(&ds, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ctx = random_contexts(2, 2, &mut rng);
    let pred = forecast(&params, &ctx, &ds.test, &cfg.solver).unwrap();
    let reference = reference_data_term(&params, &ctx, &ds.test, &cfg.solver);
    assert!((mse(&pred, &ds.test.x).unwrap() - reference).abs() < 1e-12);
    assert_eq!(pred.shape(), ds.test.x.shape());
}

#[test]
fn single_environment_baselines_coincide() {
    let ds = toy_dataset(&[6.0], 2, 5);
    let cfg = BaselineConfig {
        seed: 4,
        state_hidden: vec![8],
        state_out: 8,
        main_hidden: vec![8],
        activation: Activation::Swish,
        lr: 1e-3,
        epochs: 5,
        solver: IntegratorSpec::rk4(0.05),
        validate_every: 0,
    };
    let ofa = train_baseline(&ds, BaselineMode::Ofa, &cfg).unwrap();
    let ope = train_baseline(&ds, BaselineMode::Ope, &cfg).unwrap();
    assert_eq!(ofa.models, ope.models);
    assert_eq!(ofa.train_mse, ope.train_mse);
    assert!(ofa.curves[0].last() < ofa.curves[0].first());
}

#[test]
fn config_round_trips_through_toml() {
    let mut cfg = toy_config(TaylorOrder::Two, 3);
    cfg.lr_schedule = vec![LrDrop { epoch: 10, factor: 0.1 }];
    let text = cfg.to_toml().unwrap();
    assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
    assert_eq!(cfg.lr_factor(9), 1.0);
    assert!((cfg.lr_factor(10) - 0.1).abs() < 1e-15);
    let bad = text.replace("lr_theta = 0.001", "lr_theta = -1.0");
    assert!(matches!(TrainConfig::from_toml(&bad), Err(MetaError::Config(_))));
}

#[test]
fn contexts_round_trip_through_json() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = random_contexts(3, 2, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ctx.json");
    save_contexts(&c, &path).unwrap();
    assert_eq!(load_contexts(&path).unwrap(), c);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let ds = toy_dataset(&[3.0, 9.0], 1, 3);
    let cfg = toy_config(TaylorOrder::One, 2);
    let (params, _) = initial_state(&ds, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        total_loss(&params, &ContextSet::zeros(3, 2), &ds.train, &cfg, &mut rng),
        Err(MetaError::Shape(_))
    ));
    assert!(matches!(
        total_loss(&params, &ContextSet::zeros(2, 3), &ds.train, &cfg, &mut rng),
        Err(MetaError::Shape(_))
    ));
}
