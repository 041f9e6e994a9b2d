//! Few-shot adaptation, forecast metrics, candidate-based uncertainty and
//! linear identification of physical parameters from contexts.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Split;
use crate::diff::Dual;
use crate::metatrain::{
    self, candidate_forecasts, forecast, loss_grad, per_env_context_grad, Adam, Algorithm, ContextSet,
    MetaError, ModelConfig, PoolStrategy, Prox, TrainConfig, Wrt,
};
use crate::models::{TaylorOrder, ThreeNetParams};
use crate::odeint::IntegratorSpec;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Absolute values at or below this are dropped from percentage errors.
pub const MAPE_FLOOR: f64 = 1e-3;
/// A zero-width interval covers a point only within this distance.
pub const DEGENERATE_COVERAGE_TOL: f64 = 1e-12;
/// Ridge added to the normal equations when they are rank deficient.
pub const RIDGE_JITTER: f64 = 1e-10;

// ---------------------------------------------------------------------------
// adaptation

fn default_adapt_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub lr: f64,
    pub iterations: usize,
    /// Stop once the relative loss change drops below this.
    #[serde(default = "default_adapt_tol")]
    pub tol: f64,
    #[serde(default)]
    pub lambda1: f64,
    #[serde(default)]
    pub lambda2: f64,
    pub solver: IntegratorSpec,
}

impl AdaptConfig {
    fn loss_config(&self, params: &ThreeNetParams) -> TrainConfig {
        TrainConfig {
            seed: 0,
            algorithm: Algorithm::Ordinary,
            taylor_order: TaylorOrder::Zero,
            pool: PoolStrategy::own(),
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lr_theta: self.lr,
            lr_xi: self.lr,
            lr_schedule: vec![],
            beta: 0.0,
            epochs: 0,
            inner_theta: 1,
            inner_xi: 1,
            inner_tol: self.tol,
            solver: self.solver,
            model: {
                let c = params.config();
                ModelConfig {
                    d_xi: c.d_xi,
                    state_hidden: c.state_hidden,
                    state_out: c.state_out,
                    context_hidden: c.context_hidden,
                    context_out: c.context_out,
                    main_hidden: c.main_hidden,
                    activation: c.activation,
                }
            },
            validate_every: 0,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(EvalError::Invalid("adaptation learning rate must be positive".into()));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.tol >= 0.0) {
            return Err(EvalError::Invalid("penalties and tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptReport {
    pub contexts: ContextSet,
    /// Loss per iteration, one series per environment.
    pub curves: Vec<Vec<f64>>,
    /// Per-environment failure message, if any.
    pub failures: Vec<Option<String>>,
    pub wall_seconds: f64,
}

impl AdaptReport {
    /// Long-format curve CSV: `env,iteration,loss`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["env", "iteration", "loss"])?;
        for (e, c) in self.curves.iter().enumerate() {
            for (it, l) in c.iter().enumerate() {
                w.write_record([e.to_string(), it.to_string(), l.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn final_losses(&self) -> Vec<Option<f64>> {
        self.curves.iter().map(|c| c.last().copied()).collect()
    }
}

fn rel_change(prev: f64, cur: f64) -> f64 {
    (cur - prev).abs() / prev.abs().max(f64::MIN_POSITIVE)
}

fn adapt_one(params: &ThreeNetParams, split: &Split, cfg: &AdaptConfig) -> (Tensor, Vec<f64>, Option<String>) {
    let loss_cfg = cfg.loss_config(params);
    let mut ctx = ContextSet::zeros(1, params.d_xi);
    let mut adam = Adam::new(&[&ctx.xi]);
    let mut curve: Vec<f64> = Vec::new();
    for _ in 0..cfg.iterations {
        let g = match loss_grad(params, &ctx, split, &[vec![0]], &loss_cfg, &Prox::None, Wrt::Contexts) {
            Ok(g) => g,
            Err(e) => return (ctx.xi, curve, Some(e.to_string())),
        };
        let Some(grad) = g.contexts.filter(|_| g.terms.is_finite()) else {
            return (ctx.xi, curve, Some("non-finite adaptation loss".into()));
        };
        let stop = curve.last().is_some_and(|&prev| rel_change(prev, g.terms.total) < cfg.tol);
        curve.push(g.terms.total);
        if stop {
            break;
        }
        let mut xi = [ctx.xi];
        adam.step(&mut xi, &[grad], cfg.lr);
        let [xi] = xi;
        ctx.xi = xi;
    }
    (ctx.xi, curve, None)
}

fn check_split(params: &ThreeNetParams, split: &Split) -> Result<()> {
    if split.state_size() != params.d {
        return Err(EvalError::Invalid(format!(
            "split state size {} but model expects {}",
            split.state_size(),
            params.d
        )));
    }
    if split.n_envs() == 0 || split.n_trajs() == 0 {
        return Err(EvalError::Invalid("split has no trajectories".into()));
    }
    Ok(())
}

/// Fit one context per environment independently, weights frozen.
pub fn adapt_sequential(params: &ThreeNetParams, split: &Split, cfg: &AdaptConfig) -> Result<AdaptReport> {
    cfg.check()?;
    check_split(params, split)?;
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut failures = Vec::new();
    for e in 0..split.n_envs() {
        let (xi, curve, failure) = adapt_one(params, &split.select_envs(&[e]), cfg);
        if let Some(msg) = &failure {
            log::warn!("adaptation of environment {e} failed: {msg}");
        }
        rows.push(xi.into_data());
        curves.push(curve);
        failures.push(failure.map(|m| format!("environment {e}: {m}")));
    }
    Ok(AdaptReport {
        contexts: ContextSet::from_rows(rows).map_err(EvalError::Invalid)?,
        curves,
        failures,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Fit all contexts jointly on the sum of per-environment losses.
///
/// Stops when the summed loss changes by less than `tol` (relative).
pub fn adapt_bulk(params: &ThreeNetParams, split: &Split, cfg: &AdaptConfig) -> Result<AdaptReport> {
    cfg.check()?;
    check_split(params, split)?;
    let start = Instant::now();
    let m = split.n_envs();
    let loss_cfg = cfg.loss_config(params);
    let mut ctx = ContextSet::zeros(m, params.d_xi);
    let mut adam = Adam::new(&[&ctx.xi]);
    let mut curves = vec![Vec::new(); m];
    let mut failure = None;
    let mut prev_sum: Option<f64> = None;
    for _ in 0..cfg.iterations {
        let (terms, grad) = match per_env_context_grad(params, &ctx, split, &loss_cfg) {
            Ok(v) => v,
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        };
        let Some(grad) = grad else {
            failure = Some("non-finite adaptation loss".into());
            break;
        };
        let sum: f64 = terms.iter().map(|t| t.total).sum();
        for (c, t) in curves.iter_mut().zip(&terms) {
            c.push(t.total);
        }
        if prev_sum.is_some_and(|p| rel_change(p, sum) < cfg.tol) {
            break;
        }
        prev_sum = Some(sum);
        let mut xi = [ctx.xi];
        adam.step(&mut xi, &[grad], cfg.lr);
        let [xi] = xi;
        ctx.xi = xi;
    }
    Ok(AdaptReport {
        contexts: ctx,
        curves,
        failures: vec![failure; m],
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// metrics

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvMetrics {
    pub mse: f64,
    /// Percent; `None` when every denominator was filtered.
    pub mape: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_env: Vec<EnvMetrics>,
    pub mse: f64,
    pub mape: Option<f64>,
}

fn mape_of(pred: &[f64], truth: &[f64]) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, x) in pred.iter().zip(truth) {
        if x.abs() > MAPE_FLOOR {
            sum += ((x - p) / x).abs();
            count += 1;
        }
    }
    (count > 0).then(|| 100.0 * sum / count as f64)
}

fn mse_of(pred: &[f64], truth: &[f64]) -> f64 {
    let s: f64 = pred.iter().zip(truth).map(|(p, x)| (p - x) * (p - x)).sum();
    s / truth.len().max(1) as f64
}

/// Metrics of `[E, ...]` forecasts against the truth.
pub fn metrics_of(pred: &Tensor, truth: &Tensor) -> Result<Metrics> {
    if pred.shape() != truth.shape() || pred.ndim() < 2 {
        return Err(EvalError::Invalid(format!(
            "forecast shape {:?} does not match truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let e = pred.shape()[0];
    let per = pred.len() / e.max(1);
    let per_env = (0..e)
        .map(|k| {
            let (p, x) = (&pred.data()[k * per..(k + 1) * per], &truth.data()[k * per..(k + 1) * per]);
            EnvMetrics {
                mse: mse_of(p, x),
                mape: mape_of(p, x),
            }
        })
        .collect();
    Ok(Metrics {
        per_env,
        mse: mse_of(pred.data(), truth.data()),
        mape: mape_of(pred.data(), truth.data()),
    })
}

/// Forecast with `f(·, ξ^e)` (no expansion) and score every environment.
pub fn metrics(params: &ThreeNetParams, contexts: &ContextSet, split: &Split, solver: &IntegratorSpec) -> Result<Metrics> {
    let pred = forecast(params, contexts, split, solver)?;
    metrics_of(&pred, &split.x)
}

pub fn write_metrics_csv(m: &Metrics, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["env", "mse", "mape"])?;
    for (e, r) in m.per_env.iter().enumerate() {
        w.write_record([e.to_string(), r.mse.to_string(), r.mape.map(|v| v.to_string()).unwrap_or_default()])?;
    }
    w.write_record(["all".to_string(), m.mse.to_string(), m.mape.map(|v| v.to_string()).unwrap_or_default()])?;
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// uncertainty

#[derive(Debug, Clone, PartialEq)]
pub struct UqSummary {
    /// Candidate mean, `[E, S, N, d]`.
    pub mu: Tensor,
    /// Candidate standard deviation (divisor p), `[E, S, N, d]`.
    pub sigma: Tensor,
    /// Percentages.
    pub rel_mse: Option<f64>,
    pub mape: Option<f64>,
    pub cl: f64,
    pub candidates: usize,
}

/// Statistics over a candidate axis: `cands` is `[E, P, S, N, d]`.
pub fn uq_from_candidates(cands: &Tensor, truth: &Tensor) -> Result<UqSummary> {
    let sh = cands.shape();
    if sh.len() != 5 || truth.shape() != [sh[0], sh[2], sh[3], sh[4]] {
        return Err(EvalError::Invalid(format!(
            "candidates {sh:?} do not match truth {:?}",
            truth.shape()
        )));
    }
    let (e_n, p, s, n, d) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
    if p < 2 {
        return Err(EvalError::Invalid(format!("uncertainty needs at least 2 candidates, got {p}")));
    }
    let inner = s * n * d;
    let mut mu = vec![0.0; truth.len()];
    let mut sigma = vec![0.0; truth.len()];
    for e in 0..e_n {
        for c in 0..inner {
            let at = |j: usize| cands.data()[(e * p + j) * inner + c];
            // shifted by the first candidate so equal candidates give exactly zero spread
            let a0 = at(0);
            let shift = (0..p).map(|j| at(j) - a0).sum::<f64>() / p as f64;
            let var = (0..p).map(|j| (at(j) - a0 - shift).powi(2)).sum::<f64>() / p as f64;
            mu[e * inner + c] = a0 + shift;
            sigma[e * inner + c] = var.sqrt();
        }
    }
    let x = truth.data();
    // relative MSE over state vectors
    let mut rel = 0.0;
    let mut kept = 0usize;
    for point in 0..truth.len() / d {
        let r = point * d..(point + 1) * d;
        let norm2: f64 = x[r.clone()].iter().map(|v| v * v).sum();
        if norm2.sqrt() > MAPE_FLOOR {
            let err2: f64 = x[r.clone()].iter().zip(&mu[r]).map(|(a, b)| (a - b) * (a - b)).sum();
            rel += err2 / norm2;
            kept += 1;
        }
    }
    let rel_mse = (kept > 0).then(|| 100.0 * rel / (kept * d) as f64);
    let covered = x
        .iter()
        .zip(mu.iter().zip(&sigma))
        .filter(|(xv, (m, sd))| {
            if **sd == 0.0 {
                (*xv - *m).abs() <= DEGENERATE_COVERAGE_TOL
            } else {
                (*xv - *m).abs() <= 3.0 * *sd
            }
        })
        .count();
    Ok(UqSummary {
        mape: mape_of(&mu, x),
        mu: Tensor::new(truth.shape().to_vec(), mu).expect("truth shape"),
        sigma: Tensor::new(truth.shape().to_vec(), sigma).expect("truth shape"),
        rel_mse,
        cl: 100.0 * covered as f64 / x.len().max(1) as f64,
        candidates: p,
    })
}

/// Candidates `x̂^{e,j}` expanded around every row of `expansion`, with
/// `targets` supplying ξ^e for each environment of `split`.
pub fn uq_metrics(
    params: &ThreeNetParams,
    targets: &ContextSet,
    expansion: &ContextSet,
    split: &Split,
    k: TaylorOrder,
    solver: &IntegratorSpec,
) -> Result<UqSummary> {
    check_split(params, split)?;
    if targets.m() != split.n_envs() {
        return Err(EvalError::Invalid(format!(
            "{} target contexts for {} environments",
            targets.m(),
            split.n_envs()
        )));
    }
    if expansion.m() < 2 {
        return Err(EvalError::Invalid("uncertainty needs at least 2 expansion contexts".into()));
    }
    let m = targets.m();
    let all = Tensor::concat(&[&targets.xi, &expansion.xi], 0).map_err(MetaError::from)?;
    let pools: Vec<Vec<usize>> = (0..m).map(|_| (m..m + expansion.m()).collect()).collect();
    let rows: Vec<usize> = (0..m).collect();
    let cands = candidate_forecasts(params, &all, &rows, &pools, split, k, solver)?;
    uq_from_candidates(&cands, &split.x)
}

/// One row per `(env, traj, step, component)` with truth, mean and std.
pub fn write_uq_csv(uq: &UqSummary, truth: &Tensor, path: &Path) -> Result<()> {
    let sh = truth.shape();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["env", "traj", "step", "component", "truth", "mean", "std"])?;
    let mut idx = 0;
    for e in 0..sh[0] {
        for i in 0..sh[1] {
            for k in 0..sh[2] {
                for c in 0..sh[3] {
                    w.write_record([
                        e.to_string(),
                        i.to_string(),
                        k.to_string(),
                        c.to_string(),
                        truth.data()[idx].to_string(),
                        uq.mu.data()[idx].to_string(),
                        uq.sigma.data()[idx].to_string(),
                    ])?;
                    idx += 1;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// identification

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    /// `[d_c][d_ξ]`
    pub q_matrix: Vec<Vec<f64>>,
    pub q_offset: Vec<f64>,
    /// Per-environment residual `Qξ + q − c`.
    pub residuals: Vec<Vec<f64>>,
    pub train_mse: f64,
    pub ridge: bool,
    pub heldout_predictions: Option<Vec<Vec<f64>>>,
    pub heldout_mse: Option<f64>,
}

impl LinearFit {
    pub fn predict(&self, xi: &[f64]) -> Vec<f64> {
        self.q_matrix
            .iter()
            .zip(&self.q_offset)
            .map(|(row, q)| row.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() + q)
            .collect()
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(EvalError::Invalid(format!("{what} must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Least-squares affine map `c ≈ Qξ + q` from contexts to parameters.
pub fn identify_linear(
    contexts: &[Vec<f64>],
    params: &[Vec<f64>],
    heldout: Option<(&[Vec<f64>], &[Vec<f64>])>,
) -> Result<LinearFit> {
    if contexts.len() != params.len() {
        return Err(EvalError::Invalid(format!(
            "{} contexts but {} parameter vectors",
            contexts.len(),
            params.len()
        )));
    }
    if contexts.len() < 2 {
        return Err(EvalError::Invalid("identification needs at least 2 environments".into()));
    }
    let xi = matrix(contexts, "contexts")?;
    let c = matrix(params, "parameters")?;
    let (m, dx) = (xi.nrows(), xi.ncols());
    let dc = c.ncols();
    let a = DMatrix::from_fn(m, dx + 1, |i, j| if j < dx { xi[(i, j)] } else { 1.0 });
    let ata = a.transpose() * &a;
    let atc = a.transpose() * &c;
    let rank = ata.clone().svd(false, false).rank(1e-12 * ata.norm().max(1.0));
    let ridge = rank < dx + 1;
    let mut lhs = ata;
    if ridge {
        for i in 0..dx + 1 {
            lhs[(i, i)] += RIDGE_JITTER;
        }
    }
    let w = match lhs.clone().cholesky() {
        Some(ch) => ch.solve(&atc),
        None => lhs
            .lu()
            .solve(&atc)
            .ok_or_else(|| EvalError::Invalid("normal equations are singular".into()))?,
    };
    let q_matrix: Vec<Vec<f64>> = (0..dc).map(|k| (0..dx).map(|j| w[(j, k)]).collect()).collect();
    let q_offset: Vec<f64> = (0..dc).map(|k| w[(dx, k)]).collect();
    let mut fit = LinearFit {
        q_matrix,
        q_offset,
        residuals: vec![],
        train_mse: 0.0,
        ridge,
        heldout_predictions: None,
        heldout_mse: None,
    };
    let residuals: Vec<Vec<f64>> = contexts
        .iter()
        .zip(params)
        .map(|(x, cv)| fit.predict(x).iter().zip(cv).map(|(p, t)| p - t).collect())
        .collect();
    fit.train_mse = residuals.iter().flatten().map(|r| r * r).sum::<f64>() / (m * dc) as f64;
    fit.residuals = residuals;
    if let Some((hx, hc)) = heldout {
        if hx.len() != hc.len() || hx.iter().any(|r| r.len() != dx) || hc.iter().any(|r| r.len() != dc) {
            return Err(EvalError::Invalid("held-out contexts and parameters do not match the fit".into()));
        }
        let preds: Vec<Vec<f64>> = hx.iter().map(|x| fit.predict(x)).collect();
        let err: f64 = preds
            .iter()
            .zip(hc)
            .flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)))
            .sum();
        fit.heldout_mse = Some(err / (hx.len().max(1) * dc) as f64);
        fit.heldout_predictions = Some(preds);
    }
    Ok(fit)
}

// ---------------------------------------------------------------------------
// affine probe

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Largest `‖vᵀ ∇²_ξ f(x, ξ) v‖` over sampled points and unit directions.
    pub max_curvature: f64,
    /// Largest absolute residual of the best affine fit of `f(x, ·)` in ξ.
    pub affine_residual: f64,
    /// Radius of the sampled context region.
    pub radius: f64,
    /// `2·affine_residual / radius²`: curvature implied by the residual scale.
    pub residual_curvature: f64,
}

fn sample_region(contexts: &ContextSet, radius: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let m = contexts.m();
    let mut w: Vec<f64> = (0..m).map(|_| -rng.random::<f64>().ln()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    (0..contexts.d_xi())
        .map(|c| (0..m).map(|e| w[e] * contexts.row(e)[c]).sum::<f64>() + rng.random_range(-radius..=radius))
        .collect()
}

/// Second-order directional derivatives of `f(x, ·)` over the contexts' hull.
///
/// `states` is `[B, d]`; `samples` context points are drawn as random convex
/// combinations of the contexts plus `U(−radius, radius)` jitter.
pub fn affine_probe(
    params: &ThreeNetParams,
    contexts: &ContextSet,
    states: &Tensor,
    radius: f64,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ProbeResult> {
    if states.ndim() != 2 || states.shape()[1] != params.d || contexts.d_xi() != params.d_xi {
        return Err(EvalError::Invalid("probe states or contexts have the wrong shape".into()));
    }
    let b = states.shape()[0];
    let dx = params.d_xi;
    let theta: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let view2 = params.view(
        theta
            .iter()
            .map(|t| Dual::constant(Dual::constant(t.clone())))
            .collect::<Vec<Dual<Dual<Tensor>>>>(),
    );
    let plain = params.tensor_view();
    let tile = |xi: &[f64]| Tensor::new(vec![b, dx], xi.iter().copied().cycle().take(b * dx).collect()).expect("tiled");
    let mut max_curv: f64 = 0.0;
    let mut points = Vec::new();
    let mut values = Vec::new();
    for _ in 0..samples {
        let xi = sample_region(contexts, radius, rng);
        let mut v: Vec<f64> = (0..dx).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
        v.iter_mut().for_each(|a| *a /= norm);
        let (xt, vt) = (tile(&xi), tile(&v));
        let input = Dual::new(Dual::new(xt.clone(), vt.clone()), Dual::new(vt, Tensor::zeros(&[b, dx])));
        let x2 = Dual::constant(Dual::constant(states.clone()));
        let out = view2.vf(&x2, &input).map_err(MetaError::from)?;
        let second = out.tangent.map(|t| t.tangent_or_zeros()).unwrap_or_else(|| Tensor::zeros(&[b, params.d]));
        for r in 0..b {
            let n = second.row(r).iter().map(|a| a * a).sum::<f64>().sqrt();
            max_curv = max_curv.max(n);
        }
        values.push(plain.vf(states, &xt).map_err(MetaError::from)?);
        points.push(xi);
    }
    // best affine fit in ξ, separately for every (state, component)
    let affine_residual = if samples > dx + 1 {
        let a = DMatrix::from_fn(samples, dx + 1, |i, j| if j < dx { points[i][j] } else { 1.0 });
        let svd = a.clone().svd(true, true);
        let mut worst: f64 = 0.0;
        for r in 0..b {
            for c in 0..params.d {
                let y = DVector::from_fn(samples, |i, _| values[i].row(r)[c]);
                let w = svd.solve(&y, 1e-12).map_err(|e| EvalError::Invalid(e.to_string()))?;
                let res = &a * w - y;
                worst = worst.max(res.amax());
            }
        }
        worst
    } else {
        0.0
    };
    let extent = radius.max(hull_radius(contexts));
    Ok(ProbeResult {
        max_curvature: max_curv,
        affine_residual,
        radius: extent,
        residual_curvature: if extent > 0.0 { 2.0 * affine_residual / (extent * extent) } else { 0.0 },
    })
}

/// Half the largest pairwise distance between contexts.
fn hull_radius(c: &ContextSet) -> f64 {
    let mut r: f64 = 0.0;
    for a in 0..c.m() {
        for b in a + 1..c.m() {
            let d2: f64 = c.row(a).iter().zip(c.row(b)).map(|(x, y)| (x - y) * (x - y)).sum();
            r = r.max(d2.sqrt() / 2.0);
        }
    }
    r
}

/// Re-export for callers that only need forecasts.
pub use metatrain::mse;

#[cfg(test)]
mod tests;
