//! Meta-training: context pools, the pooled Taylor loss, Adam, ordinary and
//! proximal alternating minimization, and the OFA/OPE context-free baselines.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Split, TrajectoryDataset};
use crate::diff::{DiffError, Operand, Tape, Var};
use crate::models::{
    init_three_net, Activation, ContextFreeParams, ModelError, ThreeNetConfig, ThreeNetParams,
    ThreeNetView, TaylorOrder,
};
use crate::odeint::{integrate, stack, IntegratorSpec, OdeError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("pool size {p} exceeds the number of environments {m}")]
    PoolTooLarge { p: usize, m: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("integration failed for environment {env}, trajectory {traj}, pool member {member}: {source}")]
    Integration {
        env: usize,
        traj: usize,
        member: usize,
        source: OdeError,
    },
    #[error("integration failed: {0}")]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, MetaError>;

// ---------------------------------------------------------------------------
// contexts and pools

/// One context vector per environment, stored as an `[m, d_ξ]` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct ContextSet {
    pub xi: Tensor,
}

impl ContextSet {
    pub fn zeros(m: usize, d_xi: usize) -> Self {
        Self {
            xi: Tensor::zeros(&[m, d_xi]),
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> std::result::Result<Self, String> {
        let m = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if m == 0 || d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err("contexts must be a non-empty rectangular matrix".into());
        }
        let xi = Tensor::new(vec![m, d], rows.into_iter().flatten().collect()).map_err(|e| e.to_string())?;
        if !xi.is_finite() {
            return Err("contexts must be finite".into());
        }
        Ok(Self { xi })
    }

    pub fn m(&self) -> usize {
        self.xi.shape()[0]
    }

    pub fn d_xi(&self) -> usize {
        self.xi.shape()[1]
    }

    pub fn row(&self, e: usize) -> &[f64] {
        self.xi.row(e)
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.m()).map(|e| self.row(e).to_vec()).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for ContextSet {
    type Error = String;
    fn try_from(rows: Vec<Vec<f64>>) -> std::result::Result<Self, String> {
        Self::from_rows(rows)
    }
}

impl From<ContextSet> for Vec<Vec<f64>> {
    fn from(c: ContextSet) -> Self {
        c.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    RandomAll,
    NearestFirst,
    SmallestFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolStrategy {
    pub kind: PoolKind,
    pub size: usize,
}

impl PoolStrategy {
    /// Pool `{e}` alone: no cross-environment flow.
    pub fn own() -> Self {
        Self {
            kind: PoolKind::NearestFirst,
            size: 1,
        }
    }
}

/// Indices of the `p` contexts used to expand around for environment `e`.
pub fn build_pool(
    strategy: PoolStrategy,
    e: usize,
    contexts: &ContextSet,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let m = contexts.m();
    let p = strategy.size;
    if p == 0 {
        return Err(MetaError::Config("pool size must be at least 1".into()));
    }
    if p > m {
        return Err(MetaError::PoolTooLarge { p, m });
    }
    if e >= m {
        return Err(MetaError::Shape(format!("environment {e} out of range for {m} contexts")));
    }
    let mut pool = match strategy.kind {
        PoolKind::RandomAll => rand::seq::index::sample(rng, m, p).into_vec(),
        PoolKind::NearestFirst => {
            let target = contexts.row(e);
            let dist = |j: usize| -> f64 {
                contexts
                    .row(j)
                    .iter()
                    .zip(target)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            };
            let mut idx: Vec<usize> = (0..m).collect();
            idx.sort_by(|&a, &b| {
                dist(a)
                    .total_cmp(&dist(b))
                    .then((a != e).cmp(&(b != e)))
                    .then(a.cmp(&b))
            });
            idx.truncate(p);
            idx
        }
        PoolKind::SmallestFirst => {
            let norm = |j: usize| -> f64 { contexts.row(j).iter().map(|v| v.abs()).sum() };
            let mut idx: Vec<usize> = (0..m).collect();
            idx.sort_by(|&a, &b| norm(a).total_cmp(&norm(b)).then(a.cmp(&b)));
            idx.truncate(p);
            idx
        }
    };
    if strategy.kind == PoolKind::RandomAll {
        pool.sort_unstable();
    }
    Ok(pool)
}

/// Pools for every environment, in environment order.
pub fn build_pools(strategy: PoolStrategy, contexts: &ContextSet, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    (0..contexts.m()).map(|e| build_pool(strategy, e, contexts, rng)).collect()
}

// ---------------------------------------------------------------------------
// configuration

/// Architecture of the three networks; the state size comes from the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_xi: usize,
    pub state_hidden: Vec<usize>,
    pub state_out: usize,
    pub context_hidden: Vec<usize>,
    pub context_out: usize,
    pub main_hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelConfig {
    pub fn compact(d_xi: usize, width: usize) -> Self {
        let c = ThreeNetConfig::compact(1, d_xi, width);
        Self {
            d_xi,
            state_hidden: c.state_hidden,
            state_out: c.state_out,
            context_hidden: c.context_hidden,
            context_out: c.context_out,
            main_hidden: c.main_hidden,
            activation: c.activation,
        }
    }

    pub fn three_net(&self, d: usize) -> ThreeNetConfig {
        ThreeNetConfig {
            d,
            d_xi: self.d_xi,
            state_hidden: self.state_hidden.clone(),
            state_out: self.state_out,
            context_hidden: self.context_hidden.clone(),
            context_out: self.context_out,
            main_hidden: self.main_hidden.clone(),
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Alternating single Adam steps on θ then ξ (NCF-t1).
    Ordinary,
    /// Proximal alternating minimization (NCF-t2).
    Proximal,
}

/// Multiply the learning rates by `factor` from `epoch` onwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrDrop {
    pub epoch: usize,
    pub factor: f64,
}

fn default_inner() -> usize {
    1
}
fn default_inner_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    pub algorithm: Algorithm,
    pub taylor_order: TaylorOrder,
    pub pool: PoolStrategy,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr_theta: f64,
    pub lr_xi: f64,
    #[serde(default)]
    pub lr_schedule: Vec<LrDrop>,
    /// Proximal coefficient; ignored by the ordinary algorithm.
    #[serde(default)]
    pub beta: f64,
    /// Epochs (ordinary) or outer iterations (proximal).
    pub epochs: usize,
    #[serde(default = "default_inner")]
    pub inner_theta: usize,
    #[serde(default = "default_inner")]
    pub inner_xi: usize,
    #[serde(default = "default_inner_tol")]
    pub inner_tol: f64,
    pub solver: IntegratorSpec,
    pub model: ModelConfig,
    /// Evaluate the test split every this many epochs and keep the best
    /// iterate; 0 keeps the last iterate.
    #[serde(default)]
    pub validate_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(MetaError::Config(msg.to_string()));
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be non-negative");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be non-negative");
        }
        if !(self.lr_theta > 0.0 && self.lr_xi > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.pool.size == 0 {
            return bad("pool size must be at least 1");
        }
        if self.model.d_xi == 0 {
            return bad("context size must be positive");
        }
        if self.inner_tol < 0.0 {
            return bad("inner_tol must be non-negative");
        }
        if self.lr_schedule.iter().any(|d| !(d.factor > 0.0)) {
            return bad("learning-rate drop factors must be positive");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| MetaError::Serde(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MetaError::Serde(e.to_string()))
    }

    fn lr_factor(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|d| d.epoch <= epoch)
            .map(|d| d.factor)
            .product()
    }
}

// ---------------------------------------------------------------------------
// losses

/// Value of each term of the pooled loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub data: f64,
    pub l1: f64,
    pub l2: f64,
    pub prox: f64,
}

impl LossTerms {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Single-candidate loss on `[N, d]` trajectories.
pub fn inner_loss(
    params: &ThreeNetParams,
    xi_e: &[f64],
    predicted: &Tensor,
    truth: &Tensor,
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    if predicted.shape() != truth.shape() || predicted.ndim() != 2 {
        return Err(MetaError::Shape(format!(
            "predicted {:?} vs true {:?}, expected matching [N, d]",
            predicted.shape(),
            truth.shape()
        )));
    }
    if xi_e.len() != params.d_xi {
        return Err(MetaError::Shape(format!("context has {} entries, expected {}", xi_e.len(), params.d_xi)));
    }
    let data = predicted.sub(truth)?.square().mean();
    let l1: f64 = xi_e.iter().map(|v| v.abs()).sum::<f64>() * lambda1 / params.d_xi as f64;
    let theta_sq: f64 = params.tensors().iter().map(|t| t.data().iter().map(|v| v * v).sum::<f64>()).sum();
    Ok(data + l1 + lambda2 * theta_sq / params.num_params() as f64)
}

/// Flattened candidate batch: one row per (environment, pool member, trajectory).
struct Batch {
    e_idx: Vec<usize>,
    j_idx: Vec<usize>,
    rows: Vec<usize>,
    coords: Vec<(usize, usize, usize)>,
    x0: Tensor,
    target: Tensor,
}

fn make_batch(split: &Split, pools: &[Vec<usize>]) -> Result<Batch> {
    let (m, s, n, d) = (split.n_envs(), split.n_trajs(), split.n_steps(), split.state_size());
    if pools.len() != m {
        return Err(MetaError::Shape(format!("{} pools for {m} environments", pools.len())));
    }
    let mut b = Batch {
        e_idx: Vec::new(),
        j_idx: Vec::new(),
        rows: Vec::new(),
        coords: Vec::new(),
        x0: Tensor::zeros(&[0]),
        target: Tensor::zeros(&[0]),
    };
    let mut x0 = Vec::new();
    for (e, pool) in pools.iter().enumerate() {
        for &j in pool {
            let pair = b.e_idx.len();
            b.e_idx.push(e);
            b.j_idx.push(j);
            for i in 0..s {
                b.rows.push(pair);
                b.coords.push((e, i, j));
                x0.extend_from_slice(split.state(e, i, 0));
            }
        }
    }
    let r = b.rows.len();
    let mut target = vec![0.0; n * r * d];
    for (row, &(e, i, _)) in b.coords.iter().enumerate() {
        for k in 0..n {
            target[(k * r + row) * d..(k * r + row + 1) * d].copy_from_slice(split.state(e, i, k));
        }
    }
    b.x0 = Tensor::new(vec![r, d], x0)?;
    b.target = Tensor::new(vec![n, r, d], target)?;
    Ok(b)
}

/// Proximal anchor for one half of an alternating step.
pub(crate) enum Prox<'a> {
    None,
    Theta(&'a [Tensor], f64),
    Contexts(&'a Tensor, f64),
}

struct Terms<T> {
    total: T,
    values: LossTerms,
}

fn scalar(t: &impl Operand) -> f64 {
    t.value().item().unwrap_or(f64::NAN)
}

fn predict<T: Operand>(
    view: &ThreeNetView<T>,
    ctx: &T,
    batch: &Batch,
    t: &[f64],
    k: TaylorOrder,
    solver: &IntegratorSpec,
) -> std::result::Result<T, OdeError> {
    let xe = ctx.gather_rows(&batch.e_idx)?;
    let xj = ctx.gather_rows(&batch.j_idx)?;
    let field = view.taylor_field(k, &xe, &xj, Some(&batch.rows))?;
    let f = |x: &T| field.eval(x);
    let traj = integrate(&f, &ctx.lift(batch.x0.clone()), t, solver)?;
    Ok(stack(&traj)?)
}

#[allow(clippy::too_many_arguments)]
fn loss_terms<T: Operand>(
    params: &ThreeNetParams,
    theta: &[T],
    ctx: &T,
    batch: &Batch,
    t: &[f64],
    cfg: &TrainConfig,
    prox: &Prox<'_>,
) -> Result<Terms<T>> {
    let view = params.view(theta.to_vec());
    let pred = predict(&view, ctx, batch, t, cfg.taylor_order, &cfg.solver)
        .map_err(|e| locate_failure(params, ctx, batch, t, cfg, e))?;
    let data = pred.sub(&ctx.lift(batch.target.clone()))?.square().mean();
    let m = ctx.shape()[0] as f64;
    let d_xi = ctx.shape()[1] as f64;
    let l1 = ctx.abs().sum().scale(cfg.lambda1 / (d_xi * m));
    let mut theta_sq = theta[0].square().sum();
    for w in &theta[1..] {
        theta_sq = theta_sq.add(&w.square().sum())?;
    }
    let l2 = theta_sq.scale(cfg.lambda2 / params.num_params() as f64);
    let prox_term = match prox {
        Prox::None => None,
        Prox::Theta(anchor, beta) => {
            let mut acc = theta[0].sub(&theta[0].lift(anchor[0].clone()))?.square().sum();
            for (w, a) in theta.iter().zip(anchor.iter()).skip(1) {
                acc = acc.add(&w.sub(&w.lift(a.clone()))?.square().sum())?;
            }
            Some(acc.scale(beta / 2.0))
        }
        Prox::Contexts(anchor, beta) => Some(
            ctx.sub(&ctx.lift((*anchor).clone()))?
                .square()
                .sum()
                .scale(beta / 2.0),
        ),
    };
    let mut total = data.add(&l1)?.add(&l2)?;
    let mut values = LossTerms {
        total: 0.0,
        data: scalar(&data),
        l1: scalar(&l1),
        l2: scalar(&l2),
        prox: 0.0,
    };
    if let Some(p) = prox_term {
        values.prox = scalar(&p);
        total = total.add(&p)?;
    }
    values.total = scalar(&total);
    Ok(Terms { total, values })
}

/// Re-run the failing batch one row at a time to name the offending candidate.
fn locate_failure<T: Operand>(
    params: &ThreeNetParams,
    ctx: &T,
    batch: &Batch,
    t: &[f64],
    cfg: &TrainConfig,
    err: OdeError,
) -> MetaError {
    let ctx = ctx.value();
    let view = params.tensor_view();
    for (row, &(e, i, j)) in batch.coords.iter().enumerate() {
        let single = Batch {
            e_idx: vec![e],
            j_idx: vec![j],
            rows: vec![0],
            coords: vec![(e, i, j)],
            x0: batch.x0.slice(0, row, row + 1).expect("row in range"),
            target: Tensor::zeros(&[0]),
        };
        if let Err(source) = predict(&view, &ctx, &single, t, cfg.taylor_order, &cfg.solver) {
            return MetaError::Integration {
                env: e,
                traj: i,
                member: j,
                source,
            };
        }
    }
    MetaError::Ode(err)
}

/// Pooled loss with explicit pools (no randomness).
pub fn total_loss_with_pools(
    params: &ThreeNetParams,
    contexts: &ContextSet,
    split: &Split,
    pools: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<LossTerms> {
    check_inputs(params, contexts, split)?;
    let batch = make_batch(split, pools)?;
    let theta: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    Ok(loss_terms(params, &theta, &contexts.xi, &batch, &split.t, cfg, &Prox::None)?.values)
}

/// Pooled loss, rebuilding pools from `rng`.
pub fn total_loss(
    params: &ThreeNetParams,
    contexts: &ContextSet,
    split: &Split,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossTerms> {
    let pools = build_pools(cfg.pool, contexts, rng)?;
    total_loss_with_pools(params, contexts, split, &pools, cfg)
}

fn check_inputs(params: &ThreeNetParams, contexts: &ContextSet, split: &Split) -> Result<()> {
    if split.state_size() != params.d {
        return Err(MetaError::Shape(format!(
            "data state size {} but model expects {}",
            split.state_size(),
            params.d
        )));
    }
    if contexts.d_xi() != params.d_xi {
        return Err(MetaError::Shape(format!(
            "contexts have {} columns but model expects {}",
            contexts.d_xi(),
            params.d_xi
        )));
    }
    if contexts.m() != split.n_envs() {
        return Err(MetaError::Shape(format!(
            "{} contexts for {} environments",
            contexts.m(),
            split.n_envs()
        )));
    }
    Ok(())
}

/// Which leaves receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    Theta,
    Contexts,
    Both,
}

/// Gradients of the pooled loss; `None` for the frozen group.
pub struct LossGrad {
    pub terms: LossTerms,
    pub theta: Option<Vec<Tensor>>,
    pub contexts: Option<Tensor>,
}

pub(crate) fn loss_grad(
    params: &ThreeNetParams,
    contexts: &ContextSet,
    split: &Split,
    pools: &[Vec<usize>],
    cfg: &TrainConfig,
    prox: &Prox<'_>,
    wrt: Wrt,
) -> Result<LossGrad> {
    let batch = make_batch(split, pools)?;
    let tape = Tape::new();
    let want_theta = wrt != Wrt::Contexts;
    let want_ctx = wrt != Wrt::Theta;
    let theta: Vec<Var<'_>> = params
        .tensors()
        .into_iter()
        .map(|t| if want_theta { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let ctx = if want_ctx {
        tape.leaf(contexts.xi.clone())
    } else {
        tape.constant(contexts.xi.clone())
    };
    let terms = loss_terms(params, &theta, &ctx, &batch, &split.t, cfg, prox)?;
    if !terms.values.is_finite() {
        return Ok(LossGrad {
            terms: terms.values,
            theta: None,
            contexts: None,
        });
    }
    let grads = terms.total.backward()?;
    Ok(LossGrad {
        terms: terms.values,
        theta: want_theta.then(|| theta.iter().map(|v| grads.wrt(v)).collect()),
        contexts: want_ctx.then(|| grads.wrt(&ctx)),
    })
}

/// Pooled loss and its gradient with respect to θ and all contexts.
pub fn total_loss_grad(
    params: &ThreeNetParams,
    contexts: &ContextSet,
    split: &Split,
    pools: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<LossGrad> {
    check_inputs(params, contexts, split)?;
    loss_grad(params, contexts, split, pools, cfg, &Prox::None, Wrt::Both)
}

// ---------------------------------------------------------------------------
// forecasting

/// k = 0 forecasts `x̂^{e,e}` for every trajectory; shape `[E, S, N, d]`.
pub fn forecast(
    params: &ThreeNetParams,
    contexts: &ContextSet,
    split: &Split,
    solver: &IntegratorSpec,
) -> Result<Tensor> {
    check_inputs(params, contexts, split)?;
    let pools: Vec<Vec<usize>> = (0..split.n_envs()).map(|e| vec![e]).collect();
    let batch = make_batch(split, &pools)?;
    let pred = predict(&params.tensor_view(), &contexts.xi, &batch, &split.t, TaylorOrder::Zero, solver)?;
    Ok(to_env_major(&pred, split))
}

/// `[N, E·S, d]` → `[E, S, N, d]`.
fn to_env_major(pred: &Tensor, split: &Split) -> Tensor {
    rows_first(pred, &[split.n_envs(), split.n_trajs()])
}

/// `[N, R, d]` → `[prefix.., N, d]` with `R = Π prefix`.
fn rows_first(pred: &Tensor, prefix: &[usize]) -> Tensor {
    let (n, r, d) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    let mut out = vec![0.0; pred.len()];
    for row in 0..r {
        for k in 0..n {
            let src = (k * r + row) * d;
            let dst = (row * n + k) * d;
            out[dst..dst + d].copy_from_slice(&pred.data()[src..src + d]);
        }
    }
    let mut shape = prefix.to_vec();
    shape.extend([n, d]);
    Tensor::new(shape, out).expect("same length")
}

/// Candidate forecasts `x̂^{e,j}` with explicit context rows.
///
/// `ctx` holds every context involved; environment `e` uses row
/// `target_rows[e]` as ξ^e and expands around the rows in `pools[e]` (all of
/// equal length P). Returns `[E, P, S, N, d]`.
pub(crate) fn candidate_forecasts(
    params: &ThreeNetParams,
    ctx: &Tensor,
    target_rows: &[usize],
    pools: &[Vec<usize>],
    split: &Split,
    k: TaylorOrder,
    solver: &IntegratorSpec,
) -> Result<Tensor> {
    let p = pools.first().map_or(0, Vec::len);
    if pools.iter().any(|pool| pool.len() != p) || target_rows.len() != split.n_envs() {
        return Err(MetaError::Shape("one target row and equal-size pools per environment".into()));
    }
    let mut batch = make_batch(split, pools)?;
    for e in batch.e_idx.iter_mut() {
        *e = target_rows[*e];
    }
    let pred = predict(&params.tensor_view(), ctx, &batch, &split.t, k, solver)?;
    Ok(rows_first(&pred, &[split.n_envs(), p, split.n_trajs()]))
}

/// Per-environment losses with pools `{e}`, summed on one tape; gradient wrt
/// the contexts only. Each environment is integrated as its own batch.
pub(crate) fn per_env_context_grad(
    params: &ThreeNetParams,
    contexts: &ContextSet,
    split: &Split,
    cfg: &TrainConfig,
) -> Result<(Vec<LossTerms>, Option<Tensor>)> {
    check_inputs(params, contexts, split)?;
    let tape = Tape::new();
    let theta: Vec<Var<'_>> = params.tensors().into_iter().map(|t| tape.constant(t.clone())).collect();
    let ctx = tape.leaf(contexts.xi.clone());
    let mut terms = Vec::new();
    let mut total: Option<Var<'_>> = None;
    for e in 0..split.n_envs() {
        let sub = split.select_envs(&[e]);
        let batch = make_batch(&sub, &[vec![0]])?;
        let ce = ctx.slice(0, e, e + 1)?;
        let t = loss_terms(params, &theta, &ce, &batch, &sub.t, cfg, &Prox::None).map_err(|err| match err {
            MetaError::Integration { traj, source, .. } => MetaError::Integration {
                env: e,
                traj,
                member: e,
                source,
            },
            other => other,
        })?;
        terms.push(t.values);
        total = Some(match total {
            None => t.total,
            Some(acc) => acc.add(&t.total)?,
        });
    }
    let total = total.ok_or_else(|| MetaError::Shape("no environments".into()))?;
    if !scalar(&total).is_finite() {
        return Ok((terms, None));
    }
    let grads = total.backward()?;
    Ok((terms, Some(grads.wrt(&ctx))))
}

/// Mean squared error between two `[E, S, N, d]` arrays.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.sub(b)?.square().mean())
}

/// Forecasts of a context-free field; shape `[E, S, N, d]`.
pub fn forecast_context_free(params: &ContextFreeParams, split: &Split, solver: &IntegratorSpec) -> Result<Tensor> {
    let (m, s, d) = (split.n_envs(), split.n_trajs(), split.state_size());
    let x0: Vec<f64> = (0..m)
        .flat_map(|e| (0..s).flat_map(move |i| split.state(e, i, 0).to_vec()))
        .collect();
    let view = params.view(params.tensors().into_iter().cloned().collect());
    let f = |x: &Tensor| view.eval(x);
    let traj = integrate(&f, &Tensor::new(vec![m * s, d], x0)?, &split.t, solver)?;
    Ok(to_env_major(&stack(&traj)?, split))
}

// ---------------------------------------------------------------------------
// Adam

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam state for a list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter list changed length");
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (((pi, gi), mi), vi) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub terms: LossTerms,
    /// Test-split MSE when validated this epoch.
    pub val_mse: Option<f64>,
}

/// Loss at each iteration of one proximal inner loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerCurve {
    pub outer: usize,
    pub phase: String,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub algorithm: Algorithm,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub inner: Vec<InnerCurve>,
    pub best_epoch: Option<usize>,
    pub best_val_mse: Option<f64>,
    pub params: ThreeNetParams,
    pub contexts: ContextSet,
    pub wall_seconds: f64,
    /// Set when training stopped on a numerical failure.
    pub aborted: Option<String>,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    algorithm: Algorithm,
    config: &'a TrainConfig,
    epochs_run: usize,
    final_loss: Option<&'a EpochRecord>,
    best_epoch: Option<usize>,
    best_val_mse: Option<f64>,
    n_params: usize,
    contexts: Vec<Vec<f64>>,
    wall_seconds: f64,
    aborted: &'a Option<String>,
    inner: &'a [InnerCurve],
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        let j = ReportJson {
            algorithm: self.algorithm,
            config: &self.config,
            epochs_run: self.epochs.len(),
            final_loss: self.epochs.last(),
            best_epoch: self.best_epoch,
            best_val_mse: self.best_val_mse,
            n_params: self.params.num_params(),
            contexts: self.contexts.rows(),
            wall_seconds: self.wall_seconds,
            aborted: &self.aborted,
            inner: &self.inner,
        };
        serde_json::to_string_pretty(&j).map_err(|e| MetaError::Serde(e.to_string()))
    }

    /// One row per executed epoch.
    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        write_loss_csv(&self.epochs, path)
    }
}

pub(crate) fn write_loss_csv(epochs: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| MetaError::Serde(e.to_string()))?;
    w.write_record(["epoch", "total", "data", "l1", "l2", "prox", "val_mse"])
        .map_err(|e| MetaError::Serde(e.to_string()))?;
    for r in epochs {
        let t = r.terms;
        w.write_record([
            r.epoch.to_string(),
            t.total.to_string(),
            t.data.to_string(),
            t.l1.to_string(),
            t.l2.to_string(),
            t.prox.to_string(),
            r.val_mse.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| MetaError::Serde(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Stream offset separating pool sampling from weight initialization.
const POOL_STREAM: u64 = 0x706f_6f6c;

struct Trainer<'a> {
    ds: &'a TrajectoryDataset,
    cfg: &'a TrainConfig,
    params: ThreeNetParams,
    theta: Vec<Tensor>,
    contexts: ContextSet,
    adam_theta: Adam,
    adam_xi: Adam,
    rng: ChaCha8Rng,
    best: Option<(f64, usize, Vec<Tensor>, ContextSet)>,
    epochs: Vec<EpochRecord>,
    inner: Vec<InnerCurve>,
}

impl<'a> Trainer<'a> {
    fn new(ds: &'a TrajectoryDataset, cfg: &'a TrainConfig, params: ThreeNetParams, contexts: ContextSet) -> Result<Self> {
        cfg.validate()?;
        check_inputs(&params, &contexts, &ds.train)?;
        if cfg.pool.size > contexts.m() {
            return Err(MetaError::PoolTooLarge {
                p: cfg.pool.size,
                m: contexts.m(),
            });
        }
        let theta: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        let adam_theta = Adam::new(&theta.iter().collect::<Vec<_>>());
        let adam_xi = Adam::new(&[&contexts.xi]);
        Ok(Self {
            ds,
            cfg,
            params,
            theta,
            contexts,
            adam_theta,
            adam_xi,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ POOL_STREAM),
            best: None,
            epochs: Vec::new(),
            inner: Vec::new(),
        })
    }

    fn sync(&mut self) -> Result<()> {
        self.params = self.params.with_tensors(self.theta.clone())?;
        Ok(())
    }

    fn grad(&mut self, prox: &Prox<'_>, wrt: Wrt) -> Result<LossGrad> {
        let pools = build_pools(self.cfg.pool, &self.contexts, &mut self.rng)?;
        loss_grad(&self.params, &self.contexts, &self.ds.train, &pools, self.cfg, prox, wrt)
    }

    fn step_theta(&mut self, g: &[Tensor], lr: f64) -> Result<()> {
        self.adam_theta.step(&mut self.theta, g, lr);
        self.sync()
    }

    fn step_xi(&mut self, g: &Tensor, lr: f64) {
        let mut xi = [std::mem::replace(&mut self.contexts.xi, Tensor::zeros(&[0]))];
        self.adam_xi.step(&mut xi, std::slice::from_ref(g), lr);
        let [xi] = xi;
        self.contexts.xi = xi;
    }

    fn maybe_validate(&mut self, epoch: usize, last: bool) -> Result<Option<f64>> {
        let every = self.cfg.validate_every;
        if every == 0 || !(epoch.is_multiple_of(every) || last) {
            return Ok(None);
        }
        let pred = match forecast(&self.params, &self.contexts, &self.ds.test, &self.cfg.solver) {
            Ok(p) => p,
            Err(MetaError::Ode(_)) | Err(MetaError::Integration { .. }) => return Ok(Some(f64::INFINITY)),
            Err(e) => return Err(e),
        };
        let v = mse(&pred, &self.ds.test.x)?;
        let v = if v.is_finite() { v } else { f64::INFINITY };
        if self.best.as_ref().is_none_or(|(b, ..)| v < *b) {
            self.best = Some((v, epoch, self.theta.clone(), self.contexts.clone()));
        }
        Ok(Some(v))
    }

    fn finish(mut self, algorithm: Algorithm, start: Instant, aborted: Option<String>) -> Result<TrainReport> {
        let mut best_epoch = None;
        let mut best_val = None;
        if let Some((v, e, theta, ctx)) = self.best.take() {
            self.theta = theta;
            self.contexts = ctx;
            self.sync()?;
            best_epoch = Some(e);
            best_val = Some(v);
        }
        Ok(TrainReport {
            algorithm,
            config: self.cfg.clone(),
            epochs: self.epochs,
            inner: self.inner,
            best_epoch,
            best_val_mse: best_val,
            params: self.params,
            contexts: self.contexts,
            wall_seconds: start.elapsed().as_secs_f64(),
            aborted,
        })
    }
}

fn non_finite(epoch: usize, what: &str) -> String {
    format!("non-finite {what} loss at epoch {epoch}")
}

/// Initial weights and zero contexts for a dataset.
pub fn initial_state(ds: &TrajectoryDataset, cfg: &TrainConfig) -> Result<(ThreeNetParams, ContextSet)> {
    let params = init_three_net(&cfg.model.three_net(ds.state_size), cfg.seed)?;
    Ok((params, ContextSet::zeros(ds.train.n_envs(), cfg.model.d_xi)))
}

/// Dispatch on `cfg.algorithm`.
pub fn train(ds: &TrajectoryDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    let (params, contexts) = initial_state(ds, cfg)?;
    match cfg.algorithm {
        Algorithm::Ordinary => train_ordinary_from(ds, cfg, params, contexts),
        Algorithm::Proximal => train_proximal_from(ds, cfg, params, contexts),
    }
}

pub fn train_ordinary(ds: &TrajectoryDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    let (params, contexts) = initial_state(ds, cfg)?;
    train_ordinary_from(ds, cfg, params, contexts)
}

pub fn train_proximal(ds: &TrajectoryDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    let (params, contexts) = initial_state(ds, cfg)?;
    train_proximal_from(ds, cfg, params, contexts)
}

/// Integration and non-finite failures end training; anything else is an error.
fn numerical(e: MetaError) -> Result<String> {
    match e {
        MetaError::Ode(_) | MetaError::Integration { .. } | MetaError::Diff(DiffError::NonFinite { .. }) => {
            Ok(e.to_string())
        }
        other => Err(other),
    }
}

/// Alternating single Adam steps: θ with contexts frozen, then contexts with θ frozen.
pub fn train_ordinary_from(
    ds: &TrajectoryDataset,
    cfg: &TrainConfig,
    params: ThreeNetParams,
    contexts: ContextSet,
) -> Result<TrainReport> {
    let start = Instant::now();
    let mut tr = Trainer::new(ds, cfg, params, contexts)?;
    tr.maybe_validate(0, cfg.epochs == 0)?;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_factor(epoch);
        let g = match tr.grad(&Prox::None, Wrt::Theta) {
            Ok(g) => g,
            Err(e) => {
                let msg = numerical(e)?;
                return tr.finish(Algorithm::Ordinary, start, Some(msg));
            }
        };
        let Some(gt) = g.theta.filter(|_| g.terms.is_finite()) else {
            return tr.finish(Algorithm::Ordinary, start, Some(non_finite(epoch, "θ-step")));
        };
        tr.step_theta(&gt, cfg.lr_theta * lr)?;
        let gx = match tr.grad(&Prox::None, Wrt::Contexts) {
            Ok(g) => g,
            Err(e) => {
                let msg = numerical(e)?;
                return tr.finish(Algorithm::Ordinary, start, Some(msg));
            }
        };
        let Some(gc) = gx.contexts.filter(|_| gx.terms.is_finite()) else {
            return tr.finish(Algorithm::Ordinary, start, Some(non_finite(epoch, "context-step")));
        };
        tr.step_xi(&gc, cfg.lr_xi * lr);
        let val_mse = tr.maybe_validate(epoch + 1, epoch + 1 == cfg.epochs)?;
        tr.epochs.push(EpochRecord {
            epoch,
            terms: g.terms,
            val_mse,
        });
        log::debug!("epoch {epoch}: loss {:.6e}", g.terms.total);
    }
    tr.finish(Algorithm::Ordinary, start, None)
}

fn rel_change(prev: f64, cur: f64) -> f64 {
    (cur - prev).abs() / prev.abs().max(f64::MIN_POSITIVE)
}

/// Proximal alternating minimization with capped inner loops.
pub fn train_proximal_from(
    ds: &TrajectoryDataset,
    cfg: &TrainConfig,
    params: ThreeNetParams,
    contexts: ContextSet,
) -> Result<TrainReport> {
    let start = Instant::now();
    let mut tr = Trainer::new(ds, cfg, params, contexts)?;
    tr.maybe_validate(0, cfg.epochs == 0)?;
    for q in 0..cfg.epochs {
        let lr = cfg.lr_factor(q);
        let mut first: Option<LossTerms> = None;

        // θ-subproblem
        let anchor: Vec<Tensor> = tr.theta.clone();
        let mut curve = Vec::new();
        for it in 0..cfg.inner_theta {
            let g = match tr.grad(&Prox::Theta(&anchor, cfg.beta), Wrt::Theta) {
                Ok(g) => g,
                Err(e) => {
                    let msg = numerical(e)?;
                    return tr.finish(Algorithm::Proximal, start, Some(msg));
                }
            };
            let Some(gt) = g.theta.filter(|_| g.terms.is_finite()) else {
                return tr.finish(Algorithm::Proximal, start, Some(non_finite(q, "θ-subproblem")));
            };
            if let Some(&prev) = curve.last() {
                if g.terms.total > prev {
                    log::warn!("θ-subproblem loss increased at outer {q}, inner {it}");
                }
                if rel_change(prev, g.terms.total) < cfg.inner_tol {
                    curve.push(g.terms.total);
                    break;
                }
            }
            curve.push(g.terms.total);
            first.get_or_insert(g.terms);
            tr.step_theta(&gt, cfg.lr_theta * lr)?;
        }
        tr.inner.push(InnerCurve {
            outer: q,
            phase: "theta".into(),
            losses: curve,
        });

        // context subproblem
        let anchor = tr.contexts.xi.clone();
        let mut curve = Vec::new();
        for it in 0..cfg.inner_xi {
            let g = match tr.grad(&Prox::Contexts(&anchor, cfg.beta), Wrt::Contexts) {
                Ok(g) => g,
                Err(e) => {
                    let msg = numerical(e)?;
                    return tr.finish(Algorithm::Proximal, start, Some(msg));
                }
            };
            let Some(gc) = g.contexts.filter(|_| g.terms.is_finite()) else {
                return tr.finish(Algorithm::Proximal, start, Some(non_finite(q, "context-subproblem")));
            };
            if let Some(&prev) = curve.last() {
                if g.terms.total > prev {
                    log::warn!("context-subproblem loss increased at outer {q}, inner {it}");
                }
                if rel_change(prev, g.terms.total) < cfg.inner_tol {
                    curve.push(g.terms.total);
                    break;
                }
            }
            curve.push(g.terms.total);
            first.get_or_insert(g.terms);
            tr.step_xi(&gc, cfg.lr_xi * lr);
        }
        tr.inner.push(InnerCurve {
            outer: q,
            phase: "contexts".into(),
            losses: curve,
        });

        let val_mse = tr.maybe_validate(q + 1, q + 1 == cfg.epochs)?;
        tr.epochs.push(EpochRecord {
            epoch: q,
            terms: first.unwrap_or_default(),
            val_mse,
        });
        log::debug!("outer {q}: loss {:.6e}", first.unwrap_or_default().total);
    }
    tr.finish(Algorithm::Proximal, start, None)
}

// ---------------------------------------------------------------------------
// baselines

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMode {
    /// One field for all environments.
    Ofa,
    /// One field per environment.
    Ope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    #[serde(default)]
    pub seed: u64,
    pub state_hidden: Vec<usize>,
    pub state_out: usize,
    pub main_hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub lr: f64,
    pub epochs: usize,
    pub solver: IntegratorSpec,
    #[serde(default)]
    pub validate_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineReport {
    pub mode: BaselineMode,
    /// One model (OFA) or one per environment (OPE).
    pub models: Vec<ContextFreeParams>,
    pub curves: Vec<Vec<f64>>,
    pub train_mse: Vec<f64>,
    pub wall_seconds: f64,
    pub aborted: Option<String>,
}

impl BaselineReport {
    /// Per-environment MSE of the fitted field(s) on a split with the same environments.
    pub fn env_mse(&self, split: &Split, solver: &IntegratorSpec) -> Result<Vec<f64>> {
        (0..split.n_envs())
            .map(|e| {
                let model = if self.models.len() == 1 { &self.models[0] } else { &self.models[e] };
                let sub = split.select_envs(&[e]);
                let pred = forecast_context_free(model, &sub, solver)?;
                mse(&pred, &sub.x)
            })
            .collect()
    }
}

fn context_free_loss<T: Operand>(
    params: &ContextFreeParams,
    theta: &[T],
    x0: &T,
    target: &Tensor,
    t: &[f64],
    solver: &IntegratorSpec,
) -> Result<T> {
    let view = params.view(theta.to_vec());
    let f = |x: &T| view.eval(x);
    let traj = integrate(&f, x0, t, solver)?;
    Ok(stack(&traj)?.sub(&x0.lift(target.clone()))?.square().mean())
}

/// Fit one context-free field to every trajectory of `split`.
pub fn fit_context_free(
    split: &Split,
    cfg: &BaselineConfig,
    seed: u64,
    validation: Option<&Split>,
) -> Result<(ContextFreeParams, Vec<f64>, Option<String>)> {
    let mut params = ContextFreeParams::init(
        split.state_size(),
        &cfg.state_hidden,
        cfg.state_out,
        &cfg.main_hidden,
        cfg.activation,
        seed,
    )?;
    let (m, s, d) = (split.n_envs(), split.n_trajs(), split.state_size());
    let x0: Vec<f64> = (0..m)
        .flat_map(|e| (0..s).flat_map(move |i| split.state(e, i, 0).to_vec()))
        .collect();
    let x0 = Tensor::new(vec![m * s, d], x0)?;
    let pools: Vec<Vec<usize>> = (0..m).map(|e| vec![e]).collect();
    let target = make_batch(split, &pools)?.target;
    let mut theta: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let mut adam = Adam::new(&theta.iter().collect::<Vec<_>>());
    let mut curve = Vec::new();
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut aborted = None;
    let validate = |p: &ContextFreeParams| -> Result<f64> {
        let v = validation.expect("validation split present");
        let out = forecast_context_free(p, v, &cfg.solver).and_then(|pred| mse(&pred, &v.x));
        Ok(match out {
            Ok(x) if x.is_finite() => x,
            Ok(_) | Err(MetaError::Ode(_)) => f64::INFINITY,
            Err(e) => return Err(e),
        })
    };
    let use_val = cfg.validate_every > 0 && validation.is_some();
    if use_val {
        best = Some((validate(&params)?, theta.clone()));
    }
    for epoch in 0..cfg.epochs {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = theta.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = context_free_loss(&params, &vars, &tape.constant(x0.clone()), &target, &split.t, &cfg.solver);
        let loss = match out {
            Ok(l) => l,
            Err(e) => {
                aborted = Some(numerical(e)?);
                break;
            }
        };
        let value = scalar(&loss);
        if !value.is_finite() {
            aborted = Some(non_finite(epoch, "baseline"));
            break;
        }
        curve.push(value);
        let grads = loss.backward()?;
        let g: Vec<Tensor> = vars.iter().map(|v| grads.wrt(v)).collect();
        adam.step(&mut theta, &g, cfg.lr);
        params = params.with_tensors(theta.clone())?;
        if use_val && ((epoch + 1) % cfg.validate_every == 0 || epoch + 1 == cfg.epochs) {
            let v = validate(&params)?;
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, theta.clone()));
            }
        }
    }
    if let Some((_, t)) = best {
        params = params.with_tensors(t)?;
    }
    Ok((params, curve, aborted))
}

/// OFA: one field on the pooled training split. OPE: one field per environment.
pub fn train_baseline(ds: &TrajectoryDataset, mode: BaselineMode, cfg: &BaselineConfig) -> Result<BaselineReport> {
    if !(cfg.lr > 0.0) {
        return Err(MetaError::Config("learning rate must be positive".into()));
    }
    let start = Instant::now();
    let (models, curves, aborted) = match mode {
        BaselineMode::Ofa => {
            let (p, c, a) = fit_context_free(&ds.train, cfg, cfg.seed, Some(&ds.test))?;
            (vec![p], vec![c], a)
        }
        BaselineMode::Ope => {
            let mut models = Vec::new();
            let mut curves = Vec::new();
            let mut aborted = None;
            for e in 0..ds.train.n_envs() {
                let train = ds.train.select_envs(&[e]);
                let test = ds.test.select_envs(&[e]);
                let (p, c, a) = fit_context_free(&train, cfg, cfg.seed.wrapping_add(e as u64), Some(&test))?;
                models.push(p);
                curves.push(c);
                if aborted.is_none() {
                    aborted = a.map(|msg| format!("environment {e}: {msg}"));
                }
            }
            (models, curves, aborted)
        }
    };
    let mut report = BaselineReport {
        mode,
        models,
        curves,
        train_mse: Vec::new(),
        wall_seconds: 0.0,
        aborted,
    };
    report.train_mse = report.env_mse(&ds.train, &cfg.solver)?;
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Write a contexts matrix as JSON rows.
pub fn save_contexts(contexts: &ContextSet, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(contexts).map_err(|e| MetaError::Serde(e.to_string()))?;
    fs::write(path, json + "\n")?;
    Ok(())
}

pub fn load_contexts(path: &Path) -> Result<ContextSet> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| MetaError::Serde(e.to_string()))
}

#[cfg(test)]
mod tests;
