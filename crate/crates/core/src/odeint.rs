//! Differentiable ODE integration: explicit Euler, classical RK4 and adaptive
//! Dormand–Prince 5(4).
//!
//! All methods are generic over [`Operand`], so integrating with `Var` or
//! `Dual` states unrolls the solver into the derivative computation. The
//! adaptive controller only looks at primal values; accepted step sizes are
//! constants of the forward pass.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{DiffError, Operand};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
    Dopri5,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
            Method::Dopri5 => "dopri5",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = OdeError;
    fn from_str(s: &str) -> Result<Self, OdeError> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            "dopri5" => Ok(Method::Dopri5),
            other => Err(OdeError::InvalidSpec(format!("unknown method `{other}`"))),
        }
    }
}

/// Solver configuration.
///
/// For `dopri5`, `dt` is optional and only seeds the first step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorSpec {
    pub method: Method,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default = "default_atol")]
    pub atol: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

fn default_rtol() -> f64 {
    1e-3
}
fn default_atol() -> f64 {
    1e-6
}
fn default_max_steps() -> usize {
    100_000
}

impl IntegratorSpec {
    pub fn euler(dt: f64) -> Self {
        Self {
            method: Method::Euler,
            dt: Some(dt),
            rtol: default_rtol(),
            atol: default_atol(),
            max_steps: default_max_steps(),
        }
    }

    pub fn rk4(dt: f64) -> Self {
        Self {
            method: Method::Rk4,
            ..Self::euler(dt)
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self {
            method: Method::Dopri5,
            dt: None,
            rtol,
            atol,
            max_steps: default_max_steps(),
        }
    }

    /// Tolerances used to generate ground-truth trajectories.
    pub fn ground_truth() -> Self {
        Self::dopri5(1e-7, 1e-9)
    }

    pub fn validate(&self, n_eval: usize) -> Result<(), OdeError> {
        let bad = |msg: String| Err(OdeError::InvalidSpec(msg));
        match (self.method, self.dt) {
            (Method::Euler | Method::Rk4, None) => {
                return bad(format!("{} requires dt", self.method))
            }
            (_, Some(dt)) if !(dt > 0.0 && dt.is_finite()) => {
                return bad(format!("dt must be positive, got {dt}"))
            }
            _ => {}
        }
        if self.method == Method::Dopri5 && !(self.rtol > 0.0 && self.atol > 0.0) {
            return bad(format!(
                "rtol and atol must be positive, got {} and {}",
                self.rtol, self.atol
            ));
        }
        if self.max_steps < n_eval {
            return bad(format!(
                "max_steps {} is below the number of output times {n_eval}",
                self.max_steps
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum OdeError {
    #[error("invalid integrator spec: {0}")]
    InvalidSpec(String),
    #[error("step cap exceeded; last accepted time {t_last}")]
    StepCapExceeded { t_last: f64 },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// `acc + Σ cᵢ kᵢ`, skipping zero coefficients.
fn axpy<T: Operand>(acc: &T, terms: &[(f64, &T)]) -> Result<T, DiffError> {
    let mut out = acc.clone();
    for &(c, k) in terms {
        if c != 0.0 {
            out = out.add(&k.scale(c))?;
        }
    }
    Ok(out)
}

fn check_finite<T: Operand>(x: &T, t: f64) -> Result<(), OdeError> {
    if x.value().is_finite() {
        Ok(())
    } else {
        Err(OdeError::NonFinite { t })
    }
}

fn check_grid(t_eval: &[f64]) -> Result<(), OdeError> {
    if t_eval.is_empty() {
        return Err(OdeError::InvalidSpec("t_eval is empty".into()));
    }
    if t_eval.iter().any(|t| !t.is_finite()) {
        return Err(OdeError::InvalidSpec("t_eval contains non-finite times".into()));
    }
    if let Some(w) = t_eval.windows(2).find(|w| w[1] <= w[0]) {
        return Err(OdeError::InvalidSpec(format!(
            "t_eval must be strictly increasing ({} then {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

/// Integrate `dx/dt = field(x)` and return the state at every `t_eval` point.
///
/// `x0` may hold a batch of states (e.g. shape `[B, d]`); the field then
/// maps the batch at once. Row 0 of the result is `x0` itself.
pub fn integrate<T, F>(
    field: &F,
    x0: &T,
    t_eval: &[f64],
    spec: &IntegratorSpec,
) -> Result<Vec<T>, OdeError>
where
    T: Operand,
    F: Fn(&T) -> Result<T, DiffError>,
{
    check_grid(t_eval)?;
    spec.validate(t_eval.len())?;
    check_finite(x0, t_eval[0])?;
    match spec.method {
        Method::Euler | Method::Rk4 => fixed_step(field, x0, t_eval, spec),
        Method::Dopri5 => dopri5(field, x0, t_eval, spec),
    }
}

/// Stack a trajectory of equally shaped states along a new leading axis.
pub fn stack<T: Operand>(states: &[T]) -> Result<T, DiffError> {
    let shape = states
        .first()
        .map(|s| s.shape())
        .ok_or_else(|| DiffError::InvalidArgument {
            op: "stack",
            msg: "empty trajectory".into(),
        })?;
    let mut row_shape = vec![1];
    row_shape.extend_from_slice(&shape);
    let rows: Vec<T> = states
        .iter()
        .map(|s| s.reshape(&row_shape))
        .collect::<Result<_, _>>()?;
    T::concat(&rows, 0)
}

fn euler_step<T, F>(field: &F, x: &T, h: f64) -> Result<T, DiffError>
where
    T: Operand,
    F: Fn(&T) -> Result<T, DiffError>,
{
    let k = field(x)?;
    axpy(x, &[(h, &k)])
}

fn rk4_step<T, F>(field: &F, x: &T, h: f64) -> Result<T, DiffError>
where
    T: Operand,
    F: Fn(&T) -> Result<T, DiffError>,
{
    let k1 = field(x)?;
    let k2 = field(&axpy(x, &[(0.5 * h, &k1)])?)?;
    let k3 = field(&axpy(x, &[(0.5 * h, &k2)])?)?;
    let k4 = field(&axpy(x, &[(h, &k3)])?)?;
    axpy(
        x,
        &[(h / 6.0, &k1), (h / 3.0, &k2), (h / 3.0, &k3), (h / 6.0, &k4)],
    )
}

fn fixed_step<T, F>(
    field: &F,
    x0: &T,
    t_eval: &[f64],
    spec: &IntegratorSpec,
) -> Result<Vec<T>, OdeError>
where
    T: Operand,
    F: Fn(&T) -> Result<T, DiffError>,
{
    let dt = spec.dt.expect("validated");
    let step = |x: &T, h: f64| match spec.method {
        Method::Euler => euler_step(field, x, h),
        _ => rk4_step(field, x, h),
    };
    let mut out = Vec::with_capacity(t_eval.len());
    out.push(x0.clone());
    let mut x = x0.clone();
    let mut n_steps = 0usize;
    for w in t_eval.windows(2) {
        let span = w[1] - w[0];
        // full steps, then one partial step landing on w[1]
        let full = ((span / dt) * (1.0 + 1e-12)).floor() as usize;
        let rest = span - full as f64 * dt;
        let partial = rest > 1e-12 * span;
        for _ in 0..full {
            x = step(&x, dt)?;
        }
        if partial {
            x = step(&x, rest)?;
        }
        n_steps += full + partial as usize;
        if n_steps > spec.max_steps {
            return Err(OdeError::StepCapExceeded { t_last: w[0] });
        }
        check_finite(&x, w[1])?;
        out.push(x.clone());
    }
    Ok(out)
}

const A: [&[f64]; 6] = [
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
    ],
    &[
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
    ],
    &[
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
/// Fifth-order solution minus embedded fourth-order solution.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
/// Weights giving the solution at the step midpoint (for dense output).
const C_MID: [f64; 7] = [
    6025192743.0 / 30085553152.0 / 2.0,
    0.0,
    51252292925.0 / 65400821598.0 / 2.0,
    -2691868925.0 / 45128329728.0 / 2.0,
    187940372067.0 / 1594534317056.0 / 2.0,
    -1776094331.0 / 19743644256.0 / 2.0,
    11237099.0 / 235043384.0 / 2.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const PI_BETA: f64 = 0.04;
const PI_ALPHA: f64 = 0.2 - 0.75 * PI_BETA;

/// One Dormand–Prince step of an autonomous field. Returns the stages `k1..k7` (k7 = f(y_new)) and `y_new`.
fn dopri_stages<T, F>(field: &F, y: &T, k1: T, h: f64) -> Result<(Vec<T>, T), DiffError>
where
    T: Operand,
    F: Fn(&T) -> Result<T, DiffError>,
{
    let mut k = Vec::with_capacity(7);
    k.push(k1);
    let mut y_new = y.clone();
    for (s, row) in A.iter().enumerate() {
        let terms: Vec<(f64, &T)> = row.iter().zip(&k).map(|(a, ki)| (h * a, ki)).collect();
        let ys = axpy(y, &terms)?;
        k.push(field(&ys)?);
        if s == 5 {
            y_new = ys;
        }
    }
    Ok((k, y_new))
}

/// Worst per-row scaled RMS norm; a batch `[B, ...]` is controlled row by row.
fn row_rms_max(v: &Tensor, scale: impl Fn(usize) -> f64) -> f64 {
    let rows = if v.ndim() >= 2 { v.shape()[0].max(1) } else { 1 };
    let width = (v.len() / rows).max(1);
    let mut worst: f64 = 0.0;
    for r in 0..rows {
        let sum: f64 = (r * width..(r + 1) * width)
            .map(|i| (v.data()[i] / scale(i)).powi(2))
            .sum();
        let rms = (sum / width as f64).sqrt();
        // propagate NaN
        if rms.is_nan() || rms > worst {
            worst = rms;
        }
        if worst.is_nan() {
            break;
        }
    }
    worst
}

fn error_ratio(y0: &Tensor, y1: &Tensor, err: &Tensor, rtol: f64, atol: f64) -> f64 {
    row_rms_max(err, |i| atol + rtol * y0.data()[i].abs().max(y1.data()[i].abs()))
}

fn rms_scaled(v: &Tensor, y: &Tensor, rtol: f64, atol: f64) -> f64 {
    row_rms_max(v, |i| atol + rtol * y.data()[i].abs())
}

/// Starting step size heuristic (Hairer, Nørsett & Wanner, II.4).
fn initial_step<T, F>(field: &F, y0: &T, f0: &T, spec: &IntegratorSpec) -> Result<f64, DiffError>
where
    T: Operand,
    F: Fn(&T) -> Result<T, DiffError>,
{
    let (y, f) = (y0.value(), f0.value());
    let d0 = rms_scaled(&y, &y, spec.rtol, spec.atol);
    let d1 = rms_scaled(&f, &y, spec.rtol, spec.atol);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let y1 = y.add(&f.scale(h0))?;
    let f1 = field(&y0.lift(y1))?.value();
    let d2 = rms_scaled(&f1.sub(&f)?, &y, spec.rtol, spec.atol) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    Ok((100.0 * h0).min(h1))
}

/// Quartic dense output on `[t0, t0 + h]` at fraction `x ∈ (0, 1)`.
fn interpolate<T: Operand>(
    y0: &T,
    y1: &T,
    ym: &T,
    f0: &T,
    f1: &T,
    h: f64,
    x: f64,
) -> Result<T, DiffError> {
    // coefficients of e + d x + c x² + b x³ + a x⁴
    let a = axpy(&f1.sub(f0)?.scale(2.0 * h), &[(-8.0, y1), (-8.0, y0), (16.0, ym)])?;
    let b = axpy(
        &f0.scale(5.0 * h),
        &[(-3.0 * h, f1), (18.0, y0), (14.0, y1), (-32.0, ym)],
    )?;
    let c = axpy(
        &f1.scale(h),
        &[(-4.0 * h, f0), (-11.0, y0), (-5.0, y1), (16.0, ym)],
    )?;
    axpy(
        y0,
        &[
            (h * x, f0),
            (x * x, &c),
            (x * x * x, &b),
            (x * x * x * x, &a),
        ],
    )
}

fn dopri5<T, F>(
    field: &F,
    x0: &T,
    t_eval: &[f64],
    spec: &IntegratorSpec,
) -> Result<Vec<T>, OdeError>
where
    T: Operand,
    F: Fn(&T) -> Result<T, DiffError>,
{
    let t_end = *t_eval.last().expect("checked non-empty");
    let mut out = Vec::with_capacity(t_eval.len());
    out.push(x0.clone());
    let mut next = 1;

    let mut t = t_eval[0];
    let mut y = x0.clone();
    let mut f = field(&y)?;
    let mut h = match spec.dt {
        Some(dt) => dt,
        None => initial_step(field, &y, &f, spec)?,
    };
    let mut err_prev: f64 = 1e-4;
    let mut attempts = 0usize;

    while next < t_eval.len() {
        if attempts >= spec.max_steps {
            return Err(OdeError::StepCapExceeded { t_last: t });
        }
        attempts += 1;
        let h_try = h.min(t_end - t);
        let (k, y_new) = dopri_stages(field, &y, f.clone(), h_try)?;
        let err = {
            let mut e = Tensor::zeros(&y.shape());
            for (ei, ki) in E.iter().zip(&k) {
                if *ei != 0.0 {
                    e.add_assign(&ki.value().scale(h_try * ei))?;
                }
            }
            e
        };
        let y_new_val = y_new.value();
        let ratio = error_ratio(&y.value(), &y_new_val, &err, spec.rtol, spec.atol);
        if !ratio.is_finite() {
            // shrink aggressively and retry; a finite state is required to continue
            h = h_try * MIN_FACTOR;
            if h < 1e-14 * t_end.abs().max(1.0) {
                return Err(OdeError::NonFinite { t });
            }
            continue;
        }
        if ratio <= 1.0 {
            let t_new = t + h_try;
            let f_new = k[6].clone();
            // emit every requested time covered by this step
            let needs_mid = t_eval[next] < t_new && next < t_eval.len();
            let ym = if needs_mid {
                let terms: Vec<(f64, &T)> =
                    C_MID.iter().zip(&k).map(|(c, ki)| (h_try * c, ki)).collect();
                Some(axpy(&y, &terms)?)
            } else {
                None
            };
            while next < t_eval.len() && t_eval[next] <= t_new + 1e-12 * t_new.abs().max(1.0) {
                let te = t_eval[next];
                let state = if (te - t_new).abs() <= 1e-12 * t_new.abs().max(1.0) {
                    y_new.clone()
                } else {
                    let ym = ym.as_ref().expect("midpoint computed for interior output");
                    interpolate(&y, &y_new, ym, &f, &f_new, h_try, (te - t) / h_try)?
                };
                check_finite(&state, te)?;
                out.push(state);
                next += 1;
            }
            let safe_ratio = ratio.max(1e-10);
            let factor = SAFETY * safe_ratio.powf(-PI_ALPHA) * err_prev.powf(PI_BETA);
            h = h_try * factor.clamp(MIN_FACTOR, MAX_FACTOR);
            err_prev = ratio.max(1e-4);
            t = t_new;
            y = y_new;
            f = f_new;
            check_finite(&y, t)?;
        } else {
            let factor = SAFETY * ratio.powf(-PI_ALPHA);
            h = h_try * factor.clamp(MIN_FACTOR, 1.0);
        }
    }
    Ok(out)
}

/// A scalar or vector test problem with a closed-form solution.
pub struct ExactProblem {
    pub x0: Tensor,
    pub t_end: f64,
    pub field: Box<dyn Fn(&Tensor) -> Tensor + Send + Sync>,
    pub exact: Box<dyn Fn(f64) -> Tensor + Send + Sync>,
}

impl ExactProblem {
    /// `dx/dt = x`, `x(0) = 1` on `[0, 1]`.
    pub fn exponential() -> Self {
        Self {
            x0: Tensor::vector(vec![1.0]),
            t_end: 1.0,
            field: Box::new(|x| x.clone()),
            exact: Box::new(|t| Tensor::vector(vec![t.exp()])),
        }
    }

    /// Harmonic oscillator `x'' = -x`, `x(0) = (1, 0)` on `[0, 2]`.
    pub fn harmonic() -> Self {
        Self {
            x0: Tensor::vector(vec![1.0, 0.0]),
            t_end: 2.0,
            field: Box::new(|x| Tensor::vector(vec![x.data()[1], -x.data()[0]])),
            exact: Box::new(|t| Tensor::vector(vec![t.cos(), -t.sin()])),
        }
    }
}

/// Empirical convergence orders `log₂(err(dt)/err(dt/2))` over successive
/// halvings of `dt0`, using fixed steps. For `dopri5` the fifth-order
/// propagator is stepped without adaptation.
pub fn order_check(method: Method, problem: &ExactProblem, dt0: f64, refinements: usize) -> Vec<f64> {
    let field = |x: &Tensor| -> Result<Tensor, DiffError> { Ok((problem.field)(x)) };
    let exact = (problem.exact)(problem.t_end);
    let global_error = |dt: f64| -> f64 {
        let n = (problem.t_end / dt).round() as usize;
        let h = problem.t_end / n as f64;
        let mut x = problem.x0.clone();
        for _ in 0..n {
            x = match method {
                Method::Euler => euler_step(&field, &x, h),
                Method::Rk4 => rk4_step(&field, &x, h),
                Method::Dopri5 => {
                    let k1 = field(&x).expect("infallible");
                    dopri_stages(&field, &x, k1, h).map(|(_, y)| y)
                }
            }
            .expect("test problem fields are shape-consistent");
        }
        x.sub(&exact).expect("same shape").max_abs()
    };
    let mut errs = Vec::with_capacity(refinements + 1);
    let mut dt = dt0;
    for _ in 0..=refinements {
        errs.push(global_error(dt));
        dt *= 0.5;
    }
    errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}
