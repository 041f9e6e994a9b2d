//! Benchmark dynamical systems and four-split dataset generation.
//!
//! Five parameter-varying systems: the simple pendulum (SP), Lotka–Volterra
//! (LV), the glycolytic oscillator (GO), the Sel'kov model (SM) and the
//! Brusselator on an 8×8 periodic grid (BT).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Split, TrajectoryDataset};
use crate::diff::DiffError;
use crate::odeint::{integrate, IntegratorSpec, OdeError};
use crate::tensor::Tensor;

/// Parameter name → value for one environment.
pub type Assignment = BTreeMap<String, f64>;

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("unknown system `{0}` (expected one of sp, lv, go, sm, bt)")]
    UnknownSystem(String),
    #[error("unknown parameter `{name}` for {system}")]
    UnknownParameter { system: SystemName, name: String },
    #[error("missing parameter `{name}` for {system}")]
    MissingParameter { system: SystemName, name: String },
    #[error("state has {got} entries, {system} expects {expected}")]
    StateSize {
        system: SystemName,
        expected: usize,
        got: usize,
    },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("integration failed in split {split}, environment {env}, trajectory {traj}: {source}")]
    Integration {
        split: &'static str,
        env: usize,
        traj: usize,
        source: OdeError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum SystemName {
    Sp,
    Lv,
    Go,
    Sm,
    Bt,
}

impl fmt::Display for SystemName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SystemName::Sp => "SP",
            SystemName::Lv => "LV",
            SystemName::Go => "GO",
            SystemName::Sm => "SM",
            SystemName::Bt => "BT",
        })
    }
}

impl FromStr for SystemName {
    type Err = SystemError;
    fn from_str(s: &str) -> Result<Self, SystemError> {
        match s.to_ascii_lowercase().as_str() {
            "sp" => Ok(SystemName::Sp),
            "lv" => Ok(SystemName::Lv),
            "go" => Ok(SystemName::Go),
            "sm" => Ok(SystemName::Sm),
            "bt" => Ok(SystemName::Bt),
            _ => Err(SystemError::UnknownSystem(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(format!("unknown preset `{s}` (expected desk or paper)")),
        }
    }
}

/// Initial-condition distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IcSampler {
    /// Independent `U(lo, hi)` per state component.
    Uniform { ranges: Vec<(f64, f64)> },
    /// Brusselator: `U = Ā`, `V = B̄/Ā + noise·η` per grid cell.
    Brusselator {
        a_range: (f64, f64),
        b_range: (f64, f64),
        noise: f64,
    },
}

/// Per-species initial-condition ranges for GO (substituted, see crate docs).
pub const GO_IC_RANGES: [(f64, f64); 7] = [
    (0.15, 1.60),
    (0.19, 2.16),
    (0.04, 0.20),
    (0.10, 0.35),
    (0.08, 0.30),
    (0.14, 2.67),
    (0.05, 0.10),
];

/// Side length of the Brusselator grid.
pub const BT_GRID: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub name: SystemName,
    pub d: usize,
    /// Every parameter of the right-hand side.
    pub params: Vec<String>,
    /// The subset that changes across environments.
    pub varying: Vec<String>,
    /// Values of the non-varying parameters.
    pub fixed: Assignment,
    pub t_eval: Vec<f64>,
    pub ic: IcSampler,
    /// One set of initial conditions reused by every environment of a split.
    pub shared_ic: bool,
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn assignment(pairs: &[(&str, f64)]) -> Assignment {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn grid(step: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 * step).collect()
}

/// `n` evenly spaced values in `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

impl SystemSpec {
    pub fn new(name: SystemName) -> Self {
        match name {
            SystemName::Sp => Self {
                name,
                d: 2,
                params: names(&["g", "L"]),
                varying: names(&["g"]),
                fixed: assignment(&[("L", 1.0)]),
                t_eval: grid(0.25, 20),
                ic: IcSampler::Uniform {
                    ranges: vec![
                        (-std::f64::consts::FRAC_PI_3, std::f64::consts::FRAC_PI_3),
                        (-1.0, 1.0),
                    ],
                },
                shared_ic: false,
            },
            SystemName::Lv => Self {
                name,
                d: 2,
                params: names(&["alpha", "beta", "gamma", "delta"]),
                varying: names(&["beta", "delta"]),
                fixed: assignment(&[("alpha", 0.5), ("gamma", 0.5)]),
                t_eval: grid(0.5, 20),
                ic: IcSampler::Uniform {
                    ranges: vec![(1.0, 3.0), (1.0, 3.0)],
                },
                shared_ic: true,
            },
            SystemName::Go => Self {
                name,
                d: 7,
                params: names(&[
                    "J0", "k1", "k2", "k3", "k4", "k5", "k6", "K1", "q", "N", "A", "kappa", "psi", "k",
                ]),
                varying: names(&["k1", "K1"]),
                fixed: assignment(&[
                    ("J0", 2.5),
                    ("k2", 6.0),
                    ("k3", 16.0),
                    ("k4", 100.0),
                    ("k5", 1.28),
                    ("k6", 12.0),
                    ("q", 4.0),
                    ("N", 1.0),
                    ("A", 4.0),
                    ("kappa", 13.0),
                    ("psi", 0.1),
                    ("k", 1.8),
                ]),
                t_eval: grid(0.05, 20),
                ic: IcSampler::Uniform {
                    ranges: GO_IC_RANGES.to_vec(),
                },
                shared_ic: false,
            },
            SystemName::Sm => Self {
                name,
                d: 2,
                params: names(&["a", "b"]),
                varying: names(&["b"]),
                fixed: assignment(&[("a", 0.1)]),
                t_eval: linspace(0.0, 40.0, 11),
                ic: IcSampler::Uniform {
                    ranges: vec![(0.0, 3.0), (0.0, 3.0)],
                },
                shared_ic: false,
            },
            SystemName::Bt => Self {
                name,
                d: 2 * BT_GRID * BT_GRID,
                params: names(&["A", "B", "Du", "Dv"]),
                varying: names(&["A", "B"]),
                fixed: assignment(&[("Du", 1.0), ("Dv", 0.1)]),
                t_eval: grid(0.5, 20),
                ic: IcSampler::Brusselator {
                    a_range: (0.5, 2.0),
                    b_range: (1.25, 5.0),
                    noise: 0.1,
                },
                shared_ic: true,
            },
        }
    }

    /// Full assignment from varying values, checking names.
    pub fn complete(&self, varying: &Assignment) -> Result<Assignment, SystemError> {
        let mut out = self.fixed.clone();
        for (k, v) in varying {
            if !self.params.contains(k) {
                return Err(SystemError::UnknownParameter {
                    system: self.name,
                    name: k.clone(),
                });
            }
            out.insert(k.clone(), *v);
        }
        if let Some(missing) = self.params.iter().find(|p| !out.contains_key(*p)) {
            return Err(SystemError::MissingParameter {
                system: self.name,
                name: missing.clone(),
            });
        }
        Ok(out)
    }
}

/// Training and adaptation environments (varying parameters only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentGrid {
    pub train: Vec<Assignment>,
    pub adapt: Vec<Assignment>,
}

impl EnvironmentGrid {
    pub fn validate(&self, spec: &SystemSpec) -> Result<(), SystemError> {
        if self.train.is_empty() {
            return Err(SystemError::InvalidGrid("no training environments".into()));
        }
        for a in self.train.iter().chain(&self.adapt) {
            spec.complete(a)?;
        }
        if let Some(dup) = self.adapt.iter().find(|a| self.train.contains(a)) {
            return Err(SystemError::InvalidGrid(format!(
                "adaptation environment {dup:?} also appears in training"
            )));
        }
        Ok(())
    }
}

fn product(a_name: &str, a: &[f64], b_name: &str, b: &[f64]) -> Vec<Assignment> {
    let mut out = Vec::new();
    for &x in a {
        for &y in b {
            out.push(assignment(&[(a_name, x), (b_name, y)]));
        }
    }
    out
}

fn single(name: &str, values: &[f64]) -> Vec<Assignment> {
    values.iter().map(|&v| assignment(&[(name, v)])).collect()
}

/// Environment grid for a system at the given scale.
pub fn preset_grid(system: SystemName, preset: Preset) -> EnvironmentGrid {
    match system {
        SystemName::Sp => {
            // endpoints of 25 evenly spaced values would put g = 10.25 in training
            let g = match preset {
                Preset::Desk => linspace(2.0, 24.0, 8),
                Preset::Paper => (0..25).map(|k| 2.0 + (k as f64 + 0.5) * 22.0 / 25.0).collect(),
            };
            EnvironmentGrid {
                train: single("g", &g),
                adapt: single("g", &[10.25, 14.75]),
            }
        }
        SystemName::Lv => EnvironmentGrid {
            train: product("beta", &[0.5, 0.75, 1.0], "delta", &[0.5, 0.75, 1.0]),
            adapt: product("beta", &[0.625, 1.125], "delta", &[0.625, 1.125]),
        },
        SystemName::Go => EnvironmentGrid {
            train: product("k1", &[100.0, 90.0, 80.0], "K1", &[1.0, 0.75, 0.5]),
            adapt: product("k1", &[85.0, 95.0], "K1", &[0.625, 0.875]),
        },
        SystemName::Sm => {
            let per_band = match preset {
                Preset::Desk => 3,
                Preset::Paper => 7,
            };
            let mut b = linspace(-1.0, -0.25, per_band);
            b.extend(linspace(-0.1, 0.1, per_band));
            b.extend(linspace(0.25, 1.0, per_band));
            EnvironmentGrid {
                train: single("b", &b),
                adapt: single("b", &[-1.25, -0.65, -0.05, 0.02, 0.6, 1.2]),
            }
        }
        SystemName::Bt => EnvironmentGrid {
            train: product("A", &[0.75, 1.0, 1.25], "B", &[3.25, 3.5, 3.75]),
            adapt: product("A", &[0.875, 1.125, 1.375], "B", &[3.125, 3.375, 3.625, 3.875]),
        },
    }
}

/// Trajectories per environment in each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
    pub ood_train: usize,
    pub ood_test: usize,
}

pub fn preset_counts(system: SystemName) -> SplitCounts {
    match system {
        SystemName::Sp | SystemName::Lv | SystemName::Bt => SplitCounts {
            train: 4,
            test: 32,
            ood_train: 1,
            ood_test: 32,
        },
        SystemName::Go => SplitCounts {
            train: 32,
            test: 32,
            ood_train: 1,
            ood_test: 32,
        },
        SystemName::Sm => SplitCounts {
            train: 4,
            test: 4,
            ood_train: 1,
            ood_test: 4,
        },
    }
}

fn get(p: &Assignment, k: &str) -> f64 {
    *p.get(k).expect("assignment completed before evaluation")
}

/// Exact right-hand side for a completed assignment.
pub fn true_field(spec: &SystemSpec, params: &Assignment, x: &Tensor) -> Result<Tensor, SystemError> {
    let params = spec.complete(params)?;
    if x.len() != spec.d {
        return Err(SystemError::StateSize {
            system: spec.name,
            expected: spec.d,
            got: x.len(),
        });
    }
    let mut out = vec![0.0; spec.d];
    field_into(spec.name, &params, x.data(), &mut out);
    Ok(Tensor::new(x.shape().to_vec(), out).expect("same length"))
}

fn field_into(name: SystemName, p: &Assignment, x: &[f64], out: &mut [f64]) {
    match name {
        SystemName::Sp => {
            let (g, l) = (get(p, "g"), get(p, "L"));
            out[0] = x[1];
            out[1] = -(g / l) * x[0].sin();
        }
        SystemName::Lv => {
            let (a, b, c, d) = (get(p, "alpha"), get(p, "beta"), get(p, "gamma"), get(p, "delta"));
            out[0] = a * x[0] - b * x[0] * x[1];
            out[1] = d * x[0] * x[1] - c * x[1];
        }
        SystemName::Go => {
            let [j0, k1, k2, k3, k4, k5, k6, big_k1, q, n, a, kappa, psi, k] = [
                "J0", "k1", "k2", "k3", "k4", "k5", "k6", "K1", "q", "N", "A", "kappa", "psi", "k",
            ]
            .map(|name| get(p, name));
            let s = x;
            let hill = k1 * s[0] * s[5] / (1.0 + (s[5] / big_k1).powf(q));
            let r2 = k2 * s[1] * (n - s[4]);
            let r3 = k3 * s[2] * (a - s[5]);
            let r4 = k4 * s[3] * s[4];
            let r6 = k6 * s[1] * s[4];
            let leak = kappa * (s[3] - s[6]);
            out[0] = j0 - hill;
            out[1] = 2.0 * hill - r2 - r6;
            out[2] = r2 - r3;
            out[3] = r3 - r4 - leak;
            out[4] = r2 - r4 - r6;
            out[5] = -2.0 * hill + 2.0 * r3 - k5 * s[5];
            out[6] = psi * leak - k * s[6];
        }
        SystemName::Sm => {
            let (a, b) = (get(p, "a"), get(p, "b"));
            let x2y = x[0] * x[0] * x[1];
            out[0] = -x[0] + a * x[1] + x2y;
            out[1] = b - a * x[1] - x2y;
        }
        SystemName::Bt => {
            let (a, b, du, dv) = (get(p, "A"), get(p, "B"), get(p, "Du"), get(p, "Dv"));
            let n = BT_GRID;
            let cells = n * n;
            let (u, v) = x.split_at(cells);
            let lap = |f: &[f64], i: usize, j: usize| {
                let at = |ii: usize, jj: usize| f[ii * n + jj];
                at((i + n - 1) % n, j) + at((i + 1) % n, j) + at(i, (j + n - 1) % n)
                    + at(i, (j + 1) % n)
                    - 4.0 * at(i, j)
            };
            for i in 0..n {
                for j in 0..n {
                    let c = i * n + j;
                    let u2v = u[c] * u[c] * v[c];
                    out[c] = du * lap(u, i, j) + a - (b + 1.0) * u[c] + u2v;
                    out[cells + c] = dv * lap(v, i, j) + b * u[c] - u2v;
                }
            }
        }
    }
}

/// One initial condition from the system's distribution.
pub fn sample_ic(spec: &SystemSpec, rng: &mut impl Rng) -> Tensor {
    match &spec.ic {
        IcSampler::Uniform { ranges } => {
            Tensor::vector(ranges.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect())
        }
        IcSampler::Brusselator {
            a_range,
            b_range,
            noise,
        } => {
            let a_bar = rng.random_range(a_range.0..a_range.1);
            let b_bar = rng.random_range(b_range.0..b_range.1);
            let cells = spec.d / 2;
            let mut x = vec![a_bar; spec.d];
            for v in &mut x[cells..] {
                let eta: f64 = StandardNormal.sample(rng);
                *v = b_bar / a_bar + noise * eta;
            }
            Tensor::vector(x)
        }
    }
}

/// Integrate one ground-truth trajectory; returns `[N, d]` row-major data.
pub fn simulate(
    spec: &SystemSpec,
    params: &Assignment,
    x0: &Tensor,
    solver: &IntegratorSpec,
) -> Result<Vec<f64>, OdeError> {
    let params = spec.complete(params).map_err(|e| OdeError::InvalidSpec(e.to_string()))?;
    let name = spec.name;
    let field = |x: &Tensor| -> Result<Tensor, DiffError> {
        let mut out = vec![0.0; x.len()];
        field_into(name, &params, x.data(), &mut out);
        Tensor::new(x.shape().to_vec(), out)
    };
    let traj = integrate(&field, x0, &spec.t_eval, solver)?;
    Ok(traj.into_iter().flat_map(Tensor::into_data).collect())
}

fn generate_split(
    spec: &SystemSpec,
    envs: &[Assignment],
    n_trajs: usize,
    split: &'static str,
    solver: &IntegratorSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Split, SystemError> {
    // draw every initial condition up front so parallel integration stays deterministic
    let ics: Vec<Vec<Tensor>> = if spec.shared_ic {
        let shared: Vec<Tensor> = (0..n_trajs).map(|_| sample_ic(spec, rng)).collect();
        vec![shared; envs.len()]
    } else {
        envs.iter()
            .map(|_| (0..n_trajs).map(|_| sample_ic(spec, rng)).collect())
            .collect()
    };
    let jobs: Vec<(usize, usize)> = (0..envs.len())
        .flat_map(|e| (0..n_trajs).map(move |i| (e, i)))
        .collect();
    let trajs: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(e, i)| {
            simulate(spec, &envs[e], &ics[e][i], solver).map_err(|source| SystemError::Integration {
                split,
                env: e,
                traj: i,
                source,
            })
        })
        .collect::<Result<_, _>>()?;
    let n = spec.t_eval.len();
    let x = Tensor::new(
        vec![envs.len(), n_trajs, n, spec.d],
        trajs.into_iter().flatten().collect(),
    )
    .expect("trajectory lengths follow t_eval");
    Ok(Split {
        t: spec.t_eval.clone(),
        x,
    })
}

/// Build the four dataset splits by integrating the true field.
pub fn generate_dataset(
    spec: &SystemSpec,
    grid: &EnvironmentGrid,
    counts: SplitCounts,
    solver: &IntegratorSpec,
    seed: u64,
) -> Result<TrajectoryDataset, SystemError> {
    grid.validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = generate_split(spec, &grid.train, counts.train, "train", solver, &mut rng)?;
    let test = generate_split(spec, &grid.train, counts.test, "test", solver, &mut rng)?;
    let ood_train = generate_split(spec, &grid.adapt, counts.ood_train, "ood_train", solver, &mut rng)?;
    let ood_test = generate_split(spec, &grid.adapt, counts.ood_test, "ood_test", solver, &mut rng)?;
    Ok(TrajectoryDataset {
        system: spec.name.to_string(),
        state_size: spec.d,
        train,
        test,
        ood_train,
        ood_test,
        metadata: crate::dataset::Metadata {
            seed,
            solver: *solver,
            train_envs: grid.train.clone(),
            ood_envs: grid.adapt.clone(),
            varying: spec.varying.clone(),
        },
    })
}

/// Add `eta · N(0, 1)` noise to every entry.
pub fn corrupt(x: &Tensor, eta: f64, rng: &mut impl Rng) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(rng);
            v + eta * z
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}
