//! Python bindings: datasets, training, adaptation and evaluation.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ncf_core::adapteval::{self, AdaptConfig};
use ncf_core::dataset::{self, TrajectoryDataset};
use ncf_core::metatrain::{self, ContextSet, TrainConfig};
use ncf_core::models::{self, Model, TaylorOrder, ThreeNetParams};
use ncf_core::odeint::IntegratorSpec;
use ncf_core::systems::{self, Preset, SystemName, SystemSpec};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Trajectory dataset with train/test/ood_train/ood_test splits.
#[pyclass(name = "Dataset", module = "ncflow", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: TrajectoryDataset,
}

#[pymethods]
impl PyDataset {
    /// Simulate a benchmark system on its preset grid.
    #[staticmethod]
    #[pyo3(signature = (system, preset = "desk", seed = 0))]
    fn generate(system: &str, preset: &str, seed: u64) -> PyResult<Self> {
        let name: SystemName = system.parse().map_err(value_err)?;
        let preset: Preset = preset.parse().map_err(value_err)?;
        let spec = SystemSpec::new(name);
        let grid = systems::preset_grid(name, preset);
        let counts = systems::preset_counts(name);
        let inner = systems::generate_dataset(&spec, &grid, counts, &IntegratorSpec::ground_truth(), seed)
            .map_err(runtime_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: dataset::load(&path).map_err(value_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        dataset::save(&self.inner, &path).map_err(runtime_err)
    }

    #[getter]
    fn system(&self) -> String {
        self.inner.system.clone()
    }

    #[getter]
    fn state_size(&self) -> usize {
        self.inner.state_size
    }

    /// `[envs, trajs, steps, d]` of a split.
    fn shape(&self, split: &str) -> PyResult<Vec<usize>> {
        Ok(self.split(split)?.x.shape().to_vec())
    }

    fn times(&self, split: &str) -> PyResult<Vec<f64>> {
        Ok(self.split(split)?.t.clone())
    }

    /// Row-major flat trajectory values of a split.
    fn values(&self, split: &str) -> PyResult<Vec<f64>> {
        Ok(self.split(split)?.x.data().to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(system={}, train={:?}, ood_test={:?})",
            self.inner.system,
            self.inner.train.x.shape(),
            self.inner.ood_test.x.shape()
        )
    }
}

impl PyDataset {
    fn split(&self, name: &str) -> PyResult<&dataset::Split> {
        self.inner
            .split(name)
            .ok_or_else(|| PyValueError::new_err(format!("unknown split `{name}`")))
    }
}

/// Trained context model with its training contexts.
#[pyclass(name = "Model", module = "ncflow", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    params: ThreeNetParams,
    contexts: ContextSet,
    config: TrainConfig,
    #[pyo3(get)]
    losses: Vec<f64>,
}

#[pymethods]
impl PyModel {
    #[getter]
    fn contexts(&self) -> Vec<Vec<f64>> {
        self.contexts.rows()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.params.num_params()
    }

    #[getter]
    fn fingerprint(&self) -> u64 {
        self.params.fingerprint()
    }

    fn config_toml(&self) -> PyResult<String> {
        self.config.to_toml().map_err(runtime_err)
    }

    /// `f(x, ξ)` at one state and context.
    fn vector_field(&self, x: Vec<f64>, xi: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = ncf_core::Tensor::vector(x);
        let xi = ncf_core::Tensor::vector(xi);
        Ok(models::vf_eval(&self.params, &x, &xi).map_err(value_err)?.into_data())
    }

    /// Fit contexts for the `ood_train` environments of `data`.
    #[pyo3(signature = (data, iterations = 1500, lr = None, bulk = false))]
    fn adapt(&self, data: &PyDataset, iterations: usize, lr: Option<f64>, bulk: bool) -> PyResult<Vec<Vec<f64>>> {
        let cfg = AdaptConfig {
            lr: lr.unwrap_or(self.config.lr_xi),
            iterations,
            tol: 1e-8,
            lambda1: self.config.lambda1,
            lambda2: 0.0,
            solver: self.config.solver,
        };
        let split = &data.inner.ood_train;
        let r = if bulk {
            adapteval::adapt_bulk(&self.params, split, &cfg)
        } else {
            adapteval::adapt_sequential(&self.params, split, &cfg)
        }
        .map_err(runtime_err)?;
        Ok(r.contexts.rows())
    }

    /// Per-environment MSE and overall (MSE, MAPE) on a split.
    #[pyo3(signature = (data, split, contexts = None))]
    fn evaluate(
        &self,
        data: &PyDataset,
        split: &str,
        contexts: Option<Vec<Vec<f64>>>,
    ) -> PyResult<(Vec<f64>, f64, Option<f64>)> {
        let ctx = match contexts {
            Some(rows) => ContextSet::from_rows(rows).map_err(value_err)?,
            None => self.contexts.clone(),
        };
        let m = adapteval::metrics(&self.params, &ctx, data.split(split)?, &self.config.solver).map_err(value_err)?;
        Ok((m.per_env.iter().map(|e| e.mse).collect(), m.mse, m.mape))
    }

    /// Candidate-ensemble (Rel. MSE %, MAPE %, CL %) with the given expansion contexts.
    #[pyo3(signature = (data, split, targets, expansion, order = 1))]
    fn uncertainty(
        &self,
        data: &PyDataset,
        split: &str,
        targets: Vec<Vec<f64>>,
        expansion: Vec<Vec<f64>>,
        order: u8,
    ) -> PyResult<(Option<f64>, Option<f64>, f64)> {
        let k = TaylorOrder::try_from(order).map_err(value_err)?;
        let t = ContextSet::from_rows(targets).map_err(value_err)?;
        let e = ContextSet::from_rows(expansion).map_err(value_err)?;
        let u = adapteval::uq_metrics(&self.params, &t, &e, data.split(split)?, k, &self.config.solver)
            .map_err(value_err)?;
        Ok((u.rel_mse, u.mape, u.cl))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        models::save_checkpoint(&Model::ThreeNet(self.params.clone()), &path).map_err(runtime_err)
    }
}

/// Default training configuration for a system, as TOML.
#[pyfunction]
fn default_config(system: &str) -> PyResult<String> {
    let name: SystemName = system.parse().map_err(value_err)?;
    ncf_core::cli::default_train_config(name).to_toml().map_err(runtime_err)
}

/// Train a context model; `config` is TOML text.
#[pyfunction]
#[pyo3(signature = (data, config = None, epochs = None))]
fn train(py: Python<'_>, data: &PyDataset, config: Option<&str>, epochs: Option<usize>) -> PyResult<PyModel> {
    let mut cfg = match config {
        Some(text) => TrainConfig::from_toml(text).map_err(value_err)?,
        None => ncf_core::cli::default_train_config(data.inner.system.parse().map_err(value_err)?),
    };
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let ds = data.inner.clone();
    let report = py.detach(|| metatrain::train(&ds, &cfg)).map_err(runtime_err)?;
    if let Some(msg) = &report.aborted {
        return Err(PyRuntimeError::new_err(format!("training aborted: {msg}")));
    }
    Ok(PyModel {
        losses: report.epochs.iter().map(|r| r.terms.total).collect(),
        params: report.params,
        contexts: report.contexts,
        config: cfg,
    })
}

/// Least-squares `c ≈ Qξ + q`; returns (Q, q, train MSE, held-out MSE).
#[pyfunction]
#[pyo3(signature = (contexts, params, heldout_contexts = None, heldout_params = None))]
#[allow(clippy::type_complexity)]
fn identify_linear(
    contexts: Vec<Vec<f64>>,
    params: Vec<Vec<f64>>,
    heldout_contexts: Option<Vec<Vec<f64>>>,
    heldout_params: Option<Vec<Vec<f64>>>,
) -> PyResult<(Vec<Vec<f64>>, Vec<f64>, f64, Option<f64>)> {
    let held = match (&heldout_contexts, &heldout_params) {
        (Some(x), Some(c)) => Some((&x[..], &c[..])),
        (None, None) => None,
        _ => return Err(PyValueError::new_err("pass both held-out contexts and parameters")),
    };
    let fit = adapteval::identify_linear(&contexts, &params, held).map_err(value_err)?;
    Ok((fit.q_matrix, fit.q_offset, fit.train_mse, fit.heldout_mse))
}

#[pymodule]
fn ncflow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(identify_linear, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
