//! `ncf` command line: dataset generation, training, adaptation and evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapteval::{self, AdaptConfig, EvalError};
use crate::dataset::{self, DatasetError, Split, TrajectoryDataset};
use crate::metatrain::{
    self, Algorithm, BaselineConfig, BaselineMode, ContextSet, LrDrop, MetaError, ModelConfig, PoolKind, PoolStrategy,
    TrainConfig,
};
use crate::models::{self, ContextFreeParams, Model, ModelError, TaylorOrder, ThreeNetParams};
use crate::odeint::{IntegratorSpec, OdeError};
use crate::systems::{self, EnvironmentGrid, Preset, SplitCounts, SystemError, SystemName, SystemSpec};

pub const GIT_DESCRIBE: &str = env!("NCF_GIT_DESCRIBE");

const RUN_FILE: &str = "run.json";
const MODEL_DIR: &str = "model";
const CONTEXTS_FILE: &str = "contexts.json";
const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<MetaError> for CliError {
    fn from(e: MetaError) -> Self {
        match e {
            MetaError::Ode(_) | MetaError::Integration { .. } => CliError::Numerical(e.to_string()),
            MetaError::Io(_) => CliError::Io(e.to_string()),
            MetaError::Model(ModelError::Io(_)) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Meta(m) => m.into(),
            EvalError::Invalid(m) => CliError::Validation(m),
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<SystemError> for CliError {
    fn from(e: SystemError) -> Self {
        match e {
            SystemError::Integration { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<OdeError> for CliError {
    fn from(e: OdeError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

// ---------------------------------------------------------------------------
// arguments

#[derive(Debug, Parser)]
#[command(name = "ncf", version = GIT_DESCRIBE, about = "Neural context flows for parameter-varying ODEs")]
pub struct Cli {
    /// Seed override; also read from NCF_SEED.
    #[arg(long, global = true, env = "NCF_SEED")]
    pub seed: Option<u64>,
    /// Worker threads for trajectory and environment evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Ncf,
    Ofa,
    Ope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AdaptMode {
    Sequential,
    Bulk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    OodTrain,
    OodTest,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Test => "test",
            SplitArg::OodTrain => "ood_train",
            SplitArg::OodTest => "ood_test",
        }
    }

    fn is_ood(self) -> bool {
        matches!(self, SplitArg::OodTrain | SplitArg::OodTest)
    }
}

/// Which contexts serve as expansion points for uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExpansionSet {
    /// Training contexts only (p = m).
    Train,
    /// Training contexts plus the evaluated split's contexts.
    TrainAndTargets,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Series {
    Loss,
    Scatter,
    Heatmap,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a benchmark system and write a dataset.
    Generate {
        #[arg(long)]
        system: SystemName,
        #[arg(long, value_enum, default_value = "desk")]
        preset: PresetArg,
        /// TOML file with `train` and `adapt` environment lists; replaces the preset grid.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Override trajectories per environment: train,test,ood_train,ood_test.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a flat CSV of every split.
        #[arg(long)]
        csv: bool,
    },
    /// Meta-train a model, or fit a context-free baseline.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// TOML training configuration; defaults to the system's preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "ncf")]
        model: ModelKind,
        /// Cap the number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit contexts for new environments with frozen weights.
    Adapt {
        #[arg(long)]
        data: PathBuf,
        /// Output directory of `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "sequential")]
        mode: AdaptMode,
        /// Adapt only the first N environments.
        #[arg(long)]
        envs: Option<usize>,
        #[arg(long, value_enum, default_value = "ood-train")]
        split: SplitArg,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forecast a split and report MSE and MAPE per environment.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Contexts for the split's environments (required for context models).
        #[arg(long)]
        contexts: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Candidate-ensemble uncertainty on a split.
    Uq {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Contexts for the split's environments.
        #[arg(long)]
        contexts: PathBuf,
        /// Explicit expansion points; overrides `--expansion-set`.
        #[arg(long)]
        expansion: Option<PathBuf>,
        /// Defaults to `train` on in-domain splits and `train-and-targets` on OoD splits.
        #[arg(long, value_enum)]
        expansion_set: Option<ExpansionSet>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Taylor order; defaults to the training order.
        #[arg(long)]
        order: Option<u8>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Least-squares map from contexts to the physical parameters.
    Identify {
        #[arg(long)]
        data: PathBuf,
        /// Training-environment contexts.
        #[arg(long)]
        contexts: PathBuf,
        /// Adapted contexts of the OoD environments, used as a held-out set.
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn report directories into plot-ready CSV series.
    ExportPlots {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, value_delimiter = ',', default_values = ["loss", "scatter", "heatmap"])]
        series: Vec<Series>,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Train { .. } => "train",
            Command::Adapt { .. } => "adapt",
            Command::Eval { .. } => "eval",
            Command::Uq { .. } => "uq",
            Command::Identify { .. } => "identify",
            Command::ExportPlots { .. } => "export-plots",
        }
    }
}

// ---------------------------------------------------------------------------
// manifests and presets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub git_describe: String,
    pub args: Vec<String>,
}

impl RunManifest {
    fn write(&self) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Io(e.to_string()))?;
        fs::write(self.out.join(RUN_FILE), text)?;
        Ok(())
    }
}

/// Desk-scale NCF defaults per system.
pub fn default_train_config(system: SystemName) -> TrainConfig {
    let base = TrainConfig {
        seed: 0,
        algorithm: Algorithm::Ordinary,
        taylor_order: TaylorOrder::One,
        pool: PoolStrategy {
            kind: PoolKind::RandomAll,
            size: 2,
        },
        lambda1: 1e-3,
        lambda2: 0.0,
        lr_theta: 3e-3,
        lr_xi: 3e-3,
        lr_schedule: vec![LrDrop {
            epoch: 1000,
            factor: 0.1,
        }],
        beta: 10.0,
        epochs: 1500,
        inner_theta: 1,
        inner_xi: 1,
        inner_tol: 1e-6,
        solver: IntegratorSpec::rk4(0.1),
        model: ModelConfig::compact(2, 16),
        validate_every: 50,
    };
    match system {
        SystemName::Sp => base,
        // β = 100 holds every Adam step at its anchor at this learning rate
        SystemName::Lv => TrainConfig {
            algorithm: Algorithm::Proximal,
            taylor_order: TaylorOrder::Two,
            lr_theta: 1e-2,
            lr_xi: 1e-2,
            beta: 1.0,
            inner_theta: 2,
            inner_xi: 2,
            solver: IntegratorSpec::rk4(0.25),
            ..base
        },
        SystemName::Go => TrainConfig {
            solver: IntegratorSpec::rk4(0.01),
            model: ModelConfig::compact(2, 48),
            ..base
        },
        SystemName::Sm => TrainConfig {
            solver: IntegratorSpec::rk4(0.5),
            ..base
        },
        SystemName::Bt => TrainConfig {
            solver: IntegratorSpec::rk4(0.05),
            model: ModelConfig::compact(2, 64),
            ..base
        },
    }
}

/// Context-free baseline defaults matching a training configuration.
pub fn default_baseline_config(train: &TrainConfig) -> BaselineConfig {
    let m = &train.model;
    BaselineConfig {
        seed: train.seed,
        state_hidden: m.state_hidden.clone(),
        state_out: m.state_out,
        main_hidden: m.main_hidden.clone(),
        activation: m.activation,
        lr: train.lr_theta,
        epochs: train.epochs,
        solver: train.solver,
        validate_every: train.validate_every,
    }
}

pub fn default_adapt_config(train: &TrainConfig) -> AdaptConfig {
    AdaptConfig {
        lr: 1e-2,
        iterations: 1500,
        tol: 1e-8,
        lambda1: train.lambda1,
        lambda2: 0.0,
        solver: train.solver,
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

fn load_train_config(checkpoint: &Path) -> Result<TrainConfig> {
    Ok(TrainConfig::from_toml(&read_to_string(&checkpoint.join(CONFIG_FILE))?)?)
}

fn load_three_net(checkpoint: &Path) -> Result<ThreeNetParams> {
    match models::load_checkpoint(&checkpoint.join(MODEL_DIR))? {
        Model::ThreeNet(p) => Ok(p),
        Model::ContextFree(_) => Err(invalid(format!(
            "{} holds a context-free baseline, not a context model",
            checkpoint.display()
        ))),
    }
}

fn split_of(ds: &TrajectoryDataset, s: SplitArg) -> &Split {
    ds.split(s.name()).expect("split names are fixed")
}

fn env_params(ds: &TrajectoryDataset, s: SplitArg) -> Vec<Vec<f64>> {
    let envs = if s.is_ood() { &ds.metadata.ood_envs } else { &ds.metadata.train_envs };
    envs.iter()
        .map(|a| ds.metadata.varying.iter().map(|k| a.get(k).copied().unwrap_or(f64::NAN)).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// commands

fn cmd_generate(
    system: SystemName,
    preset: PresetArg,
    grid: Option<&Path>,
    counts: Option<&[usize]>,
    out: &Path,
    csv: bool,
    seed: u64,
) -> Result<TrajectoryDataset> {
    let spec = SystemSpec::new(system);
    let grid = match grid {
        Some(path) => toml::from_str::<EnvironmentGrid>(&read_to_string(path)?)
            .map_err(|e| invalid(format!("{}: {e}", path.display())))?,
        None => systems::preset_grid(
            system,
            match preset {
                PresetArg::Desk => Preset::Desk,
                PresetArg::Paper => Preset::Paper,
            },
        ),
    };
    let counts = match counts {
        Some(&[train, test, ood_train, ood_test]) => SplitCounts {
            train,
            test,
            ood_train,
            ood_test,
        },
        Some(_) => return Err(invalid("--counts takes four values")),
        None => systems::preset_counts(system),
    };
    let ds = systems::generate_dataset(&spec, &grid, counts, &IntegratorSpec::ground_truth(), seed)?;
    dataset::save(&ds, out)?;
    if csv {
        dataset::export_csv(&ds, &out.join("trajectories.csv"))?;
    }
    println!("{} dataset written to {}", ds.system, out.display());
    for (name, s) in ds.splits() {
        println!("  {name:<9} x {:?}, {} time points", s.x.shape(), s.t.len());
    }
    println!("  train envs: {}", describe_envs(&ds.metadata.train_envs));
    println!("  ood envs:   {}", describe_envs(&ds.metadata.ood_envs));
    Ok(ds)
}

fn describe_envs(envs: &[systems::Assignment]) -> String {
    envs.iter()
        .map(|a| {
            let parts: Vec<String> = a.iter().map(|(k, v)| format!("{k}={v}")).collect();
            format!("({})", parts.join(", "))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn cmd_train(
    data: &Path,
    config: Option<&Path>,
    model: ModelKind,
    epochs: Option<usize>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let ds = dataset::load(data)?;
    let system: SystemName = ds.system.parse()?;
    fs::create_dir_all(out)?;
    let mut cfg = match config {
        Some(p) if model == ModelKind::Ncf => TrainConfig::from_toml(&read_to_string(p)?)?,
        _ => default_train_config(system),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    match model {
        ModelKind::Ncf => {
            cfg.validate()?;
            fs::write(out.join(CONFIG_FILE), cfg.to_toml()?)?;
            let report = metatrain::train(&ds, &cfg)?;
            models::save_checkpoint(&Model::ThreeNet(report.params.clone()), &out.join(MODEL_DIR))?;
            metatrain::save_contexts(&report.contexts, &out.join(CONTEXTS_FILE))?;
            fs::write(out.join("report.json"), report.to_json()?)?;
            report.write_loss_csv(&out.join("loss.csv"))?;
            if let Some(last) = report.epochs.last() {
                println!("trained {} epochs, final loss {:.4e}", last.epoch + 1, last.terms.total);
            }
            if let Some(msg) = report.aborted {
                return Err(CliError::Numerical(format!("training aborted: {msg}")));
            }
        }
        ModelKind::Ofa | ModelKind::Ope => {
            let mut bcfg = match config {
                Some(p) => toml::from_str::<BaselineConfig>(&read_to_string(p)?)
                    .map_err(|e| invalid(format!("{}: {e}", p.display())))?,
                None => default_baseline_config(&cfg),
            };
            if let Some(s) = seed {
                bcfg.seed = s;
            }
            if let Some(e) = epochs {
                bcfg.epochs = e;
            }
            fs::write(
                out.join(CONFIG_FILE),
                toml::to_string(&bcfg).map_err(|e| CliError::Io(e.to_string()))?,
            )?;
            let mode = if model == ModelKind::Ofa { BaselineMode::Ofa } else { BaselineMode::Ope };
            let report = metatrain::train_baseline(&ds, mode, &bcfg)?;
            write_baseline(&report, out)?;
            println!("baseline train MSE per environment: {:?}", report.train_mse);
            if let Some(msg) = report.aborted {
                return Err(CliError::Numerical(format!("baseline training aborted: {msg}")));
            }
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct BaselineJson {
    mode: BaselineMode,
    models: usize,
    train_mse: Vec<f64>,
    wall_seconds: f64,
    aborted: Option<String>,
}

fn write_baseline(report: &metatrain::BaselineReport, out: &Path) -> Result<()> {
    for (i, m) in report.models.iter().enumerate() {
        let dir = if report.models.len() == 1 {
            out.join(MODEL_DIR)
        } else {
            out.join(format!("{MODEL_DIR}_{i}"))
        };
        models::save_checkpoint(&Model::ContextFree(m.clone()), &dir)?;
    }
    write_json(
        &out.join("baseline.json"),
        &BaselineJson {
            mode: report.mode,
            models: report.models.len(),
            train_mse: report.train_mse.clone(),
            wall_seconds: report.wall_seconds,
            aborted: report.aborted.clone(),
        },
    )?;
    let mut w = csv::Writer::from_path(out.join("loss.csv")).map_err(|e| CliError::Io(e.to_string()))?;
    let epochs = report.curves.iter().map(Vec::len).max().unwrap_or(0);
    let io = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(["epoch", "loss"]).map_err(io)?;
    for k in 0..epochs {
        let vals: Vec<f64> = report.curves.iter().filter_map(|c| c.get(k).copied()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        w.write_record([k.to_string(), mean.to_string()]).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

fn load_baseline(checkpoint: &Path) -> Result<Option<Vec<ContextFreeParams>>> {
    let path = checkpoint.join("baseline.json");
    if !path.exists() {
        return Ok(None);
    }
    let meta: BaselineJson =
        serde_json::from_str(&read_to_string(&path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for i in 0..meta.models {
        let dir = if meta.models == 1 {
            checkpoint.join(MODEL_DIR)
        } else {
            checkpoint.join(format!("{MODEL_DIR}_{i}"))
        };
        match models::load_checkpoint(&dir)? {
            Model::ContextFree(p) => out.push(p),
            Model::ThreeNet(_) => return Err(invalid(format!("{} is not a baseline model", dir.display()))),
        }
    }
    Ok(Some(out))
}

#[allow(clippy::too_many_arguments)]
fn cmd_adapt(
    data: &Path,
    checkpoint: &Path,
    mode: AdaptMode,
    envs: Option<usize>,
    split: SplitArg,
    overrides: (Option<usize>, Option<f64>, Option<f64>),
    out: &Path,
) -> Result<ContextSet> {
    let ds = dataset::load(data)?;
    let params = load_three_net(checkpoint)?;
    let tcfg = load_train_config(checkpoint)?;
    let mut cfg = default_adapt_config(&tcfg);
    if let Some(i) = overrides.0 {
        cfg.iterations = i;
    }
    if let Some(lr) = overrides.1 {
        cfg.lr = lr;
    }
    if let Some(tol) = overrides.2 {
        cfg.tol = tol;
    }
    let full = split_of(&ds, split);
    let sub = match envs {
        Some(0) => return Err(invalid("--envs must be at least 1")),
        Some(n) if n > full.n_envs() => {
            return Err(invalid(format!("--envs {n} but the split has {} environments", full.n_envs())))
        }
        Some(n) => full.select_envs(&(0..n).collect::<Vec<_>>()),
        None => full.clone(),
    };
    let report = match mode {
        AdaptMode::Sequential => adapteval::adapt_sequential(&params, &sub, &cfg)?,
        AdaptMode::Bulk => adapteval::adapt_bulk(&params, &sub, &cfg)?,
    };
    fs::create_dir_all(out)?;
    metatrain::save_contexts(&report.contexts, &out.join(CONTEXTS_FILE))?;
    report.write_csv(&out.join("adapt_curve.csv"))?;
    write_json(
        &out.join("adapt.json"),
        &serde_json::json!({
            "config": cfg,
            "mode": format!("{mode:?}").to_lowercase(),
            "final_losses": report.final_losses(),
            "failures": report.failures,
            "wall_seconds": report.wall_seconds,
        }),
    )?;
    let failures: Vec<&String> = report.failures.iter().flatten().collect();
    if !failures.is_empty() {
        return Err(CliError::Numerical(format!(
            "adaptation failed: {}",
            failures.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("; ")
        )));
    }
    println!("adapted {} environments", report.contexts.m());
    Ok(report.contexts)
}

fn cmd_eval(data: &Path, checkpoint: &Path, contexts: Option<&Path>, split: SplitArg, out: &Path) -> Result<adapteval::Metrics> {
    let ds = dataset::load(data)?;
    let s = split_of(&ds, split);
    let (metrics, solver) = if let Some(baseline) = load_baseline(checkpoint)? {
        let bcfg: BaselineConfig = toml::from_str(&read_to_string(&checkpoint.join(CONFIG_FILE))?)
            .map_err(|e| invalid(e.to_string()))?;
        let pred = if baseline.len() == 1 {
            metatrain::forecast_context_free(&baseline[0], s, &bcfg.solver)?
        } else {
            if baseline.len() != s.n_envs() || split.is_ood() {
                return Err(invalid("per-environment baselines only evaluate on their training environments"));
            }
            let parts: Vec<crate::Tensor> = (0..s.n_envs())
                .map(|e| metatrain::forecast_context_free(&baseline[e], &s.select_envs(&[e]), &bcfg.solver))
                .collect::<std::result::Result<_, _>>()?;
            crate::Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0).map_err(MetaError::from)?
        };
        (adapteval::metrics_of(&pred, &s.x)?, bcfg.solver)
    } else {
        let path = contexts.ok_or_else(|| invalid("--contexts is required to evaluate a context model"))?;
        let ctx = metatrain::load_contexts(path)?;
        let params = load_three_net(checkpoint)?;
        let tcfg = load_train_config(checkpoint)?;
        (adapteval::metrics(&params, &ctx, s, &tcfg.solver)?, tcfg.solver)
    };
    fs::create_dir_all(out)?;
    adapteval::write_metrics_csv(&metrics, &out.join("metrics.csv"))?;
    write_json(
        &out.join("metrics.json"),
        &serde_json::json!({
            "split": split.name(),
            "solver": solver,
            "varying": ds.metadata.varying,
            "env_params": env_params(&ds, split),
            "metrics": metrics,
        }),
    )?;
    println!("{} MSE {:.4e}, MAPE {:?}", split.name(), metrics.mse, metrics.mape);
    Ok(metrics)
}

#[allow(clippy::too_many_arguments)]
fn cmd_uq(
    data: &Path,
    checkpoint: &Path,
    contexts: &Path,
    expansion: (Option<&Path>, ExpansionSet),
    split: SplitArg,
    order: Option<u8>,
    out: &Path,
) -> Result<adapteval::UqSummary> {
    let ds = dataset::load(data)?;
    let s = split_of(&ds, split);
    let params = load_three_net(checkpoint)?;
    let tcfg = load_train_config(checkpoint)?;
    let targets = metatrain::load_contexts(contexts)?;
    let expansion = match expansion {
        (Some(p), _) => metatrain::load_contexts(p)?,
        (None, set) => {
            let train = metatrain::load_contexts(&checkpoint.join(CONTEXTS_FILE))?;
            match set {
                ExpansionSet::Train => train,
                ExpansionSet::TrainAndTargets => {
                    let mut rows = train.rows();
                    rows.extend(targets.rows());
                    ContextSet::from_rows(rows).map_err(invalid)?
                }
            }
        }
    };
    let k = match order {
        Some(k) => TaylorOrder::try_from(k).map_err(|e| invalid(e.to_string()))?,
        None => tcfg.taylor_order,
    };
    let uq = adapteval::uq_metrics(&params, &targets, &expansion, s, k, &tcfg.solver)?;
    fs::create_dir_all(out)?;
    adapteval::write_uq_csv(&uq, &s.x, &out.join("uq.csv"))?;
    write_json(
        &out.join("uq.json"),
        &serde_json::json!({
            "split": split.name(),
            "taylor_order": k,
            "candidates": uq.candidates,
            "rel_mse": uq.rel_mse,
            "mape": uq.mape,
            "cl": uq.cl,
        }),
    )?;
    println!(
        "{}: Rel. MSE {:?} %, MAPE {:?} %, CL {:.2} % over {} candidates",
        split.name(),
        uq.rel_mse,
        uq.mape,
        uq.cl,
        uq.candidates
    );
    Ok(uq)
}

fn cmd_identify(data: &Path, contexts: &Path, heldout: Option<&Path>, out: &Path) -> Result<adapteval::LinearFit> {
    let ds = dataset::load(data)?;
    let train = metatrain::load_contexts(contexts)?.rows();
    let c_train = env_params(&ds, SplitArg::Train);
    let held = match heldout {
        Some(p) => Some((metatrain::load_contexts(p)?.rows(), env_params(&ds, SplitArg::OodTrain))),
        None => None,
    };
    let fit = adapteval::identify_linear(&train, &c_train, held.as_ref().map(|(x, c)| (&x[..], &c[..])))?;
    fs::create_dir_all(out)?;
    write_json(
        &out.join("identification.json"),
        &serde_json::json!({ "parameters": ds.metadata.varying, "fit": fit }),
    )?;
    println!("train MSE {:.4e}, held-out MSE {:?}", fit.train_mse, fit.heldout_mse);
    Ok(fit)
}

fn cmd_export_plots(report: &Path, series: &[Series], out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut missing = Vec::new();
    for s in series {
        let (src, dst) = match s {
            Series::Loss => ("loss.csv", "loss_curve.csv"),
            Series::Scatter => (CONTEXTS_FILE, "context_scatter.csv"),
            Series::Heatmap => ("metrics.json", "error_heatmap.csv"),
        };
        let src = report.join(src);
        if !src.exists() {
            missing.push(src.display().to_string());
            continue;
        }
        let dst = out.join(dst);
        match s {
            Series::Loss => export_loss(&src, &dst)?,
            Series::Scatter => export_scatter(&src, &dst)?,
            Series::Heatmap => export_heatmap(&src, &dst)?,
        }
        written.push(dst);
    }
    if !missing.is_empty() {
        return Err(invalid(format!("missing series: {}", missing.join(", "))));
    }
    Ok(written)
}

fn csv_io(e: csv::Error) -> CliError {
    CliError::Io(e.to_string())
}

fn export_loss(src: &Path, dst: &Path) -> Result<()> {
    let mut r = csv::Reader::from_path(src).map_err(csv_io)?;
    let headers = r.headers().map_err(csv_io)?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let loss = col("total").or_else(|| col("loss")).ok_or_else(|| invalid("loss.csv has no loss column"))?;
    let epoch = col("epoch").ok_or_else(|| invalid("loss.csv has no epoch column"))?;
    let val = col("val_mse");
    let mut w = csv::Writer::from_path(dst).map_err(csv_io)?;
    w.write_record(["epoch", "loss", "val_mse"]).map_err(csv_io)?;
    for rec in r.records() {
        let rec = rec.map_err(csv_io)?;
        let v = val.and_then(|i| rec.get(i)).unwrap_or("");
        w.write_record([&rec[epoch], &rec[loss], v]).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn export_scatter(src: &Path, dst: &Path) -> Result<()> {
    let ctx = metatrain::load_contexts(src)?;
    let mut w = csv::Writer::from_path(dst).map_err(csv_io)?;
    w.write_record(["env", "xi1", "xi2"]).map_err(csv_io)?;
    for e in 0..ctx.m() {
        let row = ctx.row(e);
        let second = row.get(1).map(|v| v.to_string()).unwrap_or_default();
        w.write_record([e.to_string(), row[0].to_string(), second]).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct MetricsJson {
    varying: Vec<String>,
    env_params: Vec<Vec<f64>>,
    metrics: adapteval::Metrics,
}

fn export_heatmap(src: &Path, dst: &Path) -> Result<()> {
    let m: MetricsJson =
        serde_json::from_str(&read_to_string(src)?).map_err(|e| invalid(format!("{}: {e}", src.display())))?;
    let mut w = csv::Writer::from_path(dst).map_err(csv_io)?;
    let mut header = vec!["env".to_string()];
    header.extend(m.varying.iter().cloned());
    header.extend(["mse".to_string(), "mape".to_string()]);
    w.write_record(&header).map_err(csv_io)?;
    for (e, (p, r)) in m.env_params.iter().zip(&m.metrics.per_env).enumerate() {
        let mut rec = vec![e.to_string()];
        rec.extend(p.iter().map(|v| v.to_string()));
        rec.push(r.mse.to_string());
        rec.push(r.mape.map(|v| v.to_string()).unwrap_or_default());
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// entry points

fn manifest(cli: &Cli, args: &[String]) -> RunManifest {
    let (config, dataset, out) = match &cli.command {
        Command::Generate { out, .. } => (None, None, out.clone()),
        Command::Train { data, config, out, .. } => (config.clone(), Some(data.clone()), out.clone()),
        Command::Adapt { data, out, .. }
        | Command::Eval { data, out, .. }
        | Command::Uq { data, out, .. }
        | Command::Identify { data, out, .. } => (None, Some(data.clone()), out.clone()),
        Command::ExportPlots { out, .. } => (None, None, out.clone()),
    };
    RunManifest {
        subcommand: cli.command.name().to_string(),
        config,
        dataset,
        out,
        seed: cli.seed,
        git_describe: GIT_DESCRIBE.to_string(),
        args: args.to_vec(),
    }
}

/// Run a parsed command line.
pub fn run(cli: &Cli, args: &[String]) -> Result<()> {
    if cli.jobs == 0 {
        return Err(invalid("--jobs must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| CliError::Io(e.to_string()))?;
    let m = manifest(cli, args);
    let result = pool.install(|| dispatch(cli));
    // the dataset directory owns its own manifest; other outputs get the run record
    if !matches!(cli.command, Command::Generate { .. }) || result.is_ok() {
        m.write()?;
    }
    result
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate {
            system,
            preset,
            grid,
            counts,
            out,
            csv,
        } => cmd_generate(
            *system,
            *preset,
            grid.as_deref(),
            counts.as_deref(),
            out,
            *csv,
            cli.seed.unwrap_or(0),
        )
        .map(drop),
        Command::Train {
            data,
            config,
            model,
            epochs,
            out,
        } => cmd_train(data, config.as_deref(), *model, *epochs, out, cli.seed),
        Command::Adapt {
            data,
            checkpoint,
            mode,
            envs,
            split,
            iterations,
            lr,
            tol,
            out,
        } => cmd_adapt(data, checkpoint, *mode, *envs, *split, (*iterations, *lr, *tol), out).map(drop),
        Command::Eval {
            data,
            checkpoint,
            contexts,
            split,
            out,
        } => cmd_eval(data, checkpoint, contexts.as_deref(), *split, out).map(drop),
        Command::Uq {
            data,
            checkpoint,
            contexts,
            expansion,
            expansion_set,
            split,
            order,
            out,
        } => {
            let set = expansion_set.unwrap_or(if split.is_ood() {
                ExpansionSet::TrainAndTargets
            } else {
                ExpansionSet::Train
            });
            cmd_uq(data, checkpoint, contexts, (expansion.as_deref(), set), *split, *order, out).map(drop)
        }
        Command::Identify {
            data,
            contexts,
            heldout,
            out,
        } => cmd_identify(data, contexts, heldout.as_deref(), out).map(drop),
        Command::ExportPlots { report, series, out } => {
            let files = cmd_export_plots(report, series, out)?;
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
    }
}

/// Parse the process arguments, run, and map failures to exit codes.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().collect();
    let cli = Cli::parse_from(&args);
    match run(&cli, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests;
