//! Trajectory datasets: four splits of `[envs, trajs, steps, d]` arrays.
//!
//! On disk a dataset is a directory holding `manifest.json` plus one raw
//! little-endian f64 blob per array, each guarded by a CRC-64.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::odeint::IntegratorSpec;
use crate::systems::Assignment;
use crate::tensor::Tensor;

pub const DATASET_FORMAT: &str = "ncf-dataset";
pub const MANIFEST_FILE: &str = "manifest.json";
const DTYPE: &str = "f64le";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("unsupported dataset: {0}")]
    Unsupported(String),
    #[error("{file}: blob has {got} bytes, manifest expects {expected}")]
    SizeMismatch {
        file: String,
        expected: usize,
        got: usize,
    },
    #[error("{file}: checksum mismatch (manifest {expected}, file {got})")]
    ChecksumMismatch {
        file: String,
        expected: String,
        got: String,
    },
    #[error("dataset failed validation: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One split: shared time grid and `x` of shape `[envs, trajs, steps, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub t: Vec<f64>,
    pub x: Tensor,
}

impl Split {
    pub fn n_envs(&self) -> usize {
        self.x.shape().first().copied().unwrap_or(0)
    }
    pub fn n_trajs(&self) -> usize {
        self.x.shape().get(1).copied().unwrap_or(0)
    }
    pub fn n_steps(&self) -> usize {
        self.x.shape().get(2).copied().unwrap_or(0)
    }
    pub fn state_size(&self) -> usize {
        self.x.shape().get(3).copied().unwrap_or(0)
    }

    /// All trajectories of environment `e`, shape `[trajs, steps, d]`.
    pub fn env(&self, e: usize) -> Tensor {
        let per = self.n_trajs() * self.n_steps() * self.state_size();
        Tensor::new(
            vec![self.n_trajs(), self.n_steps(), self.state_size()],
            self.x.data()[e * per..(e + 1) * per].to_vec(),
        )
        .expect("sized from shape")
    }

    /// State at `(env, traj, step)`.
    pub fn state(&self, e: usize, i: usize, k: usize) -> &[f64] {
        let d = self.state_size();
        let start = ((e * self.n_trajs() + i) * self.n_steps() + k) * d;
        &self.x.data()[start..start + d]
    }

    /// Keep only the listed environments.
    pub fn select_envs(&self, envs: &[usize]) -> Split {
        let mut data = Vec::new();
        for &e in envs {
            data.extend_from_slice(self.env(e).data());
        }
        let mut shape = self.x.shape().to_vec();
        shape[0] = envs.len();
        Split {
            t: self.t.clone(),
            x: Tensor::new(shape, data).expect("sized from shape"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub seed: u64,
    pub solver: IntegratorSpec,
    /// Varying-parameter values of the train/test environments.
    pub train_envs: Vec<Assignment>,
    /// Varying-parameter values of the adaptation environments.
    pub ood_envs: Vec<Assignment>,
    pub varying: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub system: String,
    pub state_size: usize,
    pub train: Split,
    pub test: Split,
    pub ood_train: Split,
    pub ood_test: Split,
    pub metadata: Metadata,
}

pub const SPLIT_NAMES: [&str; 4] = ["train", "test", "ood_train", "ood_test"];

impl TrajectoryDataset {
    pub fn splits(&self) -> [(&'static str, &Split); 4] {
        [
            ("train", &self.train),
            ("test", &self.test),
            ("ood_train", &self.ood_train),
            ("ood_test", &self.ood_test),
        ]
    }

    pub fn split(&self, name: &str) -> Option<&Split> {
        self.splits().into_iter().find(|(n, _)| *n == name).map(|(_, s)| s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub split: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.split, self.message)
    }
}

/// Structural and numerical checks; empty when the dataset is well formed.
pub fn validate(ds: &TrajectoryDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |split: &str, message: String| {
        out.push(Violation {
            split: split.to_string(),
            message,
        })
    };
    for (name, s) in ds.splits() {
        if s.x.ndim() != 4 {
            push(name, format!("x has {} axes, expected 4", s.x.ndim()));
            continue;
        }
        if s.state_size() != ds.state_size {
            push(
                name,
                format!("state size {} differs from {}", s.state_size(), ds.state_size),
            );
        }
        if s.n_envs() == 0 || s.n_trajs() == 0 {
            push(name, "no trajectories".into());
        }
        if s.t.len() != s.n_steps() {
            push(
                name,
                format!("t has {} points but x has {} steps", s.t.len(), s.n_steps()),
            );
        }
        if let Some(k) = s.t.iter().position(|v| !v.is_finite()) {
            push(name, format!("t[{k}] is not finite"));
        } else if let Some(k) = s.t.windows(2).position(|w| w[1] <= w[0]) {
            push(
                name,
                format!("t is not strictly increasing at index {}", k + 1),
            );
        }
        if let Some(k) = s.x.data().iter().position(|v| !v.is_finite()) {
            push(name, format!("x contains a non-finite value at flat index {k}"));
        }
    }
    let envs = [
        ("train", ds.train.n_envs(), ds.metadata.train_envs.len()),
        ("test", ds.test.n_envs(), ds.metadata.train_envs.len()),
        ("ood_train", ds.ood_train.n_envs(), ds.metadata.ood_envs.len()),
        ("ood_test", ds.ood_test.n_envs(), ds.metadata.ood_envs.len()),
    ];
    for (name, got, expected) in envs {
        if got != expected {
            push(
                name,
                format!("{got} environments but metadata lists {expected}"),
            );
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobEntry {
    file: String,
    shape: Vec<usize>,
    crc64: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    version: u32,
    dtype: String,
    system: String,
    state_size: usize,
    metadata: Metadata,
    /// `{split}.t` and `{split}.x` blobs, keyed by name.
    blobs: BTreeMap<String, BlobEntry>,
}

fn to_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn checksum(bytes: &[u8]) -> String {
    format!("{:016x}", crate::CRC64.checksum(bytes))
}

/// Write the dataset under `dir` (created if missing).
pub fn save(ds: &TrajectoryDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut blobs = BTreeMap::new();
    for (name, s) in ds.splits() {
        for (suffix, shape, data) in [
            ("t", vec![s.t.len()], s.t.as_slice()),
            ("x", s.x.shape().to_vec(), s.x.data()),
        ] {
            let file = format!("{name}_{suffix}.bin");
            let bytes = to_bytes(data);
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(io_err(&path))?;
            blobs.insert(
                format!("{name}.{suffix}"),
                BlobEntry {
                    file,
                    shape,
                    crc64: checksum(&bytes),
                },
            );
        }
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: 1,
        dtype: DTYPE.into(),
        system: ds.system.clone(),
        state_size: ds.state_size,
        metadata: ds.metadata.clone(),
        blobs,
    };
    let json =
        serde_json::to_string_pretty(&manifest).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json + "\n").map_err(io_err(&path))
}

fn read_blob(dir: &Path, entry: &BlobEntry) -> Result<Vec<f64>> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let expected = entry.shape.iter().product::<usize>() * 8;
    if bytes.len() != expected {
        return Err(DatasetError::SizeMismatch {
            file: entry.file.clone(),
            expected,
            got: bytes.len(),
        });
    }
    let got = checksum(&bytes);
    if got != entry.crc64 {
        return Err(DatasetError::ChecksumMismatch {
            file: entry.file.clone(),
            expected: entry.crc64.clone(),
            got,
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Read and validate a dataset directory.
pub fn load(dir: &Path) -> Result<TrajectoryDataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    if m.format != DATASET_FORMAT || m.version != 1 {
        return Err(DatasetError::Unsupported(format!(
            "format `{}` version {}",
            m.format, m.version
        )));
    }
    if m.dtype != DTYPE {
        return Err(DatasetError::Unsupported(format!("dtype `{}`", m.dtype)));
    }
    let read_split = |name: &str| -> Result<Split> {
        let entry = |suffix: &str| {
            m.blobs
                .get(&format!("{name}.{suffix}"))
                .ok_or_else(|| DatasetError::Manifest(format!("missing blob {name}.{suffix}")))
        };
        let (te, xe) = (entry("t")?, entry("x")?);
        if te.shape.len() != 1 {
            return Err(DatasetError::Manifest(format!("{name}.t must be one-dimensional")));
        }
        let t = read_blob(dir, te)?;
        let x = Tensor::new(xe.shape.clone(), read_blob(dir, xe)?)
            .map_err(|e| DatasetError::Manifest(e.to_string()))?;
        Ok(Split { t, x })
    };
    let ds = TrajectoryDataset {
        system: m.system.clone(),
        state_size: m.state_size,
        train: read_split("train")?,
        test: read_split("test")?,
        ood_train: read_split("ood_train")?,
        ood_test: read_split("ood_test")?,
        metadata: m.metadata,
    };
    let violations = validate(&ds);
    if !violations.is_empty() {
        return Err(DatasetError::Invalid(violations));
    }
    Ok(ds)
}

/// Long-format CSV: `split,env,traj,step,t,x0..x{d-1}`.
pub fn export_csv(ds: &TrajectoryDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["split", "env", "traj", "step", "t"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..ds.state_size).map(|c| format!("x{c}")));
    w.write_record(&header)?;
    for (name, s) in ds.splits() {
        for e in 0..s.n_envs() {
            for i in 0..s.n_trajs() {
                for k in 0..s.n_steps() {
                    let mut rec = vec![
                        name.to_string(),
                        e.to_string(),
                        i.to_string(),
                        k.to_string(),
                        s.t[k].to_string(),
                    ];
                    rec.extend(s.state(e, i, k).iter().map(|v| v.to_string()));
                    w.write_record(&rec)?;
                }
            }
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}
