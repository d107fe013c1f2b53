//! Run configuration: a TOML file merged with command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use qtune_core::dataset::{DatasetKind, DatasetSpec};
use qtune_core::trainer::{TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};

/// λ (or c) values for `sweep`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    /// When non-empty, `c` is swept instead of λ (λ and λ₁ stay as configured).
    pub cs: Vec<f64>,
    /// Ties `c = 0.01/λ` and `λ₁ = 1` for each λ.
    pub coupled: bool,
}

/// Where kernels come from for `rate`, `encode` and `export`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSource {
    pub checkpoint: Option<PathBuf>,
    pub qtables: Option<PathBuf>,
    pub quality: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Image files or directories for `encode`.
    pub inputs: Vec<PathBuf>,
    pub dataset: DatasetSpec,
    pub kernels: KernelSource,
    pub sweep: SweepConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("qtune-out"),
            inputs: Vec::new(),
            dataset: DatasetSpec::synthetic(10, 1000, 200, 0),
            kernels: KernelSource::default(),
            sweep: SweepConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mode: Option<TrainMode>,
    pub lambda: Vec<f64>,
    pub lambda1: Option<f64>,
    pub c: Vec<f64>,
    pub quality: Option<f64>,
    pub dataset: Option<String>,
    pub subset: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub qtables: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Applies overrides; single-valued settings take the first of a list.
    pub fn apply(&mut self, o: &Overrides, sweep: bool) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(m) = o.mode {
            self.train.mode = m;
        }
        if sweep {
            if !o.lambda.is_empty() {
                self.sweep.lambdas = o.lambda.clone();
            }
            if !o.c.is_empty() {
                self.sweep.cs = o.c.clone();
            }
        } else {
            if o.lambda.len() > 1 || o.c.len() > 1 {
                bail!("multiple --lambda/--c values are only meaningful for `sweep`");
            }
            if let Some(&l) = o.lambda.first() {
                self.train.loss.lambda = l;
            }
            if let Some(&c) = o.c.first() {
                self.train.loss.c = c;
            }
        }
        if let Some(l1) = o.lambda1 {
            self.train.loss.lambda1 = l1;
        }
        if let Some(q) = o.quality {
            self.train.quality = Some(q);
            self.kernels.quality = Some(q);
        }
        if let Some(d) = &o.dataset {
            self.dataset = dataset_from_arg(d, &self.dataset);
        }
        if let Some(n) = o.subset {
            self.dataset.train_size = Some(n);
        }
        if let Some(p) = &o.checkpoint {
            self.kernels.checkpoint = Some(p.clone());
        }
        if let Some(p) = &o.qtables {
            self.kernels.qtables = Some(p.clone());
        }
        if !o.inputs.is_empty() {
            self.inputs = o.inputs.clone();
        }
        self.train.seed = self.seed;
        self.dataset.seed = self.seed;
        Ok(())
    }
}

/// `synthetic`, a CIFAR binary file or directory, or an image folder.
fn dataset_from_arg(arg: &str, current: &DatasetSpec) -> DatasetSpec {
    if arg == "synthetic" {
        return DatasetSpec { kind: DatasetKind::Synthetic, path: None, ..current.clone() };
    }
    let path = PathBuf::from(arg);
    let cifar = if path.is_dir() {
        path.join("train.bin").exists() || path.join("data_batch_1.bin").exists()
    } else {
        path.extension().is_some_and(|e| e == "bin")
    };
    let kind = if cifar { DatasetKind::CifarBinary } else { DatasetKind::ImageFolder };
    // sizes configured for the synthetic default do not carry over to real data
    let keep_sizes = current.kind != DatasetKind::Synthetic;
    DatasetSpec {
        kind,
        path: Some(path),
        classes: if keep_sizes { current.classes } else { None },
        train_size: if keep_sizes { current.train_size } else { None },
        test_size: if keep_sizes { current.test_size } else { None },
        ..current.clone()
    }
}
