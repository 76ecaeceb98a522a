//! TOML experiment recipes for evaluation, sweeps and meta-training.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bench::{Family, OptimizerSpec, SweepGrid};
use crate::data::{self, Dataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::global_opt::{OptimizerParams, Variant};
use crate::local_sim::{RoundConfig, Task};
use crate::meta::MetaConfig;
use crate::nn::{ArchKind, ArchSpec, DEFAULT_CONV_CHANNELS, DEFAULT_HIDDEN_WIDTH};

pub const DEFAULT_BATCH_SIZE: usize = 128;
pub const DEFAULT_ROUNDS: usize = 1000;
pub const DEFAULT_NUM_SEEDS: u64 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Fmnist,
    Cifar10,
}

/// Parameters of the `synthetic` dataset; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub dims: usize,
    pub samples_per_class: usize,
    pub cluster_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            dims: 8,
            samples_per_class: 500,
            cluster_std: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.classes,
            dims: self.dims,
            samples_per_class: self.samples_per_class,
            cluster_std: self.cluster_std,
            seed: self.seed,
        }
    }
}

/// Dataset, architecture and local-update settings. `K`, `H` and `gamma`
/// are optional in the file only so that a missing value is reported as a
/// validation error naming the field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub dataset: DatasetKind,
    /// Overrides `--data-dir` and the environment for file-backed datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    pub arch: ArchKind,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_channels")]
    pub conv_channels: [usize; 3],
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(rename = "H", default, skip_serializing_if = "Option::is_none")]
    pub local_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default = "default_batch")]
    pub b_loc: usize,
    /// Split the recorded curve uses (`train` or `validation`).
    #[serde(default = "default_monitor")]
    pub monitor: Split,
}

fn default_width() -> usize {
    DEFAULT_HIDDEN_WIDTH
}

fn default_channels() -> [usize; 3] {
    DEFAULT_CONV_CHANNELS
}

fn default_batch() -> usize {
    DEFAULT_BATCH_SIZE
}

fn default_monitor() -> Split {
    Split::Train
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let workers = self.workers.ok_or_else(|| Error::field("K", "missing"))?;
        if workers == 0 {
            return Err(Error::field("K", "must be positive"));
        }
        let h = self.local_steps.ok_or_else(|| Error::field("H", "missing"))?;
        if h == 0 {
            return Err(Error::field("H", "must be positive"));
        }
        let gamma = self.gamma.ok_or_else(|| Error::field("gamma", "missing"))?;
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::field("gamma", "must be positive"));
        }
        if self.b_loc == 0 {
            return Err(Error::field("b_loc", "must be positive"));
        }
        if self.width == 0 {
            return Err(Error::field("width", "must be positive"));
        }
        if self.monitor == Split::Test {
            return Err(Error::field("monitor", "must be `train` or `validation`"));
        }
        match (self.dataset, &self.synthetic) {
            (DatasetKind::Synthetic, _) => Ok(()),
            (_, Some(_)) => Err(Error::field("synthetic", "only valid with dataset = \"synthetic\"")),
            (_, None) => Ok(()),
        }
    }

    pub fn round(&self) -> Result<RoundConfig> {
        self.validate()?;
        Ok(RoundConfig::new(
            self.workers.unwrap_or_default(),
            self.local_steps.unwrap_or_default(),
            self.gamma.unwrap_or_default(),
            self.b_loc,
        ))
    }

    pub fn load_dataset(&self, data_dir: Option<&Path>) -> Result<Dataset> {
        let dir = || {
            data::resolve_data_dir(data_dir.or(self.data_dir.as_deref())).ok_or_else(|| {
                Error::field(
                    "data_dir",
                    format!("no data directory (set data_dir, --data-dir or {})", data::DATA_DIR_ENV),
                )
            })
        };
        match self.dataset {
            DatasetKind::Synthetic => data::make_synthetic(&self.synthetic.clone().unwrap_or_default().spec()),
            DatasetKind::Fmnist => data::load_fmnist(dir()?),
            DatasetKind::Cifar10 => data::load_cifar_binary(dir()?),
        }
    }

    pub fn arch_for(&self, ds: &Dataset) -> ArchSpec {
        let shape = ds.sample_shape();
        let flat: usize = shape.iter().product();
        match self.arch {
            ArchKind::Mlp2 => ArchSpec::mlp2(flat, ds.num_classes, self.width),
            ArchKind::Mlp3 => ArchSpec::mlp3(flat, ds.num_classes, self.width),
            ArchKind::LinearToy => ArchSpec::linear_toy(flat, ds.num_classes),
            ArchKind::Cnn3 => {
                let (h, w, c) = match *shape {
                    [h, w, c] => (h, w, c),
                    [h, w] => (h, w, 1),
                    _ => (flat, 1, 1),
                };
                ArchSpec::cnn3(h, w, c, ds.num_classes).with_conv_channels(self.conv_channels)
            }
        }
    }

    /// Loads data and assembles the task.
    pub fn build(&self, name: &str, data_dir: Option<&Path>) -> Result<Task> {
        let round = self.round()?;
        let ds = self.load_dataset(data_dir)?;
        let arch = self.arch_for(&ds);
        let mut task = Task::new(name, arch, Arc::new(ds), round);
        task.monitor_split = self.monitor;
        task.validate()?;
        Ok(task)
    }
}

/// One optimizer to evaluate. Which fields are required depends on `kind`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Report label; defaults to the kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Local learning rate; defaults to the task's `gamma`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Meta-parameter checkpoint for `kind = "learned"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    LocalSgd,
    Slowmo,
    Sgd,
    Adam,
    Learned,
}

impl OptimizerConfig {
    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| {
            match self.kind {
                OptimizerKind::LocalSgd => "local_sgd",
                OptimizerKind::Slowmo => "slowmo",
                OptimizerKind::Sgd => "sgd",
                OptimizerKind::Adam => "adam",
                OptimizerKind::Learned => "learned",
            }
            .to_string()
        })
    }

    /// Resolves to a runnable spec. Relative checkpoint paths are taken
    /// relative to `base`.
    pub fn resolve(&self, task: &TaskConfig, base: &Path) -> Result<OptimizerSpec> {
        let need = |v: Option<f64>, name: &str| -> Result<f64> {
            let v = v.ok_or_else(|| Error::field(name, format!("required for optimizer `{}`", self.label())))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::field(name, "must be finite"))
            }
        };
        let gamma = need(self.gamma.or(task.gamma), "gamma")?;
        Ok(match self.kind {
            OptimizerKind::LocalSgd => OptimizerSpec::LocalSgd { gamma },
            OptimizerKind::Slowmo => OptimizerSpec::SlowMo {
                gamma,
                alpha: need(self.alpha, "alpha")?,
                beta: need(self.beta, "beta")?,
            },
            OptimizerKind::Sgd => OptimizerSpec::Sgd { lr: need(self.lr, "lr")? },
            OptimizerKind::Adam => OptimizerSpec::Adam { lr: need(self.lr, "lr")? },
            OptimizerKind::Learned => {
                let rel = self
                    .checkpoint
                    .as_ref()
                    .ok_or_else(|| Error::field("checkpoint", "required for a learned optimizer"))?;
                let phi = OptimizerParams::load_json(base.join(rel))?;
                if let Some(k) = phi.variant.workers() {
                    if Some(k) != task.workers {
                        return Err(Error::field(
                            "checkpoint",
                            format!("checkpoint is tied to K={k} but the task has K={}", task.workers.unwrap_or(0)),
                        ));
                    }
                }
                OptimizerSpec::Learned { phi: Arc::new(phi), gamma }
            }
        })
    }
}

/// Grid override for `sweep`; empty lists fall back to the standard grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub family: Family,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lrs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gammas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alphas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub betas: Vec<f64>,
    #[serde(default = "default_sweep_seeds")]
    pub num_seeds: u64,
}

fn default_sweep_seeds() -> u64 {
    3
}

impl SweepConfig {
    pub fn grid(&self) -> SweepGrid {
        let std = SweepGrid::standard(self.family);
        let pick = |v: &Vec<f64>, d: Vec<f64>| if v.is_empty() { d } else { v.clone() };
        SweepGrid {
            family: self.family,
            lrs: pick(&self.lrs, std.lrs),
            gammas: pick(&self.gammas, std.gammas),
            alphas: pick(&self.alphas, std.alphas),
            betas: pick(&self.betas, std.betas),
        }
    }
}

/// Recipe for `evaluate` and `sweep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Explicit seed list; when empty, `num_seeds` seeds starting at `--seed`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_num_seeds")]
    pub num_seeds: u64,
    /// Label speedups are measured against; defaults to the first optimizer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub task: TaskConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub optimizers: Vec<OptimizerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

fn default_rounds() -> usize {
    DEFAULT_ROUNDS
}

fn default_num_seeds() -> u64 {
    DEFAULT_NUM_SEEDS
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.rounds == 0 {
            return Err(Error::field("rounds", "must be positive"));
        }
        if self.seeds.is_empty() && self.num_seeds == 0 {
            return Err(Error::field("num_seeds", "must be positive"));
        }
        let mut labels: Vec<String> = self.optimizers.iter().map(OptimizerConfig::label).collect();
        labels.sort();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::field("optimizers", format!("duplicate label `{}`", w[0])));
        }
        if let Some(r) = &self.reference {
            if !self.optimizers.is_empty() && !labels.contains(r) {
                return Err(Error::field("reference", format!("no optimizer labelled `{r}`")));
            }
        }
        for o in &self.optimizers {
            if o.kind == OptimizerKind::Learned && o.checkpoint.is_none() {
                return Err(Error::field("checkpoint", "required for a learned optimizer"));
            }
        }
        if let Some(s) = &self.sweep {
            s.grid().validate()?;
            if s.num_seeds == 0 {
                return Err(Error::field("num_seeds", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn seed_list(&self, base: u64) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.num_seeds).map(|i| base + i).collect()
        } else {
            self.seeds.clone()
        }
    }

    /// Checks that every referenced checkpoint exists (relative to `base`).
    pub fn check_files(&self, base: &Path) -> Result<()> {
        for o in &self.optimizers {
            if let Some(p) = &o.checkpoint {
                let full = base.join(p);
                if !full.is_file() {
                    return Err(Error::field("checkpoint", format!("{} does not exist", full.display())));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Recipe for `meta-train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaTrainConfig {
    /// `lopt_a`, `lagg_a`, `lopt_plain` or `lagg_plain`; aggregators take K from the task.
    pub variant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub task: TaskConfig,
    #[serde(default)]
    pub meta: MetaConfig,
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.meta.validate()?;
        self.variant_spec().map(|_| ())
    }

    pub fn variant_spec(&self) -> Result<Variant> {
        Variant::from_tag(&self.variant, self.task.workers).map_err(|e| Error::field("variant", e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn parse_text<T: serde::de::DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::ConfigParse(format!("{origin}: {e}")))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn parse_run_config_str(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = parse_text(text, "<string>")?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_meta_config_str(text: &str) -> Result<MetaTrainConfig> {
    let cfg: MetaTrainConfig = parse_text(text, "<string>")?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses and validates a run recipe; referenced checkpoints must exist.
pub fn parse_run_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let cfg: RunConfig = parse_text(&read(path)?, &path.display().to_string())?;
    cfg.validate()?;
    cfg.check_files(path.parent().unwrap_or(Path::new(".")))?;
    Ok(cfg)
}

pub fn parse_meta_config(path: impl AsRef<Path>) -> Result<MetaTrainConfig> {
    let path = path.as_ref();
    let cfg: MetaTrainConfig = parse_text(&read(path)?, &path.display().to_string())?;
    cfg.validate()?;
    Ok(cfg)
}
