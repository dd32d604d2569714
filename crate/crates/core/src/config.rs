//! Run configuration: a TOML file with nested sections for the task, the
//! noise schedule, the network, training, sampling, and sweeps.
//!
//! Only four fields are required — `task.kind`, `schedule.n_steps`,
//! `network.hidden`, and `output.dir`; everything else has documented
//! defaults. Commands echo the fully resolved configuration into the output
//! directory so the effective settings of a run are always on record.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::net::{init_network_with, Activation, Network};
use crate::schedule::{build_schedule, BetaProfile, Schedule, Spacing};
use crate::tasks::{make_task, PairedDataset, TaskKind, TaskParams};
use crate::train::{TrainConfig, TrainMode};
use crate::util::mix_seed;
use crate::{Error, Result};

/// Which dataset to translate and how to seed it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    #[serde(default)]
    pub params: TaskParams,
    #[serde(default)]
    pub seed: u64,
}

fn default_profile() -> BetaProfile {
    BetaProfile::Symmetric
}

fn default_sigma2_total() -> f64 {
    1.0
}

fn default_spacing() -> Spacing {
    Spacing::Quadratic
}

/// Noise schedule of the bridge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub n_steps: usize,
    #[serde(default = "default_profile")]
    pub beta_profile: BetaProfile,
    #[serde(default = "default_sigma2_total")]
    pub sigma2_total: f64,
    #[serde(default = "default_spacing")]
    pub spacing: Spacing,
}

fn default_time_embed_dim() -> usize {
    32
}

fn default_activation() -> Activation {
    Activation::Silu
}

/// Hidden architecture of the displacement predictor. The input and output
/// widths are derived from the task dimension and training mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub hidden: Vec<usize>,
    #[serde(default = "default_time_embed_dim")]
    pub time_embed_dim: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

/// Generation settings used by `sample`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    /// Step budgets to generate with.
    pub nfe: Vec<usize>,
    /// Whether the recursive sampler injects posterior noise.
    pub stochastic: bool,
    /// Number of samples per generation call.
    pub batch_size: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection { nfe: vec![1000], stochastic: true, batch_size: 512 }
    }
}

/// Settings for the budget-robustness sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub nfe_list: Vec<usize>,
    /// Independent training seeds; each trains one model pair.
    pub seeds: Vec<u64>,
    /// Held-out pairs per evaluation.
    pub eval_count: usize,
    /// Upper bound on concurrent training runs inside the sweep.
    pub parallelism: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            nfe_list: vec![1, 2, 10, 100, 1000],
            seeds: vec![1, 2, 3],
            eval_count: 256,
            parallelism: 1,
        }
    }
}

/// Where artifacts land. Nothing is written outside this directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

/// One experiment: task, schedule, model, budgets, and output location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSection,
    pub schedule: ScheduleSection,
    pub network: NetworkSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub sweep: SweepSection,
    pub output: OutputSection,
}

impl RunConfig {
    /// Parses and validates a TOML document. Parse errors keep the
    /// underlying line/column diagnostics and name missing fields.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads and parses the file at `path`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    /// Renders the fully resolved configuration (all defaults applied).
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run configuration serializes")
    }

    fn validate(&self) -> Result<()> {
        if self.network.hidden.is_empty() {
            return Err(Error::Config("network.hidden must list at least one width".into()));
        }
        if self.network.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("network.hidden widths must be positive".into()));
        }
        if self.sample.nfe.is_empty() {
            return Err(Error::Config("sample.nfe must list at least one budget".into()));
        }
        if self.sample.nfe.iter().any(|&n| n == 0) {
            return Err(Error::Config("sample.nfe budgets must be positive".into()));
        }
        if self.sweep.nfe_list.is_empty() {
            return Err(Error::Config("sweep.nfe_list must list at least one budget".into()));
        }
        if self.sweep.seeds.is_empty() {
            return Err(Error::Config("sweep.seeds must list at least one seed".into()));
        }
        if self.sweep.eval_count == 0 {
            return Err(Error::Config("sweep.eval_count must be positive".into()));
        }
        if self.sweep.parallelism == 0 {
            return Err(Error::Config("sweep.parallelism must be at least 1".into()));
        }
        Ok(())
    }

    /// Checks a budget list against the configured grid. Called by the
    /// commands that consume a list, rather than at parse time, so default
    /// lists never invalidate configs with deliberately small grids.
    pub fn validate_budgets(&self, nfe_list: &[usize]) -> Result<()> {
        if let Some(&n) = nfe_list.iter().find(|&&n| n > self.schedule.n_steps) {
            return Err(Error::Config(format!(
                "step budget {n} exceeds schedule.n_steps = {}",
                self.schedule.n_steps
            )));
        }
        Ok(())
    }

    /// Instantiates the configured dataset.
    pub fn build_task(&self) -> Result<PairedDataset> {
        make_task(self.task.kind, self.task.params.clone(), self.task.seed)
    }

    /// Builds the configured noise schedule.
    pub fn build_schedule(&self) -> Result<Schedule> {
        build_schedule(
            self.schedule.n_steps,
            self.schedule.beta_profile,
            self.schedule.sigma2_total,
            self.schedule.spacing,
        )
    }

    /// Full layer widths for the given mode: state input (doubled for the
    /// conditional baseline) plus time embedding, hidden widths, data output.
    pub fn layer_dims(&self, mode: TrainMode, data_dim: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.network.hidden.len() + 2);
        dims.push(mode.net_input_dim(data_dim) + self.network.time_embed_dim);
        dims.extend_from_slice(&self.network.hidden);
        dims.push(data_dim);
        dims
    }

    /// Fresh network for the given mode and seed, with the initialization
    /// stream keyed by mode so sampler families never share weights.
    pub fn init_network(&self, mode: TrainMode, data_dim: usize, seed: u64) -> Result<Network> {
        let mode_tag = match mode {
            TrainMode::I2sb => 0x11,
            TrainMode::I2sbOtOde => 0x12,
            TrainMode::Csgm => 0x13,
        };
        init_network_with(
            &self.layer_dims(mode, data_dim),
            self.network.time_embed_dim,
            self.network.activation,
            mix_seed(seed, mode_tag),
        )
    }
}
