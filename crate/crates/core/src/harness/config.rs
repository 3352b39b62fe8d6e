//! Experiment configuration as read from JSON. Every section is optional and
//! unknown keys are rejected.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::Metric;
use super::tasks::{default_tasks, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PretrainConfig};
use crate::optim::{ClipPolicy, OptimConfig};
use crate::schedule::{GuConfig, LossReduction};

/// Default grid of clipping thresholds.
pub const DEFAULT_THRESHOLDS: [f64; 6] = [0.01, 0.05, 0.1, 0.5, 1.0, 5.0];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Full,
    Gu(GuConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Approach {
    pub name: String,
    #[serde(default)]
    pub clip: ClipPolicy,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub schedule: Schedule,
    /// Ignored by GU schedules, which use their own epochs per iteration.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub loss_reduction: LossReduction,
}

fn default_epochs() -> usize {
    5
}

fn default_batch() -> usize {
    16
}

impl Approach {
    pub fn new(name: impl Into<String>) -> Self {
        Approach {
            name: name.into(),
            clip: ClipPolicy::None,
            optim: OptimConfig::default(),
            schedule: Schedule::Full,
            epochs: default_epochs(),
            batch_size: default_batch(),
            loss_reduction: LossReduction::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', ',']) {
            return Err(Error::Config(format!(
                "approach name {:?} must be non-empty without '/' or ','",
                self.name
            )));
        }
        self.clip.validate()?;
        self.optim.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "approach {}: epochs and batch_size must be at least 1",
                self.name
            )));
        }
        if let Schedule::Gu(gu) = &self.schedule {
            if gu.epochs_per_iteration == 0 {
                return Err(Error::Config(format!(
                    "approach {}: epochs_per_iteration must be at least 1",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// vanilla, vanilla+bias-correction, small-lr-long and cwgnc.
pub fn default_approaches() -> Vec<Approach> {
    let base = OptimConfig::default();
    vec![
        Approach {
            optim: OptimConfig {
                bias_correction: false,
                ..base.clone()
            },
            ..Approach::new("vanilla")
        },
        Approach::new("vanilla+bias-correction"),
        Approach {
            optim: OptimConfig {
                lr: base.lr / 10.0,
                ..base.clone()
            },
            epochs: 4 * default_epochs(),
            ..Approach::new("small-lr-long")
        },
        Approach {
            clip: ClipPolicy::component_wise(0.05),
            ..Approach::new("cwgnc")
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TelemetryConfig {
    /// Keep every n-th step record; 0 disables steps.csv rows.
    pub step_every: u64,
    pub deltas: bool,
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        TelemetryConfig {
            step_every: 1,
            deltas: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunsConfig {
    pub base_seed: u64,
    pub num_seeds: usize,
    pub gu_num_seeds: usize,
}

impl Default for RunsConfig {
    fn default() -> Self {
        RunsConfig {
            base_seed: 0,
            num_seeds: 25,
            gu_num_seeds: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Defaults to the first MCC task.
    pub task: Option<String>,
    /// Approach whose clipping policy is replaced per threshold.
    pub approach: String,
    pub thresholds: Vec<f64>,
    /// Add a row with clipping disabled.
    pub include_unclipped: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            task: None,
            approach: "cwgnc".into(),
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            include_unclipped: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuExperimentConfig {
    /// Defaults to the first accuracy task.
    pub task: Option<String>,
    /// Supplies optimizer, clipping and batch size.
    pub approach: String,
    pub schedule: GuConfig,
    /// Epochs of the full fine-tuning comparison; defaults to the epochs of
    /// one GU iteration, which makes GU-restart's last iteration identical.
    pub full_epochs: Option<usize>,
}

impl Default for GuExperimentConfig {
    fn default() -> Self {
        GuExperimentConfig {
            task: None,
            approach: "vanilla+bias-correction".into(),
            schedule: GuConfig::default(),
            full_epochs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default = "default_tasks")]
    pub tasks: Vec<TaskSpec>,
    #[serde(default = "default_approaches")]
    pub approaches: Vec<Approach>,
    #[serde(default)]
    pub telemetry: TelemetryConfig,
    #[serde(default)]
    pub runs: RunsConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub gu: GuExperimentConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            tasks: default_tasks(),
            approaches: default_approaches(),
            telemetry: TelemetryConfig::default(),
            runs: RunsConfig::default(),
            sweep: SweepConfig::default(),
            gu: GuExperimentConfig::default(),
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        let mut names = BTreeSet::new();
        for t in &self.tasks {
            t.validate()?;
            if !names.insert(t.name.as_str()) {
                return Err(Error::Config(format!("duplicate task name {}", t.name)));
            }
            if t.name.is_empty() || t.name.contains(['/', ',']) {
                return Err(Error::Config(format!(
                    "task name {:?} must be non-empty without '/' or ','",
                    t.name
                )));
            }
            if t.seq_len > self.model.max_seq_len {
                return Err(Error::Config(format!(
                    "task {}: seq_len {} exceeds model max_seq_len {}",
                    t.name, t.seq_len, self.model.max_seq_len
                )));
            }
        }
        for a in &self.approaches {
            a.validate()?;
        }
        if self.runs.num_seeds < 2 {
            return Err(Error::Config("runs.num_seeds must be at least 2".into()));
        }
        if self.runs.gu_num_seeds == 0 {
            return Err(Error::Config("runs.gu_num_seeds must be at least 1".into()));
        }
        if let Some(t) = self.sweep.thresholds.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(Error::Config(format!("sweep threshold {t} must be finite and > 0")));
        }
        self.gu.schedule.iterations(self.model.num_layers)?;
        if self.gu.full_epochs == Some(0) {
            return Err(Error::Config("gu.full_epochs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn task(&self, name: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Config(format!("unknown task {name}")))
    }

    pub fn approach(&self, name: &str) -> Result<&Approach> {
        self.approaches
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Config(format!("unknown approach {name}")))
    }

    fn task_or_first(&self, name: Option<&str>, prefer: Metric) -> Result<&TaskSpec> {
        match name {
            Some(n) => self.task(n),
            None => self
                .tasks
                .iter()
                .find(|t| t.metric == prefer)
                .or(self.tasks.first())
                .ok_or_else(|| Error::Config("no tasks configured".into())),
        }
    }

    pub fn sweep_task(&self) -> Result<&TaskSpec> {
        self.task_or_first(self.sweep.task.as_deref(), Metric::Mcc)
    }

    pub fn gu_task(&self) -> Result<&TaskSpec> {
        self.task_or_first(self.gu.task.as_deref(), Metric::Accuracy)
    }
}
