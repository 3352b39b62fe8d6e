use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::harness::metrics::Metric;
use crate::model::{ComponentId, Scope};
use crate::optim::{ClipReport, NormPair};

/// Gradient norms of every component at one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub run_id: String,
    /// GU iteration, or -1 for full fine-tuning.
    pub iteration: i64,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub norms: BTreeMap<ComponentId, NormPair>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    Pretrained,
    PreviousIteration,
}

impl fmt::Display for Reference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reference::Pretrained => "pretrained",
            Reference::PreviousIteration => "previous_iteration",
        })
    }
}

impl Reference {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pretrained" => Some(Reference::Pretrained),
            "previous_iteration" => Some(Reference::PreviousIteration),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentDelta {
    pub component: ComponentId,
    pub rmsd: f64,
    pub cosine: f64,
}

/// Per-layer summary: the largest component RMSD and the smallest component
/// cosine similarity against a reference.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDelta {
    pub layer: Scope,
    pub max_rmsd: f64,
    pub min_cosine: f64,
    pub components: Vec<ComponentDelta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaRecord {
    pub run_id: String,
    pub iteration: i64,
    pub reference: Reference,
    pub layers: Vec<LayerDelta>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub approach: String,
    pub task: String,
    pub run_index: usize,
    pub seed: u64,
    pub metric: Metric,
    pub value: f64,
    pub failed: bool,
    pub majority_baseline_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub metric: Metric,
    pub n: usize,
    pub std: f64,
    pub mean: f64,
    pub max: f64,
    pub min: f64,
    pub failed_fraction: f64,
}

/// Collects the records of one run.
#[derive(Clone, Debug)]
pub struct RunTelemetry {
    pub run_id: String,
    /// Keep every `step_every`-th step record; 0 disables step records.
    pub step_every: u64,
    pub steps: Vec<StepRecord>,
    pub deltas: Vec<DeltaRecord>,
}

impl RunTelemetry {
    pub fn new(run_id: impl Into<String>, step_every: u64) -> Self {
        RunTelemetry {
            run_id: run_id.into(),
            step_every,
            steps: Vec::new(),
            deltas: Vec::new(),
        }
    }

    /// A sink that records nothing but deltas.
    pub fn quiet(run_id: impl Into<String>) -> Self {
        Self::new(run_id, 0)
    }

    pub fn record_step(&mut self, iteration: i64, step: u64, loss: f64, lr: f64, report: &ClipReport) {
        if self.step_every == 0 || step % self.step_every != 0 {
            return;
        }
        self.steps.push(StepRecord {
            run_id: self.run_id.clone(),
            iteration,
            step,
            loss,
            lr,
            norms: report.clone(),
        });
    }

    pub fn record_delta(&mut self, iteration: i64, reference: Reference, layers: Vec<LayerDelta>) {
        self.deltas.push(DeltaRecord {
            run_id: self.run_id.clone(),
            iteration,
            reference,
            layers,
        });
    }
}
