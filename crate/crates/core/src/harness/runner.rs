//! Multi-seed experiment execution.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Approach, Config, Schedule};
use super::tasks::{gen_dataset, TaskSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::harness::metrics::Metric;
use crate::model::{pretrain, Model, ModelConfig, Scope, Snapshot};
use crate::optim::ClipPolicy;
use crate::schedule::{
    prepare_run, run_full_finetune, run_gradual_unfreezing, FineTuneSetup, GuConfig,
    IterationResult, ParamTrace,
};
use crate::seed;
use crate::telemetry::{aggregate_runs, Aggregate, DeltaRecord, RunResult, RunTelemetry, StepRecord};
use crate::telemetry::emit::{sort_deltas, sort_steps};

/// Everything one run produced.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub result: RunResult,
    /// Per-iteration evaluations of GU schedules; empty for full fine-tuning.
    pub iterations: Vec<IterationResult>,
    pub telemetry: RunTelemetry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run_id: String,
    pub error: String,
    pub numerical: bool,
}

pub fn run_id(approach: &str, task: &str, run_index: usize) -> String {
    format!("{approach}/{task}/{run_index}")
}

/// A validated configuration together with its pretrained body.
#[derive(Clone, Debug)]
pub struct Lab {
    config: Config,
    pretrained: Snapshot,
}

impl Lab {
    /// Validates `config` and runs masked-token pretraining.
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let mut model = Model::new(config.model.clone())?;
        let out = pretrain(&mut model, &config.pretrain)?;
        Ok(Lab {
            config,
            pretrained: out.snapshot,
        })
    }

    /// Uses an existing snapshot instead of pretraining; every non-head
    /// component of the configured model must be present with its shape.
    pub fn with_pretrained(config: Config, pretrained: Snapshot) -> Result<Self> {
        config.validate()?;
        let probe = Model::new(config.model.clone())?;
        for (id, t) in probe.params() {
            if id.scope() == Some(Scope::Head) {
                continue;
            }
            let s = pretrained
                .get(id.as_str())
                .map_err(|_| Error::Config(format!("pretrained snapshot lacks {id}")))?;
            if s.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "pretrained {id} has shape {:?}, model expects {:?}",
                    s.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Lab { config, pretrained })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn pretrained(&self) -> &Snapshot {
        &self.pretrained
    }

    pub fn dataset(&self, task: &TaskSpec) -> Result<Dataset> {
        gen_dataset(task, self.config.model.vocab)
    }

    /// Seed of run `run_index` on `task`. The approach is deliberately not
    /// part of it, so every approach sees the same head and data order.
    pub fn run_seed(&self, task: &TaskSpec, run_index: usize) -> u64 {
        seed::derive(
            self.config.runs.base_seed,
            &[&task.name, &run_index.to_string()],
        )
    }

    fn task_model(&self, task: &TaskSpec, run_seed: u64) -> Result<(Model, Snapshot)> {
        let cfg = ModelConfig {
            num_classes: task.num_classes,
            ..self.config.model.clone()
        };
        let mut model = Model::new(cfg)?;
        let reference = prepare_run(&self.pretrained, &mut model, seed::derive(run_seed, &["head"]))?;
        Ok((model, reference))
    }

    /// One fine-tuning run of `approach` on `task`. `trace`, if given,
    /// receives all parameters after every optimizer step.
    pub fn finetune(
        &self,
        approach: &Approach,
        task: &TaskSpec,
        data: &Dataset,
        run_index: usize,
        trace: Option<&mut ParamTrace>,
    ) -> Result<RunOutput> {
        let run_seed = self.run_seed(task, run_index);
        let (mut model, reference) = self.task_model(task, run_seed)?;
        let id = run_id(&approach.name, &task.name, run_index);
        let mut telemetry = RunTelemetry::new(id, self.config.telemetry.step_every);
        let setup = FineTuneSetup {
            data,
            metric: task.metric,
            seed: run_seed,
            batch_size: approach.batch_size,
            optim: approach.optim.clone(),
            clip: approach.clip.clone(),
            loss_reduction: approach.loss_reduction,
        };
        let (evaluation, iterations) = match &approach.schedule {
            Schedule::Full => {
                let e = run_full_finetune(&mut model, &reference, &setup, approach.epochs, &mut telemetry, trace)?;
                (e, Vec::new())
            }
            Schedule::Gu(gu) => {
                let its = run_gradual_unfreezing(&mut model, &reference, &setup, gu, &mut telemetry, trace)?;
                let last = its
                    .last()
                    .ok_or_else(|| Error::Config("GU schedule ran no iterations".into()))?;
                (last.evaluation, its)
            }
        };
        if !self.config.telemetry.deltas {
            telemetry.deltas.clear();
        }
        Ok(RunOutput {
            result: RunResult {
                approach: approach.name.clone(),
                task: task.name.clone(),
                run_index,
                seed: run_seed,
                metric: evaluation.metric,
                value: evaluation.value,
                failed: evaluation.failed(),
                majority_baseline_value: evaluation.majority_baseline,
            },
            iterations,
            telemetry,
        })
    }

    /// Every configured approach on every configured task.
    pub fn run_benchmark(&self, parallel: usize) -> Result<BenchmarkReport> {
        self.benchmark_grid(&self.config.approaches, &self.config.tasks, parallel)
    }

    /// `num_seeds` runs of each approach on each task.
    pub fn benchmark_grid(
        &self,
        approaches: &[Approach],
        tasks: &[TaskSpec],
        parallel: usize,
    ) -> Result<BenchmarkReport> {
        for a in approaches {
            a.validate()?;
        }
        let datasets: Vec<Dataset> = tasks.iter().map(|t| self.dataset(t)).collect::<Result<_>>()?;
        let n = self.config.runs.num_seeds;
        let mut jobs = Vec::new();
        for a in approaches {
            for (ti, t) in tasks.iter().enumerate() {
                for i in 0..n {
                    jobs.push((a, t, ti, i));
                }
            }
        }
        let outputs = run_parallel(parallel, &jobs, |&(a, t, ti, i)| {
            (
                run_id(&a.name, &t.name, i),
                self.finetune(a, t, &datasets[ti], i, None),
            )
        })?;
        let mut collected = Collected::default();
        for (id, out) in outputs {
            collected.push(id, out);
        }
        let mut cells = Vec::new();
        for a in approaches {
            for t in tasks {
                let runs: Vec<RunResult> = collected
                    .results
                    .iter()
                    .filter(|r| r.approach == a.name && r.task == t.name)
                    .cloned()
                    .collect();
                let aggregate = if runs.is_empty() { None } else { Some(aggregate_runs(&runs)?) };
                cells.push(Cell {
                    approach: a.name.clone(),
                    task: t.name.clone(),
                    metric: t.metric,
                    runs,
                    aggregate,
                });
            }
        }
        collected.finish();
        Ok(BenchmarkReport {
            cells,
            steps: collected.steps,
            deltas: collected.deltas,
            failures: collected.failures,
        })
    }

    /// One benchmark row per clipping threshold on the sweep task, using the
    /// sweep approach with its clipping policy replaced.
    pub fn run_threshold_sweep(&self, thresholds: &[f64], parallel: usize) -> Result<SweepReport> {
        if thresholds.is_empty() && !self.config.sweep.include_unclipped {
            return Err(Error::Config("sweep needs at least one threshold".into()));
        }
        if let Some(t) = thresholds.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(Error::Config(format!("sweep threshold {t} must be finite and > 0")));
        }
        let task = self.config.sweep_task()?.clone();
        let base = self.config.approach(&self.config.sweep.approach)?;
        let mut rows: Vec<(String, Approach)> = thresholds
            .iter()
            .map(|&tau| {
                let label = format!("{tau}");
                let a = Approach {
                    name: format!("{}@tau={label}", base.name),
                    clip: ClipPolicy::component_wise(tau),
                    ..base.clone()
                };
                (label, a)
            })
            .collect();
        if self.config.sweep.include_unclipped {
            rows.push((
                "none".into(),
                Approach {
                    name: format!("{}@unclipped", base.name),
                    clip: ClipPolicy::None,
                    ..base.clone()
                },
            ));
        }
        let approaches: Vec<Approach> = rows.iter().map(|(_, a)| a.clone()).collect();
        let bench = self.benchmark_grid(&approaches, std::slice::from_ref(&task), parallel)?;
        let sweep_rows = rows
            .into_iter()
            .zip(bench.cells.iter())
            .map(|((threshold, approach), cell)| SweepRow {
                threshold,
                approach: approach.name,
                aggregate: cell.aggregate.clone(),
            })
            .collect();
        Ok(SweepReport {
            task: task.name.clone(),
            metric: task.metric,
            rows: sweep_rows,
            bench,
        })
    }

    /// GU, GU with restart, and full fine-tuning over `gu_num_seeds` seeds.
    pub fn run_gu_experiment(&self, parallel: usize) -> Result<GuReport> {
        let task = self.config.gu_task()?.clone();
        let base = self.config.approach(&self.config.gu.approach)?;
        let data = self.dataset(&task)?;
        let gu = &self.config.gu.schedule;
        let iterations = gu.iterations(self.config.model.num_layers)?;
        let methods = [
            Approach {
                name: GU.into(),
                schedule: Schedule::Gu(GuConfig { restart: false, ..gu.clone() }),
                ..base.clone()
            },
            Approach {
                name: GU_RESTART.into(),
                schedule: Schedule::Gu(GuConfig { restart: true, ..gu.clone() }),
                ..base.clone()
            },
            Approach {
                name: FULL.into(),
                schedule: Schedule::Full,
                epochs: self.config.gu.full_epochs.unwrap_or(gu.epochs_per_iteration),
                ..base.clone()
            },
        ];
        let mut jobs = Vec::new();
        for m in &methods {
            for i in 0..self.config.runs.gu_num_seeds {
                jobs.push((m, i));
            }
        }
        let outputs = run_parallel(parallel, &jobs, |&(m, i)| {
            (run_id(&m.name, &task.name, i), self.finetune(m, &task, &data, i, None))
        })?;
        let mut collected = Collected::default();
        let mut curves: BTreeMap<(String, i64), Vec<f64>> = BTreeMap::new();
        for (id, out) in outputs {
            if let Ok(o) = &out {
                if o.iterations.is_empty() {
                    curves
                        .entry((o.result.approach.clone(), crate::schedule::FULL_FT_ITERATION))
                        .or_default()
                        .push(o.result.value);
                }
                for it in &o.iterations {
                    curves
                        .entry((o.result.approach.clone(), it.iteration as i64))
                        .or_default()
                        .push(it.evaluation.value);
                }
            }
            collected.push(id, out);
        }
        let mut trajectory = Vec::new();
        for m in &methods {
            let points: Vec<i64> = if m.name == FULL {
                vec![crate::schedule::FULL_FT_ITERATION]
            } else {
                (0..iterations as i64).collect()
            };
            for it in points {
                if let Some(values) = curves.get(&(m.name.clone(), it)) {
                    let (mean, std) = mean_std(values);
                    trajectory.push(TrajectoryPoint {
                        method: m.name.clone(),
                        iteration: it,
                        n: values.len(),
                        mean,
                        std,
                    });
                }
            }
        }
        let mut finals = Vec::new();
        for m in &methods {
            let runs: Vec<RunResult> = collected
                .results
                .iter()
                .filter(|r| r.approach == m.name)
                .cloned()
                .collect();
            let aggregate = if runs.is_empty() { None } else { Some(aggregate_runs(&runs)?) };
            finals.push(Cell {
                approach: m.name.clone(),
                task: task.name.clone(),
                metric: task.metric,
                runs,
                aggregate,
            });
        }
        collected.finish();
        Ok(GuReport {
            task: task.name.clone(),
            metric: task.metric,
            iterations,
            trajectory,
            finals,
            steps: collected.steps,
            deltas: collected.deltas,
            failures: collected.failures,
        })
    }
}

pub const GU: &str = "gu";
pub const GU_RESTART: &str = "gu-restart";
pub const FULL: &str = "full";

/// Runs `f` over `jobs` on a pool of `parallel` threads; results keep job
/// order regardless of completion order.
pub fn run_parallel<J, T, F>(parallel: usize, jobs: &[J], f: F) -> Result<Vec<T>>
where
    J: Sync,
    T: Send,
    F: Fn(&J) -> T + Sync,
{
    if parallel == 0 {
        return Err(Error::Config("--parallel must be at least 1".into()));
    }
    if parallel == 1 {
        return Ok(jobs.iter().map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| jobs.par_iter().map(&f).collect()))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

#[derive(Default)]
struct Collected {
    results: Vec<RunResult>,
    steps: Vec<StepRecord>,
    deltas: Vec<DeltaRecord>,
    failures: Vec<RunFailure>,
}

impl Collected {
    fn push(&mut self, run_id: String, out: Result<RunOutput>) {
        match out {
            Ok(o) => {
                self.results.push(o.result);
                self.steps.extend(o.telemetry.steps);
                self.deltas.extend(o.telemetry.deltas);
            }
            Err(e) => self.failures.push(RunFailure {
                run_id,
                numerical: e.is_numerical(),
                error: e.to_string(),
            }),
        }
    }

    fn finish(&mut self) {
        sort_steps(&mut self.steps);
        sort_deltas(&mut self.deltas);
    }
}

/// Runs of one approach on one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub approach: String,
    pub task: String,
    pub metric: Metric,
    pub runs: Vec<RunResult>,
    /// `None` when every run failed with an error.
    pub aggregate: Option<Aggregate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellAggregate {
    pub approach: String,
    pub task: String,
    #[serde(flatten)]
    pub aggregate: Aggregate,
}

impl Cell {
    pub fn summary(&self) -> Option<CellAggregate> {
        self.aggregate.clone().map(|aggregate| CellAggregate {
            approach: self.approach.clone(),
            task: self.task.clone(),
            aggregate,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BenchmarkReport {
    pub cells: Vec<Cell>,
    pub steps: Vec<StepRecord>,
    pub deltas: Vec<DeltaRecord>,
    pub failures: Vec<RunFailure>,
}

impl BenchmarkReport {
    pub fn cell(&self, approach: &str, task: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.approach == approach && c.task == task)
    }

    pub fn runs(&self) -> Vec<RunResult> {
        self.cells.iter().flat_map(|c| c.runs.iter().cloned()).collect()
    }

    pub fn aggregates(&self) -> Vec<CellAggregate> {
        self.cells.iter().filter_map(Cell::summary).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// The threshold as written, or "none".
    pub threshold: String,
    pub approach: String,
    pub aggregate: Option<Aggregate>,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub task: String,
    pub metric: Metric,
    pub rows: Vec<SweepRow>,
    pub bench: BenchmarkReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub method: String,
    /// GU iteration, or -1 for the full fine-tuning endpoint.
    pub iteration: i64,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug)]
pub struct GuReport {
    pub task: String,
    pub metric: Metric,
    pub iterations: usize,
    pub trajectory: Vec<TrajectoryPoint>,
    /// Final-iteration results per method.
    pub finals: Vec<Cell>,
    pub steps: Vec<StepRecord>,
    pub deltas: Vec<DeltaRecord>,
    pub failures: Vec<RunFailure>,
}

impl GuReport {
    pub fn final_cell(&self, method: &str) -> Option<&Cell> {
        self.finals.iter().find(|c| c.approach == method)
    }

    pub fn runs(&self) -> Vec<RunResult> {
        self.finals.iter().flat_map(|c| c.runs.iter().cloned()).collect()
    }
}
