use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::harness::metrics::Metric;
use crate::model::{Binder, ComponentId, Model, Params, Scope, Selector, Snapshot};
use crate::numerics::{Graph, Tensor, Var};
use crate::optim::{
    clip_in_place, lr_at, warmup_steps, AdamW, ClipPolicy, ClipReport, GradMap, OptimConfig,
};
use crate::seed;
use crate::telemetry::{classify_run, Outcome, RunTelemetry};

/// How per-example cross-entropies combine into the batch loss. Adam is
/// nearly invariant to the scale of the loss, but clipping thresholds are
/// not: `Sum` multiplies every gradient norm by the batch size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    #[default]
    Mean,
    Sum,
}

/// Everything a fine-tuning run needs besides the model and its schedule.
#[derive(Clone, Debug)]
pub struct FineTuneSetup<'a> {
    pub data: &'a Dataset,
    pub metric: Metric,
    /// Drives data order; the head is drawn by the caller.
    pub seed: u64,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub clip: ClipPolicy,
    pub loss_reduction: LossReduction,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub metric: Metric,
    pub value: f64,
    pub majority_baseline: f64,
    pub outcome: Outcome,
}

impl Evaluation {
    pub fn failed(&self) -> bool {
        self.outcome == Outcome::Failed
    }
}

pub struct StepOutcome {
    pub loss: f64,
    pub report: ClipReport,
}

/// Backward from `loss`, clip, then one AdamW update of the components in
/// `vars`. Clipping always happens before the optimizer sees the gradient.
pub fn apply_step(
    model: &mut Model,
    graph: &Graph,
    vars: &[(ComponentId, Var)],
    loss: Var,
    clip: &ClipPolicy,
    opt: &mut AdamW,
    lr: f64,
) -> Result<StepOutcome> {
    let mut grads = graph.backward(loss)?;
    let mut map = GradMap::new();
    for (id, var) in vars {
        let g = grads
            .take(*var)
            .ok_or_else(|| Error::Graph(format!("no gradient reached {id}")))?;
        let shape = graph.value(*var).shape().to_vec();
        map.insert(id.clone(), Tensor::new(shape, g)?);
    }
    let report = clip_in_place(&mut map, clip)?;
    opt.step(model.params_mut(), &map, lr)?;
    Ok(StepOutcome {
        loss: graph.value(loss).item(),
        report,
    })
}

/// Cross-entropy of a classification batch with gradients for `trainable`
/// components only. The reported loss is always the batch mean.
pub fn classification_step(
    model: &mut Model,
    batch: &[&Example],
    trainable: &BTreeSet<ComponentId>,
    clip: &ClipPolicy,
    reduction: LossReduction,
    opt: &mut AdamW,
    lr: f64,
) -> Result<StepOutcome> {
    let tokens: Vec<Vec<usize>> = batch.iter().map(|e| e.tokens.clone()).collect();
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let mut graph = Graph::new();
    let is_trainable = |id: &ComponentId| trainable.contains(id);
    let (loss, vars) = {
        let mut bind = Binder::new(model, &is_trainable);
        let logits = model.classify_graph(&mut graph, &mut bind, &tokens)?;
        let loss = graph.cross_entropy(logits, &labels)?;
        (loss, bind.trainable_vars(&graph))
    };
    let objective = match reduction {
        LossReduction::Mean => loss,
        LossReduction::Sum => graph.scale(loss, batch.len() as f64)?,
    };
    let mut out = apply_step(model, &graph, &vars, objective, clip, opt, lr)?;
    out.loss = graph.value(loss).item();
    Ok(out)
}

/// One training phase: `epochs` passes over the training split with a fresh
/// warmup/decay schedule, shuffled from `order_seed`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn train_phase(
    model: &mut Model,
    setup: &FineTuneSetup<'_>,
    trainable: &BTreeSet<ComponentId>,
    epochs: usize,
    order_seed: u64,
    opt: &mut AdamW,
    telemetry: &mut RunTelemetry,
    iteration: i64,
    global_step: &mut u64,
    trace: Option<&mut Vec<Params>>,
) -> Result<()> {
    let n = setup.data.train.len();
    if n == 0 || setup.batch_size == 0 {
        return Err(Error::Config("empty training split or zero batch size".into()));
    }
    let per_epoch = n.div_ceil(setup.batch_size);
    let total = epochs * per_epoch;
    let warmup = warmup_steps(total, setup.optim.warmup_fraction);
    let base_lr = setup.optim.lr;
    let mut rng = seed::rng(order_seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut local = 0;
    let mut trace = trace;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(setup.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &setup.data.train[i]).collect();
            let lr = lr_at(local, total, warmup, base_lr)?;
            let out = classification_step(model, &batch, trainable, &setup.clip, setup.loss_reduction, opt, lr)?;
            telemetry.record_step(iteration, *global_step, out.loss, lr, &out.report);
            if let Some(t) = trace.as_deref_mut() {
                t.push(model.params().clone());
            }
            local += 1;
            *global_step += 1;
        }
    }
    Ok(())
}

/// Validation metric and the majority-classifier comparison.
pub fn evaluate(model: &Model, data: &Dataset, metric: Metric) -> Result<Evaluation> {
    let tokens: Vec<Vec<usize>> = data.validation.iter().map(|e| e.tokens.clone()).collect();
    let labels = data.validation_labels();
    let preds = model.predict(&tokens)?;
    let value = metric.evaluate(&preds, &labels)?;
    let majority_baseline = metric.majority_baseline(data.majority_label(), &labels)?;
    let outcome = classify_run(metric, value, metric, majority_baseline)?;
    Ok(Evaluation {
        metric,
        value,
        majority_baseline,
        outcome,
    })
}

/// Seed for the shuffling stream of a phase that trains the top `depth`
/// layers. Full fine-tuning and the last GU iteration share a stream.
pub fn order_seed(run_seed: u64, depth: usize) -> u64 {
    seed::derive(run_seed, &["order", &depth.to_string()])
}

/// Loads the pretrained body into `model` and draws a fresh classifier head
/// from `head_seed`. Returns the "pretrained" reference snapshot of the
/// result. The head of `pretrained` is ignored, so its class count may differ.
pub fn prepare_run(pretrained: &Snapshot, model: &mut Model, head_seed: u64) -> Result<Snapshot> {
    let body: BTreeSet<Scope> = model.scopes().into_iter().filter(|s| *s != Scope::Head).collect();
    pretrained.restore(model, &Selector::Scopes(body))?;
    model.reinit_head(head_seed);
    Ok(Snapshot::of(model, "pretrained"))
}
