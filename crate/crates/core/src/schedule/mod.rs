//! Fine-tuning regimes: full fine-tuning and top-down gradual unfreezing,
//! with or without restarting from the pretrained weights each iteration.

mod trainer;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use trainer::{
    apply_step, classification_step, evaluate, order_seed, prepare_run, Evaluation,
    FineTuneSetup, LossReduction, StepOutcome,
};

use crate::error::{Error, Result};
use crate::model::{ComponentId, Model, Params, Scope, Selector, Snapshot};
use crate::optim::AdamW;
use crate::telemetry::{model_deltas, Reference, RunTelemetry};

/// Iteration label used for full fine-tuning records.
pub const FULL_FT_ITERATION: i64 = -1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuConfig {
    pub epochs_per_iteration: usize,
    /// Number of iterations to run; `None` means one per layer.
    pub max_iterations: Option<usize>,
    pub restart: bool,
    pub include_head_always: bool,
    pub include_embed_at_last: bool,
}

impl Default for GuConfig {
    fn default() -> Self {
        GuConfig {
            epochs_per_iteration: 3,
            max_iterations: None,
            restart: false,
            include_head_always: true,
            include_embed_at_last: true,
        }
    }
}

impl GuConfig {
    pub fn iterations(&self, num_layers: usize) -> Result<usize> {
        let t = self.max_iterations.unwrap_or(num_layers);
        if t == 0 || t > num_layers {
            return Err(Error::Config(format!(
                "GU max_iterations must lie in 1..={num_layers}, got {t}"
            )));
        }
        if self.epochs_per_iteration == 0 {
            return Err(Error::Config("GU epochs_per_iteration must be at least 1".into()));
        }
        Ok(t)
    }
}

/// Layers trained at GU iteration `k` (0-based): `{L-k, ..., L}`.
pub fn gu_layers(num_layers: usize, k: usize) -> Result<Vec<usize>> {
    if k >= num_layers {
        return Err(Error::Config(format!(
            "GU iteration {k} out of range for {num_layers} layers"
        )));
    }
    Ok((num_layers - k..=num_layers).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationPlan {
    pub iteration: usize,
    pub layers: Vec<usize>,
    pub trainable: BTreeSet<ComponentId>,
    /// Label of the snapshot deltas are measured against incrementally.
    pub reference_label: String,
}

pub fn plan_iterations(model: &Model, cfg: &GuConfig) -> Result<Vec<IterationPlan>> {
    let num_layers = model.config().num_layers;
    let iterations = cfg.iterations(num_layers)?;
    (0..iterations)
        .map(|k| {
            let layers = gu_layers(num_layers, k)?;
            let last = k == num_layers - 1;
            let mut trainable = BTreeSet::new();
            for &i in &layers {
                trainable.extend(model.components_of_layer(i)?);
            }
            if cfg.include_head_always || last {
                trainable.extend(model.components_in(Scope::Head));
            }
            if cfg.include_embed_at_last && last {
                trainable.extend(model.components_in(Scope::Embed));
            }
            let reference_label = if k == 0 {
                "pretrained".to_string()
            } else {
                format!("iteration-{}", k - 1)
            };
            Ok(IterationPlan {
                iteration: k,
                layers,
                trainable,
                reference_label,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationResult {
    pub iteration: usize,
    pub layers: Vec<usize>,
    pub evaluation: Evaluation,
}

/// Optional per-step copy of all parameters, for trajectory comparisons.
pub type ParamTrace = Vec<Params>;

/// Full fine-tuning for `epochs` epochs. `model` must already hold the
/// pretrained body and a fresh head, equal to `pretrained`.
pub fn run_full_finetune(
    model: &mut Model,
    pretrained: &Snapshot,
    setup: &FineTuneSetup<'_>,
    epochs: usize,
    telemetry: &mut RunTelemetry,
    trace: Option<&mut ParamTrace>,
) -> Result<Evaluation> {
    setup.clip.validate()?;
    let trainable: BTreeSet<ComponentId> = model.component_ids().cloned().collect();
    let mut opt = AdamW::new(setup.optim.hyper())?;
    let depth = model.config().num_layers;
    let mut step = 0;
    trainer::train_phase(
        model,
        setup,
        &trainable,
        epochs,
        order_seed(setup.seed, depth),
        &mut opt,
        telemetry,
        FULL_FT_ITERATION,
        &mut step,
        trace,
    )?;
    telemetry.record_delta(
        FULL_FT_ITERATION,
        Reference::Pretrained,
        model_deltas(model, pretrained)?,
    );
    evaluate(model, setup.data, setup.metric)
}

/// Top-down gradual unfreezing. Iteration `k` trains layers `L-k..=L`
/// (plus head, and embed at the last iteration, per `cfg`) for
/// `cfg.epochs_per_iteration` epochs; everything else stays bit-identical.
///
/// With `cfg.restart`, the trainable components are copied back from
/// `pretrained` and the optimizer state is dropped at the start of every
/// iteration. Without it, previously trained components keep their values
/// and moments, and newly unfrozen ones start from zero moments.
pub fn run_gradual_unfreezing(
    model: &mut Model,
    pretrained: &Snapshot,
    setup: &FineTuneSetup<'_>,
    cfg: &GuConfig,
    telemetry: &mut RunTelemetry,
    mut trace: Option<&mut ParamTrace>,
) -> Result<Vec<IterationResult>> {
    setup.clip.validate()?;
    let plans = plan_iterations(model, cfg)?;
    let mut opt = AdamW::new(setup.optim.hyper())?;
    let mut previous = pretrained.clone();
    let mut step = 0;
    let mut results = Vec::with_capacity(plans.len());
    for plan in plans {
        if cfg.restart {
            pretrained.restore(model, &Selector::Components(plan.trainable.clone()))?;
            opt.reset();
        }
        let k = plan.iteration as i64;
        trainer::train_phase(
            model,
            setup,
            &plan.trainable,
            cfg.epochs_per_iteration,
            order_seed(setup.seed, plan.layers.len()),
            &mut opt,
            telemetry,
            k,
            &mut step,
            trace.as_deref_mut(),
        )?;
        let evaluation = evaluate(model, setup.data, setup.metric)?;
        telemetry.record_delta(k, Reference::Pretrained, model_deltas(model, pretrained)?);
        telemetry.record_delta(k, Reference::PreviousIteration, model_deltas(model, &previous)?);
        previous = Snapshot::of(model, format!("iteration-{k}"));
        results.push(IterationResult {
            iteration: plan.iteration,
            layers: plan.layers,
            evaluation,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn gu_layer_sets() {
        assert_eq!(gu_layers(4, 0).unwrap(), vec![4]);
        assert_eq!(gu_layers(4, 2).unwrap(), vec![2, 3, 4]);
        assert_eq!(gu_layers(4, 3).unwrap(), vec![1, 2, 3, 4]);
        assert!(gu_layers(4, 4).is_err());
    }

    #[test]
    fn plans_grow_monotonically() {
        let m = Model::new(ModelConfig {
            num_layers: 4,
            hidden: 8,
            num_heads: 2,
            ffn: 8,
            vocab: 10,
            max_seq_len: 4,
            num_classes: 2,
            init_std: 0.02,
            seed: 0,
        })
        .unwrap();
        let plans = plan_iterations(&m, &GuConfig::default()).unwrap();
        assert_eq!(plans.len(), 4);
        assert!(plans[0].trainable.iter().all(|c| matches!(
            c.scope(),
            Some(Scope::Layer(4) | Scope::Head)
        )));
        for w in plans.windows(2) {
            assert!(w[0].trainable.is_subset(&w[1].trainable));
        }
        for k in 1..3 {
            let added = plans[k].trainable.len() - plans[k - 1].trainable.len();
            assert_eq!(added, m.components_of_layer(4 - k).unwrap().len());
        }
        let all: BTreeSet<_> = m.component_ids().cloned().collect();
        assert_eq!(plans[3].trainable, all);
        assert_eq!(plans[2].reference_label, "iteration-1");
        assert!(GuConfig { max_iterations: Some(5), ..GuConfig::default() }
            .iterations(4)
            .is_err());
    }
}
