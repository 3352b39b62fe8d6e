use crate::error::{Error, Result};
use crate::harness::metrics::Metric;
use crate::model::{Model, Scope, Snapshot};
use crate::numerics::{cosine_slice, rmsd_slice};

use super::records::{Aggregate, ComponentDelta, LayerDelta, Outcome, RunResult};

/// Parameter change of one layer (or the embed/head group) against
/// `reference`.
pub fn layer_delta(model: &Model, reference: &Snapshot, layer: Scope) -> Result<LayerDelta> {
    let mut components = Vec::new();
    for id in model.components_in(layer) {
        let cur = model.param(id.as_str())?;
        let refv = reference.get(id.as_str())?;
        if cur.shape() != refv.shape() {
            return Err(Error::shape(
                "layer_delta",
                format!("{id}: {:?} vs reference {:?}", cur.shape(), refv.shape()),
            ));
        }
        components.push(ComponentDelta {
            rmsd: rmsd_slice(cur.data(), refv.data()),
            cosine: cosine_slice(cur.data(), refv.data()),
            component: id,
        });
    }
    if components.is_empty() {
        return Err(Error::Config(format!("no components in layer {layer}")));
    }
    let max_rmsd = components.iter().map(|c| c.rmsd).fold(f64::NEG_INFINITY, f64::max);
    let min_cosine = components.iter().map(|c| c.cosine).fold(f64::INFINITY, f64::min);
    Ok(LayerDelta {
        layer,
        max_rmsd,
        min_cosine,
        components,
    })
}

/// [`layer_delta`] for embed, every layer bottom-up, and head.
pub fn model_deltas(model: &Model, reference: &Snapshot) -> Result<Vec<LayerDelta>> {
    model
        .scopes()
        .into_iter()
        .map(|s| layer_delta(model, reference, s))
        .collect()
}

/// A run fails unless it strictly beats the majority classifier.
pub fn classify_run(
    metric: Metric,
    value: f64,
    baseline_metric: Metric,
    baseline: f64,
) -> Result<Outcome> {
    if metric != baseline_metric {
        return Err(Error::Metric(format!(
            "value measured as {metric} but baseline as {baseline_metric}"
        )));
    }
    Ok(if value > baseline {
        Outcome::Success
    } else {
        Outcome::Failed
    })
}

/// Sample standard deviation (n-1), mean, max, min and failed share.
pub fn aggregate_runs(results: &[RunResult]) -> Result<Aggregate> {
    let first = results
        .first()
        .ok_or_else(|| Error::Metric("cannot aggregate zero runs".into()))?;
    if let Some(other) = results.iter().find(|r| r.metric != first.metric) {
        return Err(Error::Metric(format!(
            "mixed metrics {} and {}",
            first.metric, other.metric
        )));
    }
    let n = results.len();
    let max = results.iter().map(|r| r.value).fold(f64::NEG_INFINITY, f64::max);
    let min = results.iter().map(|r| r.value).fold(f64::INFINITY, f64::min);
    let mut mean = results.iter().map(|r| r.value).sum::<f64>() / n as f64;
    if min == max {
        mean = min;
    }
    let std = if n > 1 && min < max {
        let ss: f64 = results.iter().map(|r| (r.value - mean) * (r.value - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let failed = results.iter().filter(|r| r.failed).count();
    Ok(Aggregate {
        metric: first.metric,
        n,
        std,
        // keep min <= mean <= max under rounding
        mean: mean.clamp(min, max),
        max,
        min,
        failed_fraction: failed as f64 / n as f64,
    })
}
