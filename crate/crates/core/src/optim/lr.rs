use crate::error::{Error, Result};

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then linear decay
/// to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> Result<f64> {
    if step > total_steps || warmup_steps > total_steps {
        return Err(Error::Config(format!(
            "lr schedule: step {step}, warmup {warmup_steps}, total {total_steps}"
        )));
    }
    if step < warmup_steps {
        return Ok(base_lr * (step as f64 / warmup_steps as f64));
    }
    if total_steps == warmup_steps {
        return Ok(base_lr);
    }
    Ok(base_lr * ((total_steps - step) as f64 / (total_steps - warmup_steps) as f64))
}

/// Warmup length for a fraction of the total step budget, rounded.
pub fn warmup_steps(total_steps: usize, fraction: f64) -> usize {
    ((total_steps as f64 * fraction).round() as usize).min(total_steps)
}
