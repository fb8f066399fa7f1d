use super::StagePlan;
use crate::error::{Error, Result};

/// Linear warmup from 0 over `ceil(warmup_ratio · total)` steps, then cosine
/// decay from `peak_lr` down to `min_lr` at `total`.
pub fn lr_at(step: usize, total: usize, plan: &StagePlan) -> Result<f64> {
    schedule(step, total, plan.peak_lr, plan.warmup_ratio, plan.min_lr)
}

pub fn schedule(step: usize, total: usize, peak: f64, warmup_ratio: f64, floor: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Usage("schedule needs at least one step".into()));
    }
    if step > total {
        return Err(Error::Usage(format!("step {step} beyond total {total}")));
    }
    let warmup = warmup_steps(total, warmup_ratio);
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let span = total - warmup;
    let progress = if span == 0 { 1.0 } else { (step - warmup) as f64 / span as f64 };
    Ok(floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

pub fn warmup_steps(total: usize, ratio: f64) -> usize {
    ((ratio * total as f64).ceil() as usize).min(total)
}
