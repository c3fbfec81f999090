use std::f64::consts::PI;

/// Linear ramp from `start` at step 0 to `end` at `total`.
pub fn momentum_schedule(step: u64, total: u64, start: f64, end: f64) -> f64 {
    if total == 0 {
        return start;
    }
    let f = step.min(total) as f64 / total as f64;
    start + (end - start) * f
}

/// Cosine annealing from `lr0` at step 0 down to 0 at `total`.
pub fn cosine_lr(step: u64, total: u64, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let f = step.min(total) as f64 / total as f64;
    0.5 * lr0 * (1.0 + (PI * f).cos())
}
