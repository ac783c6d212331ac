//! One-cycle cosine learning-rate schedule.

use std::f64::consts::PI;

/// Linear ramp from 0 to `peak` over `warmup` steps, then cosine decay to 0
/// at `total`. Steps past `total` stay at 0.
pub fn one_cycle_lr(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = (total - warmup) as f64;
    let t = (step - warmup) as f64 / span;
    0.5 * peak * (1.0 + (PI * t).cos())
}
