use std::f64::consts::PI;

use super::ScheduleConfig;

/// Learning rate at training progress `t ∈ [0, 1]`.
///
/// Ramps linearly from `warmup_factor · base_lr` to `base_lr` over the
/// warmup span, then follows a half cosine from `base_lr` down to
/// `final_lr` at `t = 1`.
pub fn lr_at(s: &ScheduleConfig, t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    let warm = if s.total_epochs == 0 {
        0.0
    } else {
        s.warmup_epochs as f64 / s.total_epochs as f64
    };
    if t < warm {
        let alpha = t / warm;
        return s.base_lr * (s.warmup_factor + (1.0 - s.warmup_factor) * alpha);
    }
    if warm >= 1.0 {
        return s.base_lr;
    }
    let progress = (t - warm) / (1.0 - warm);
    s.final_lr + 0.5 * (s.base_lr - s.final_lr) * (1.0 + (PI * progress).cos())
}
