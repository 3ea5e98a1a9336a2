use std::f64::consts::PI;

use super::TrainConfig;

/// Learning rate for `step`: linear warmup from 0 to `max_lr`, then cosine
/// decay to `final_lr_frac * max_lr` at `total_steps`. Steps past the end are
/// clamped to the final value.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.max_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.total_steps - cfg.warmup_steps).max(1) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    let f = cfg.final_lr_frac;
    cfg.max_lr * (f + (1.0 - f) * 0.5 * (1.0 + (PI * progress).cos()))
}
