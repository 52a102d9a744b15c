use std::f64::consts::PI;

use super::OptimConfig;

/// Index of the first step at full learning rate.
pub fn warmup_end(total_steps: usize, cfg: &OptimConfig) -> usize {
    ((cfg.warmup_fraction * total_steps as f64).floor() as usize).min(total_steps)
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to `min_lr` at
/// `total_steps`. Steps past the end stay at `min_lr`.
pub fn schedule_lr(step: usize, total_steps: usize, cfg: &OptimConfig) -> f64 {
    let we = warmup_end(total_steps, cfg);
    if step < we {
        return cfg.peak_lr * step as f64 / we as f64;
    }
    if total_steps == we {
        return cfg.peak_lr;
    }
    let progress = ((step - we) as f64 / (total_steps - we) as f64).min(1.0);
    cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * 0.5 * (1.0 + (PI * progress).cos())
}
