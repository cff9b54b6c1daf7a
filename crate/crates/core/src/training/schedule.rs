use crate::training::TrainConfig;

/// Warmup-stable-decay learning rate at optimizer step `step`.
///
/// Linear from 0 to `lr` over the warmup, flat until the decay phase
/// covering the last `decay_fraction` of the run, then linear to 0 at
/// `total_steps`.
pub fn lr_at(step: usize, c: &TrainConfig) -> f64 {
    let step = step.min(c.total_steps) as f64;
    let warmup = c.warmup_steps as f64;
    let total = c.total_steps as f64;
    let decay_start = (1.0 - c.decay_fraction) * total;
    if step < warmup {
        c.lr * step / warmup
    } else if step <= decay_start || c.decay_fraction == 0.0 {
        c.lr
    } else {
        let span = total - decay_start.max(warmup);
        c.lr * ((total - step) / span).clamp(0.0, 1.0)
    }
}
