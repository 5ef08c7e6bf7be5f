use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::params::{ParamGroup, ParamStore};
use crate::numerics::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Learning-rate factor of a parameter group. Block `i` of `depth` gets
/// `decay^(depth-1-i)`; embeddings sit one step below block 0; gates and
/// the head use the full rate.
pub fn lr_multiplier(group: ParamGroup, depth: usize, layer_decay: f64) -> f64 {
    match group {
        ParamGroup::Block(i) => layer_decay.powi((depth - 1 - i) as i32),
        ParamGroup::Embed => layer_decay.powi(depth as i32),
        ParamGroup::Gate | ParamGroup::Head => 1.0,
    }
}

/// Linear warmup to the peak, then cosine decay to zero. `step` is 0-based.
pub fn schedule_lr(cfg: &TrainConfig, step: usize, total_steps: usize, steps_per_epoch: usize) -> f64 {
    let warm = (cfg.warmup_epochs * steps_per_epoch).min(total_steps);
    if step < warm {
        return cfg.peak_lr * (step + 1) as f64 / warm as f64;
    }
    let span = (total_steps - warm).max(1) as f64;
    let progress = (step - warm) as f64 / span;
    0.5 * cfg.peak_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        for v in g.data() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// First and second moments plus a per-parameter step count.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub steps: Vec<u64>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; store.len()],
        }
    }
}

/// One AdamW update with decoupled weight decay. Parameters whose gradient
/// is `None` are skipped entirely.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    lrs: &[f64],
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != store.len() || lrs.len() != store.len() {
        return Err(Error::Contract(format!(
            "{} params, {} grads, {} learning rates",
            store.len(),
            grads.len(),
            lrs.len()
        )));
    }
    for (p, g) in store.iter().map(|(_, p)| p).zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(Error::shape("adamw", p.value.shape(), g.shape()));
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in {}", p.name)));
            }
        }
    }
    for (j, p) in store.iter_mut().enumerate() {
        let Some(g) = &grads[j] else { continue };
        state.steps[j] += 1;
        let t = state.steps[j] as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let lr = lrs[j];
        let shrink = if p.decay { 1.0 - lr * weight_decay } else { 1.0 };
        let (m, v) = (&mut state.m[j], &mut state.v[j]);
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
            *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
            let update = (*mi / bc1) / ((*vi / bc2).sqrt() + EPS);
            *w = *w * shrink - lr * update;
        }
    }
    Ok(())
}
