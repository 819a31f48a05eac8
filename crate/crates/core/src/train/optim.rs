//! AdamW with decoupled weight decay, global-norm gradient clipping,
//! and the warmup + cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::train::{Schedule, TrainConfig};

/// First/second moment buffers, aligned with the canonical parameter
/// traversal order.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: usize,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(param_sizes: &[usize]) -> Self {
        AdamState {
            m: param_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: param_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }
}

/// Scale all gradients so the global L2 norm does not exceed
/// `max_norm`; returns the pre-clip norm. Never increases the norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &x in g {
            let x = x.to_f64_lossy();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g {
                *x *= scale;
            }
        }
    }
    norm
}

/// One AdamW update over parameter slices in canonical order.
/// Decoupled decay: `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adamw_step",
            expected: format!("{} parameter tensors", state.m.len()),
            got: format!("{} params / {} grads", params.len(), grads.len()),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(cfg.adam_beta1);
    let b2 = T::from_f64(cfg.adam_beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - cfg.adam_beta1.powi(t));
    let bc2 = T::from_f64(1.0 - cfg.adam_beta2.powi(t));
    let eps = T::from_f64(cfg.adam_eps);
    let lr_t = T::from_f64(lr);
    let wd = T::from_f64(cfg.weight_decay);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.len() != g.len() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                expected: format!("{} elements", p.len()),
                got: format!("{}", g.len()),
            });
        }
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] = p[i] - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * p[i]);
        }
    }
    Ok(())
}

/// Learning rate at a step: linear warmup from zero to the peak, then
/// cosine decay to zero over the remaining steps.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let Schedule::Cosine { cycles } = cfg.schedule;
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.max_steps.saturating_sub(cfg.warmup_steps);
    let progress = if span == 0 {
        1.0
    } else {
        (step - cfg.warmup_steps) as f64 / span as f64
    };
    let progress = progress.clamp(0.0, 1.0);
    cfg.peak_lr * 0.5 * (1.0 + (2.0 * std::f64::consts::PI * cycles * progress).cos())
}
