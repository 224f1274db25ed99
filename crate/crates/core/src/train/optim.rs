use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::tensor::Tensor;

use super::config::AdamWConfig;

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamWState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape().clone())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update with decoupled weight decay:
///
/// ```text
/// p ← p − lr·wd·p
/// m ← β1·m + (1 − β1)·g;   v ← β2·v + (1 − β2)·g²
/// p ← p − lr·m̂ / (√v̂ + eps)      (m̂, v̂ bias-corrected)
/// ```
///
/// Every gradient is checked before any parameter changes; a non-finite
/// entry aborts with the parameter's name.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamWState,
    lr: f64,
    weight_decay: f64,
    hp: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients / {} moment tensors for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (id, g) in params.ids().zip(grads) {
        if g.numel() != params.get(id).numel() {
            return Err(Error::Contract(format!("gradient shape for `{}`", params.name(id))));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(params.name(id).to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let p = params.get_mut(id).data_mut();
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            p[j] -= lr * weight_decay * p[j];
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then cosine decay
/// to `final_fraction · base_lr` at `total_steps`.
pub fn cosine_lr(
    step: usize,
    total_steps: usize,
    warmup_steps: usize,
    base_lr: f64,
    final_fraction: f64,
) -> Result<f64> {
    if warmup_steps >= total_steps {
        return Err(Error::InvalidArgument(format!(
            "warmup_steps {warmup_steps} must be below total_steps {total_steps}"
        )));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond total_steps {total_steps}"
        )));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    let floor = final_fraction * base_lr;
    Ok(floor + (base_lr - floor) * 0.5 * (1.0 + (PI * progress).cos()))
}
