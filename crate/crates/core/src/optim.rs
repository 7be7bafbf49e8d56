//! AdamW with decoupled weight decay, and a linear-warmup cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamWConfig {
    fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW hyperparameters {self:?}")))
        }
    }
}

/// First and second moments for every parameter tensor, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new<'a>(sizes: impl IntoIterator<Item = &'a usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().copied().collect();
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }
}

/// One AdamW update in place.
///
/// Weight decay is applied to the parameter first, `p ← p·(1 − lr·wd)`, and
/// then the bias-corrected Adam step `p ← p − lr·m̂/(√v̂ + eps)`.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut AdamWState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    cfg.validate()?;
    if lr < 0.0 {
        return Err(Error::Config(format!("negative learning rate {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(dim_err(format!(
            "{} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() || p.len() != state.v[i].len() {
            return Err(dim_err(format!(
                "parameter {i}: {} values, {} grads, moments {}/{}",
                p.len(),
                g.len(),
                state.m[i].len(),
                state.v[i].len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let decay = T::lit(1.0 - lr * cfg.weight_decay);
    let step_size = T::lit(lr / bc1);
    let inv_bc2 = T::lit(1.0 / bc2);
    let eps = T::lit(cfg.eps);

    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in 0..p.len() {
            let gk = g[k];
            m[k] = b1 * m[k] + one_b1 * gk;
            v[k] = b2 * v[k] + one_b2 * gk * gk;
            let denom = (v[k] * inv_bc2).sqrt() + eps;
            p[k] = p[k] * decay - step_size * m[k] / denom;
        }
    }
    Ok(())
}

/// Linear warmup from `warmup_start` to `base`, then cosine decay to `floor`
/// reached exactly at the last step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupCosine {
    pub base: f64,
    pub warmup_start: f64,
    pub floor: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl WarmupCosine {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return self.warmup_start + (self.base - self.warmup_start) * frac;
        }
        let span = self
            .total_steps
            .saturating_sub(1)
            .saturating_sub(self.warmup_steps)
            .max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.floor + (self.base - self.floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
