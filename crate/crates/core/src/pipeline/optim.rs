//! AdamW with decoupled weight decay, global-norm clipping and the
//! warmup-then-cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments per parameter, indexed like the store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update of every trainable parameter. Weight decay is applied
    /// only to parameters whose [`decays`](crate::numerics::Parameter::decays)
    /// is true. Non-finite gradients abort before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, weight_decay: f64) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| p.trainable && !p.grad.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {} contains NaN/Inf at optimizer step {}",
                p.name,
                self.step + 1
            )));
        }
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let fresh = |m: &Option<Tensor>| m.as_ref().is_none_or(|m| m.shape() != p.value.shape());
            if fresh(&self.m[i]) {
                self.m[i] = Some(Tensor::zeros(p.value.shape()));
                self.v[i] = Some(Tensor::zeros(p.value.shape()));
            }
            let decay = p.decays();
            let m = self.m[i].as_mut().expect("initialised").data_mut();
            let v = self.v[i].as_mut().expect("initialised").data_mut();
            let w = p.value.data_mut();
            for (k, &gk) in p.grad.data().iter().enumerate() {
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
                if decay {
                    w[k] -= lr * weight_decay * w[k];
                }
                w[k] -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Rescales trainable gradients so their global L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for p in store.iter_mut().filter(|p| p.trainable) {
            p.grad.scale_assign(k);
        }
    }
    norm
}

/// Linear warmup from 0 to `lr` over the first `warmup / epochs` of
/// training, then cosine decay to 0. `fraction` is progress in `[0, 1]`.
pub fn lr_at(fraction: f64, lr: f64, warmup_epochs: f64, epochs: f64) -> f64 {
    let f = fraction.clamp(0.0, 1.0);
    let w = (warmup_epochs / epochs).clamp(0.0, 1.0);
    if w > 0.0 && f < w {
        lr * f / w
    } else if w >= 1.0 {
        lr
    } else {
        lr * 0.5 * (1.0 + (PI * (f - w) / (1.0 - w)).cos())
    }
}
