use serde::{Deserialize, Serialize};

use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected ADAM over a fixed list of parameter slots. Moment buffers
/// are allocated on the first update and must keep their slot lengths.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn moments(&self, slot: usize) -> Option<(&[T], &[T])> {
        Some((self.m.get(slot)?.as_slice(), self.v.get(slot)?.as_slice()))
    }

    /// One update. A `None` gradient leaves that slot (and its moments)
    /// untouched. Any non-finite gradient aborts before anything changes.
    pub fn update(&mut self, params: &mut [&mut [T]], grads: &[Option<&[T]>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter slots, {} gradient slots",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::ZERO; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::ShapeMismatch("optimizer slot count changed".into()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() {
                return Err(Error::ShapeMismatch(format!("slot {i} changed length")));
            }
            if let Some(g) = g {
                if g.len() != p.len() {
                    return Err(Error::ShapeMismatch(format!("slot {i}: gradient length")));
                }
                if let Some(k) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient slot {i} entry {k}")));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                let gk = g[k].to_f64();
                let mk = c.beta1 * m[k].to_f64() + (1.0 - c.beta1) * gk;
                let vk = c.beta2 * v[k].to_f64() + (1.0 - c.beta2) * gk * gk;
                m[k] = T::from_f64(mk);
                v[k] = T::from_f64(vk);
                let upd = c.lr * (mk / bc1) / ((vk / bc2).sqrt() + c.eps);
                p[k] = T::from_f64(p[k].to_f64() - upd);
            }
        }
        Ok(())
    }
}
