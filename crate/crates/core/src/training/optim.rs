use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Real, Tensor};

/// Scales every gradient by `limit / ‖g‖` when the global L2 norm exceeds
/// `limit`. Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(params: &mut ParamSet<T>, limit: f64) -> Result<f64> {
    if !(limit > 0.0) {
        return Err(Error::invalid("clip_global_norm", format!("limit must be > 0, got {limit}")));
    }
    let norm = params
        .iter()
        .map(|p| p.grad.data().iter().map(|g| g.to_f64_lossy().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > limit {
        let s = T::from_f64_lossy(limit / norm);
        for p in params.iter_mut() {
            p.grad.scale(s);
        }
    }
    Ok(norm)
}

/// Bias-corrected Adam with one moment pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

/// Scalar part of [`Adam`], as stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamScalars {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn scalars(&self) -> AdamScalars {
        AdamScalars {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            step: self.step,
        }
    }

    pub fn from_parts(s: AdamScalars, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Self {
        Adam {
            lr: s.lr,
            beta1: s.beta1,
            beta2: s.beta2,
            eps: s.eps,
            step: s.step,
            m,
            v,
        }
    }

    /// One update from the gradients stored in `params`.
    pub fn update(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::invalid(
                "Adam::update",
                format!("{} moment tensors for {} parameters", self.m.len(), params.len()),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let one = T::one();
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        let lr = T::from_f64_lossy(self.lr);
        let eps = T::from_f64_lossy(self.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            if m.shape() != p.value.shape() {
                return Err(Error::shape("Adam::update", m.shape(), p.value.shape()));
            }
            let g = p.grad.data();
            let (m, v, w) = (m.data_mut(), v.data_mut(), p.value.data_mut());
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decision {
    Improved,
    DividedLr { from: f64, to: f64 },
    /// Schedule disabled and no improvement.
    Continue,
    Stop { reason: String },
}

/// Divide-on-plateau learning-rate schedule with patience-based stopping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub enabled: bool,
    pub best: Option<f64>,
    pub since_improvement: usize,
    pub divisions: usize,
    pub patience: usize,
    pub divisor: f64,
}

impl Schedule {
    pub fn new(enabled: bool, patience: usize, divisor: f64) -> Self {
        Schedule {
            enabled,
            best: None,
            since_improvement: 0,
            divisions: 0,
            patience,
            divisor,
        }
    }

    /// Applies the end-of-epoch rule: a strictly lower loss than the best
    /// so far is an improvement; otherwise the rate is divided, and once
    /// `patience` divisions have been spent the next plateau stops the run.
    pub fn end_of_epoch<T>(&mut self, valid_loss: f64, opt: &mut Adam<T>) -> Decision {
        if !valid_loss.is_finite() {
            return Decision::Stop {
                reason: format!("validation loss is {valid_loss}"),
            };
        }
        if self.best.is_none_or(|b| valid_loss < b) {
            self.best = Some(valid_loss);
            self.since_improvement = 0;
            return Decision::Improved;
        }
        self.since_improvement += 1;
        if !self.enabled {
            return Decision::Continue;
        }
        if self.divisions >= self.patience {
            return Decision::Stop {
                reason: format!("no improvement after {} learning-rate divisions", self.divisions),
            };
        }
        let from = opt.lr;
        opt.lr /= self.divisor;
        self.divisions += 1;
        Decision::DividedLr { from, to: opt.lr }
    }
}
