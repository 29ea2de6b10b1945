//! Single-step recurrences: the standard LSTM, the three HMLSTM layer kinds
//! and the HMRNN variant.
//!
//! [`vectorized`] holds the batch-masked forms recorded on a tape (the
//! training path); [`branch`] holds per-row evaluations that pick the
//! FLUSH / COPY / UPDATE branch explicitly. The two are expected to agree.

pub mod branch;
pub mod conformance;
pub mod vectorized;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

pub use vectorized::{
    hmlstm_bottom_step, hmlstm_middle_step, hmlstm_step, hmlstm_top_step, hmrnn_bottom_step,
    hmrnn_middle_step, hmrnn_step, hmrnn_top_step, lstm_step, StepVars,
};

/// Ablation switches shared by every cell of a stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFlags {
    pub use_layer_norm: bool,
    /// Top layer COPY also copies `h` (otherwise `h = σ(o)⊙tanh(c_{t−1})`).
    pub copy_last: bool,
    pub no_top_down: bool,
    pub slope_alpha: f64,
    pub ln_eps: f64,
}

impl Default for CellFlags {
    fn default() -> Self {
        CellFlags {
            use_layer_norm: true,
            copy_last: false,
            no_top_down: false,
            slope_alpha: 0.5,
            ln_eps: crate::numerics::LN_EPS,
        }
    }
}

impl CellFlags {
    /// The eight combinations of layer norm, copy-last and no-top-down.
    pub fn grid() -> Vec<CellFlags> {
        let mut grid = Vec::new();
        for use_layer_norm in [false, true] {
            for copy_last in [false, true] {
                for no_top_down in [false, true] {
                    grid.push(CellFlags {
                        use_layer_norm,
                        copy_last,
                        no_top_down,
                        ..CellFlags::default()
                    });
                }
            }
        }
        grid
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.slope_alpha > 0.0) || !self.slope_alpha.is_finite() {
            return Err(Error::Config(format!(
                "slope_alpha must be > 0, got {}",
                self.slope_alpha
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config(format!("ln_eps must be > 0, got {}", self.ln_eps)));
        }
        Ok(())
    }
}

/// Learned gain and bias of one layer-norm.
#[derive(Clone, Debug)]
pub struct StreamNorm<P> {
    pub gain: P,
    pub bias: P,
}

/// Separate norms for the bottom-up (W), recurrent (U) and top-down (V)
/// pre-activation streams.
#[derive(Clone, Debug)]
pub struct LayerNorms<P> {
    pub w: StreamNorm<P>,
    pub u: StreamNorm<P>,
    pub v: Option<StreamNorm<P>>,
}

/// Weights of one layer. `P` is either a [`Tensor`] (stored values) or a
/// [`Var`] (values bound to a tape).
///
/// Matrices multiply batch-major rows from the right: `x·W` with `W` of
/// shape `[input, out]`. For boundary-producing layers the last output
/// column is the z-logit.
#[derive(Clone, Debug)]
pub struct LayerWeights<P> {
    pub w: P,
    pub u: P,
    pub v: Option<P>,
    pub b: P,
    pub norms: Option<LayerNorms<P>>,
}

impl<T: Real> LayerWeights<Tensor<T>> {
    /// Records every tensor as a constant leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> LayerWeights<Var> {
        self.map(|t| tape.leaf(t.clone()))
    }

    pub fn units(&self) -> usize {
        self.u.rows()
    }
}

impl<P> LayerWeights<P> {
    /// Every tensor in a fixed order: W, U, V, b, then the norms.
    pub fn tensors(&self) -> Vec<&P> {
        let mut out = vec![&self.w, &self.u];
        out.extend(self.v.as_ref());
        out.push(&self.b);
        if let Some(n) = &self.norms {
            out.extend([&n.w.gain, &n.w.bias, &n.u.gain, &n.u.bias]);
            if let Some(v) = &n.v {
                out.extend([&v.gain, &v.bias]);
            }
        }
        out
    }

    /// Rebuilds the same structure, visiting tensors in [`Self::tensors`] order.
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> LayerWeights<Q> {
        let w = f(&self.w);
        let u = f(&self.u);
        let v = self.v.as_ref().map(&mut f);
        let b = f(&self.b);
        let norms = self.norms.as_ref().map(|n| {
            let mut sn = |s: &StreamNorm<P>| StreamNorm {
                gain: f(&s.gain),
                bias: f(&s.bias),
            };
            LayerNorms {
                w: sn(&n.w),
                u: sn(&n.u),
                v: n.v.as_ref().map(&mut sn),
            }
        });
        LayerWeights { w, u, v, b, norms }
    }
}

/// Dimensions of one layer's weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub input: usize,
    pub units: usize,
    /// 4 for LSTM-style layers (i, f, u, o), 1 for Elman-style layers.
    pub per_unit: usize,
    /// Adds the z-logit column.
    pub boundary: bool,
    /// Width of the layer above when a top-down matrix exists.
    pub top_down: Option<usize>,
    pub layer_norm: bool,
}

impl LayerShape {
    pub fn out(&self) -> usize {
        self.per_unit * self.units + usize::from(self.boundary)
    }

    /// Weights drawn uniformly from `[-scale, scale]`, LN gains near 1.
    pub fn uniform<T: Real, R: rand::Rng>(&self, rng: &mut R, scale: f64) -> LayerWeights<Tensor<T>> {
        let out = self.out();
        let mut draw = |shape: &[usize], center: f64| {
            Tensor::from_fn(shape, |_| T::from_f64_lossy(center + rng.random_range(-scale..=scale)))
        };
        let w = draw(&[self.input, out], 0.0);
        let u = draw(&[self.units, out], 0.0);
        let v = self.top_down.map(|above| draw(&[above, out], 0.0));
        let b = draw(&[1, out], 0.0);
        let norms = self.layer_norm.then(|| {
            let mut sn = || StreamNorm {
                gain: draw(&[1, out], 1.0),
                bias: draw(&[1, out], 0.0),
            };
            LayerNorms {
                w: sn(),
                u: sn(),
                v: self.top_down.map(|_| sn()),
            }
        });
        LayerWeights { w, u, v, b, norms }
    }
}

/// Per-layer recurrent state ⟨h, c, z⟩ as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<T> {
    pub h: Tensor<T>,
    /// Absent for HMRNN layers.
    pub c: Option<Tensor<T>>,
    /// `[batch, 1]` in {0, 1}; absent for top layers and plain LSTMs.
    pub z: Option<Tensor<T>>,
}

impl<T: Real> LayerState<T> {
    pub fn zeros(batch: usize, units: usize, has_cell: bool, has_boundary: bool) -> Self {
        LayerState {
            h: Tensor::zeros(&[batch, units]),
            c: has_cell.then(|| Tensor::zeros(&[batch, units])),
            z: has_boundary.then(|| Tensor::zeros(&[batch, 1])),
        }
    }

    /// Records the state as constant leaves; gradients stop here.
    pub fn bind(&self, tape: &mut Tape<T>) -> StepVars {
        StepVars {
            h: tape.leaf(self.h.clone()),
            c: self.c.as_ref().map(|c| tape.leaf(c.clone())),
            z: self.z.as_ref().map(|z| tape.leaf(z.clone())),
        }
    }

    pub fn batch(&self) -> usize {
        self.h.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.h.all_finite() && self.c.as_ref().is_none_or(|c| c.all_finite())
    }
}

/// Which slot of the stack a layer occupies, with the inputs that slot
/// consumes.
#[derive(Clone, Copy, Debug)]
pub enum LayerInput<P> {
    /// Raw input `x_t` and the previous hidden state of the layer above.
    Bottom { x: P, h_above_prev: Option<P> },
    Middle {
        h_below: P,
        z_below: P,
        h_above_prev: Option<P>,
    },
    Top { h_below: P, z_below: P },
}

fn require_binary<T: Real>(op: &'static str, z: &Tensor<T>) -> Result<()> {
    if z.cols() != 1 {
        return Err(Error::invalid(op, format!("boundary must be [batch, 1], got {:?}", z.shape())));
    }
    if let Some(bad) = z.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::invalid(op, format!("boundary values must be 0 or 1, found {bad}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
