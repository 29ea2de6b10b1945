//! Per-row evaluation that selects FLUSH / COPY / UPDATE with explicit
//! branches, one batch row at a time. No tape, no masks.

use super::{require_binary, CellFlags, LayerInput, LayerState, LayerWeights, StreamNorm};
use crate::error::{Error, Result};
use crate::numerics::{hard_sigmoid_scalar, round_boundary, sigmoid_scalar, Real, Tensor};

fn row_times<T: Real>(row: &[T], m: &Tensor<T>) -> Vec<T> {
    let cols = m.cols();
    let mut out = vec![T::zero(); cols];
    for (k, &x) in row.iter().enumerate() {
        let mrow = m.row(k);
        for j in 0..cols {
            out[j] += x * mrow[j];
        }
    }
    out
}

fn normalize<T: Real>(v: Vec<T>, norm: Option<&StreamNorm<Tensor<T>>>, eps: T) -> Vec<T> {
    let Some(norm) = norm else { return v };
    let n = T::from_usize(v.len()).unwrap();
    let mean = v.iter().copied().sum::<T>() / n;
    let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let sd = (var + eps).sqrt();
    v.iter()
        .enumerate()
        .map(|(j, &x)| (x - mean) / sd * norm.gain.data()[j] + norm.bias.data()[j])
        .collect()
}

/// Sum of the selected streams plus bias for one row.
struct Pre<'a, T: Real> {
    w: &'a LayerWeights<Tensor<T>>,
    eps: T,
    acc: Vec<T>,
}

impl<'a, T: Real> Pre<'a, T> {
    fn new(w: &'a LayerWeights<Tensor<T>>, eps: T) -> Self {
        Pre {
            w,
            eps,
            acc: w.b.data().to_vec(),
        }
    }

    fn add(&mut self, input: &[T], matrix: &Tensor<T>, norm: Option<&StreamNorm<Tensor<T>>>) {
        let s = normalize(row_times(input, matrix), norm, self.eps);
        for (a, v) in self.acc.iter_mut().zip(s) {
            *a += v;
        }
    }

    fn bottom_up(mut self, input: &[T]) -> Self {
        let norm = self.w.norms.as_ref().map(|n| &n.w);
        self.add(input, &self.w.w, norm);
        self
    }

    fn recurrent(mut self, h: &[T]) -> Self {
        let norm = self.w.norms.as_ref().map(|n| &n.u);
        self.add(h, &self.w.u, norm);
        self
    }

    fn top_down(mut self, h_above: Option<&Tensor<T>>, r: usize) -> Result<Self> {
        if let Some(v) = &self.w.v {
            let h = h_above.ok_or_else(|| Error::invalid("branch", "missing state from the layer above"))?;
            let norm = self.w.norms.as_ref().and_then(|n| n.v.as_ref());
            self.add(h.row(r), v, norm);
        }
        Ok(self)
    }
}

fn sig<T: Real>(v: T) -> T {
    sigmoid_scalar(v)
}

fn check_state<T: Real>(op: &'static str, state: &LayerState<T>, units: usize) -> Result<()> {
    if state.h.cols() != units {
        return Err(Error::shape(op, state.h.shape(), &[state.h.rows(), units]));
    }
    Ok(())
}

fn check_input<T: Real>(op: &'static str, x: &Tensor<T>, w: &LayerWeights<Tensor<T>>, batch: usize) -> Result<()> {
    if x.cols() != w.w.rows() || x.rows() != batch {
        return Err(Error::shape(op, x.shape(), w.w.shape()));
    }
    Ok(())
}

/// LSTM cell update for one row given its pre-activations.
fn lstm_cell<T: Real>(pre: &[T], units: usize, c_prev: &[T], keep_prev: bool) -> Vec<T> {
    (0..units)
        .map(|j| {
            let cand = pre[2 * units + j].tanh() * sig(pre[j]);
            if keep_prev {
                c_prev[j] * sig(pre[units + j]) + cand
            } else {
                cand
            }
        })
        .collect()
}

fn lstm_hidden<T: Real>(pre: &[T], units: usize, c: &[T]) -> Vec<T> {
    (0..units).map(|j| sig(pre[3 * units + j]) * c[j].tanh()).collect()
}

fn boundary_bit<T: Real>(logit: T, flags: &CellFlags) -> T {
    round_boundary(hard_sigmoid_scalar(logit, T::from_f64_lossy(flags.slope_alpha)))
}

fn is_one<T: Real>(v: T) -> bool {
    v == T::one()
}

fn assemble<T: Real>(rows: Vec<Vec<T>>, units: usize) -> Tensor<T> {
    let n = rows.len();
    Tensor::new(vec![n, units], rows.concat()).expect("row widths")
}

pub fn lstm_step<T: Real>(
    x: &Tensor<T>,
    state: &LayerState<T>,
    w: &LayerWeights<Tensor<T>>,
    flags: &CellFlags,
) -> Result<LayerState<T>> {
    const OP: &str = "branch::lstm_step";
    let units = w.units();
    let batch = state.batch();
    check_state(OP, state, units)?;
    check_input(OP, x, w, batch)?;
    let c_prev = state.c.as_ref().ok_or_else(|| Error::invalid(OP, "missing cell"))?;
    let eps = T::from_f64_lossy(flags.ln_eps);
    let (mut hs, mut cs) = (Vec::new(), Vec::new());
    for r in 0..batch {
        let pre = Pre::new(w, eps).bottom_up(x.row(r)).recurrent(state.h.row(r)).acc;
        let c = lstm_cell(&pre, units, c_prev.row(r), true);
        hs.push(lstm_hidden(&pre, units, &c));
        cs.push(c);
    }
    Ok(LayerState {
        h: assemble(hs, units),
        c: Some(assemble(cs, units)),
        z: None,
    })
}

/// HMLSTM layer of the kind named by `input`, one row at a time.
pub fn hmlstm_step<T: Real>(
    input: LayerInput<&Tensor<T>>,
    state: &LayerState<T>,
    w: &LayerWeights<Tensor<T>>,
    flags: &CellFlags,
) -> Result<LayerState<T>> {
    const OP: &str = "branch::hmlstm_step";
    let units = w.units();
    let batch = state.batch();
    check_state(OP, state, units)?;
    let c_prev = state.c.as_ref().ok_or_else(|| Error::invalid(OP, "missing cell"))?;
    let eps = T::from_f64_lossy(flags.ln_eps);
    let (mut hs, mut cs, mut zs) = (Vec::new(), Vec::new(), Vec::new());
    for r in 0..batch {
        let h_prev = state.h.row(r);
        let c_prev = c_prev.row(r);
        match input {
            LayerInput::Bottom { x, h_above_prev } => {
                check_input(OP, x, w, batch)?;
                let z_prev = state.z.as_ref().ok_or_else(|| Error::invalid(OP, "missing boundary"))?.get(r, 0);
                let mut pre = Pre::new(w, eps).bottom_up(x.row(r)).recurrent(h_prev);
                if is_one(z_prev) {
                    pre = pre.top_down(h_above_prev, r)?;
                }
                let pre = pre.acc;
                // FLUSH when the layer closed a segment on the previous step
                let c = lstm_cell(&pre, units, c_prev, !is_one(z_prev));
                hs.push(lstm_hidden(&pre, units, &c));
                cs.push(c);
                zs.push(vec![boundary_bit(pre[4 * units], flags)]);
            }
            LayerInput::Middle { h_below, z_below, h_above_prev } => {
                require_binary(OP, z_below)?;
                check_input(OP, h_below, w, batch)?;
                let z_prev = state.z.as_ref().ok_or_else(|| Error::invalid(OP, "missing boundary"))?.get(r, 0);
                let z_in = z_below.get(r, 0);
                let mut pre = Pre::new(w, eps);
                if is_one(z_in) {
                    pre = pre.bottom_up(h_below.row(r));
                }
                pre = pre.recurrent(h_prev);
                if is_one(z_prev) {
                    pre = pre.top_down(h_above_prev, r)?;
                }
                let pre = pre.acc;
                let (h, c) = if is_one(z_prev) {
                    // FLUSH
                    let c = lstm_cell(&pre, units, c_prev, false);
                    (lstm_hidden(&pre, units, &c), c)
                } else if !is_one(z_in) {
                    // COPY
                    (h_prev.to_vec(), c_prev.to_vec())
                } else {
                    // UPDATE
                    let c = lstm_cell(&pre, units, c_prev, true);
                    (lstm_hidden(&pre, units, &c), c)
                };
                hs.push(h);
                cs.push(c);
                zs.push(vec![boundary_bit(pre[4 * units], flags)]);
            }
            LayerInput::Top { h_below, z_below } => {
                require_binary(OP, z_below)?;
                check_input(OP, h_below, w, batch)?;
                let z_in = z_below.get(r, 0);
                let mut pre = Pre::new(w, eps);
                if is_one(z_in) {
                    pre = pre.bottom_up(h_below.row(r));
                }
                let pre = pre.recurrent(h_prev).acc;
                let (h, c) = if is_one(z_in) {
                    let c = lstm_cell(&pre, units, c_prev, true);
                    (lstm_hidden(&pre, units, &c), c)
                } else if flags.copy_last {
                    (h_prev.to_vec(), c_prev.to_vec())
                } else {
                    (lstm_hidden(&pre, units, c_prev), c_prev.to_vec())
                };
                hs.push(h);
                cs.push(c);
            }
        }
    }
    Ok(LayerState {
        h: assemble(hs, units),
        c: Some(assemble(cs, units)),
        z: (!zs.is_empty()).then(|| assemble(zs, 1)),
    })
}

/// HMRNN layer of the kind named by `input`, one row at a time.
pub fn hmrnn_step<T: Real>(
    input: LayerInput<&Tensor<T>>,
    state: &LayerState<T>,
    w: &LayerWeights<Tensor<T>>,
    flags: &CellFlags,
) -> Result<LayerState<T>> {
    const OP: &str = "branch::hmrnn_step";
    let units = w.units();
    let batch = state.batch();
    check_state(OP, state, units)?;
    let eps = T::from_f64_lossy(flags.ln_eps);
    let tanh_units = |pre: &[T]| pre[..units].iter().map(|v| v.tanh()).collect::<Vec<T>>();
    let (mut hs, mut zs) = (Vec::new(), Vec::new());
    for r in 0..batch {
        let h_prev = state.h.row(r);
        match input {
            LayerInput::Bottom { x, h_above_prev } => {
                check_input(OP, x, w, batch)?;
                let z_prev = state.z.as_ref().ok_or_else(|| Error::invalid(OP, "missing boundary"))?.get(r, 0);
                let pre = Pre::new(w, eps).bottom_up(x.row(r));
                let pre = if is_one(z_prev) {
                    pre.top_down(h_above_prev, r)?
                } else {
                    pre.recurrent(h_prev)
                }
                .acc;
                hs.push(tanh_units(&pre));
                zs.push(vec![boundary_bit(pre[units], flags)]);
            }
            LayerInput::Middle { h_below, z_below, h_above_prev } => {
                require_binary(OP, z_below)?;
                check_input(OP, h_below, w, batch)?;
                let z_prev = state.z.as_ref().ok_or_else(|| Error::invalid(OP, "missing boundary"))?.get(r, 0);
                let z_in = z_below.get(r, 0);
                let pre = Pre::new(w, eps).bottom_up(h_below.row(r));
                let update = !is_one(z_prev) && is_one(z_in);
                let pre = if update {
                    pre.recurrent(h_prev)
                } else {
                    pre.top_down(h_above_prev, r)?
                }
                .acc;
                let copy = !is_one(z_prev) && !is_one(z_in);
                hs.push(if copy { h_prev.to_vec() } else { tanh_units(&pre) });
                zs.push(vec![boundary_bit(pre[units], flags)]);
            }
            LayerInput::Top { h_below, z_below } => {
                require_binary(OP, z_below)?;
                check_input(OP, h_below, w, batch)?;
                if is_one(z_below.get(r, 0)) {
                    let pre = Pre::new(w, eps).bottom_up(h_below.row(r)).recurrent(h_prev).acc;
                    hs.push(tanh_units(&pre));
                } else {
                    hs.push(h_prev.to_vec());
                }
            }
        }
    }
    Ok(LayerState {
        h: assemble(hs, units),
        c: None,
        z: (!zs.is_empty()).then(|| assemble(zs, 1)),
    })
}
