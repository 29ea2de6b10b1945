//! Batch-masked recurrences recorded on a tape. Boundary bits enter as
//! `[batch, 1]` masks so every row of a batch can take a different branch.

use super::{require_binary, CellFlags, LayerInput, LayerWeights, StreamNorm};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Var};

/// ⟨h, c, z⟩ recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub h: Var,
    pub c: Option<Var>,
    pub z: Option<Var>,
}

impl StepVars {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> super::LayerState<T> {
        super::LayerState {
            h: tape.value(self.h).clone(),
            c: self.c.map(|c| tape.value(c).clone()),
            z: self.z.map(|z| tape.value(z).clone()),
        }
    }
}

struct Gates {
    i: Var,
    f: Var,
    u: Var,
    o: Var,
}

fn dims<T: Real>(tape: &Tape<T>, v: Var) -> (usize, usize) {
    let t = tape.value(v);
    (t.rows(), t.cols())
}

/// Checks `input·M` and `M`'s output width; returns the layer's units.
fn check_layer<T: Real>(
    tape: &Tape<T>,
    op: &'static str,
    w: &LayerWeights<Var>,
    input: Var,
    prev_h: Var,
    per_unit: usize,
    boundary: bool,
) -> Result<usize> {
    let (units, out) = dims(tape, w.u);
    let expected = per_unit * units + usize::from(boundary);
    if out != expected {
        return Err(Error::invalid(
            op,
            format!("recurrent matrix has {out} columns, expected {expected} for {units} units"),
        ));
    }
    let (_, in_cols) = dims(tape, input);
    let (w_rows, w_cols) = dims(tape, w.w);
    if w_rows != in_cols || w_cols != out {
        return Err(Error::shape(op, tape.value(input).shape(), tape.value(w.w).shape()));
    }
    if dims(tape, prev_h).1 != units {
        return Err(Error::shape(op, tape.value(prev_h).shape(), tape.value(w.u).shape()));
    }
    if dims(tape, w.b) != (1, out) {
        return Err(Error::shape(op, tape.value(w.b).shape(), &[1, out]));
    }
    Ok(units)
}

fn stream<T: Real>(
    tape: &mut Tape<T>,
    input: Var,
    matrix: Var,
    norm: Option<&StreamNorm<Var>>,
    eps: T,
) -> Result<Var> {
    let s = tape.matmul(input, matrix)?;
    match norm {
        Some(n) => tape.layer_norm(s, n.gain, n.bias, eps),
        None => Ok(s),
    }
}

/// One pre-activation term: `mask ⊙ LN(input·matrix)`.
struct Term<'a> {
    input: Var,
    matrix: Var,
    norm: Option<&'a StreamNorm<Var>>,
    mask: Option<Var>,
}

fn preactivation<T: Real>(tape: &mut Tape<T>, terms: &[Term<'_>], bias: Var, eps: T) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for term in terms {
        let mut s = stream(tape, term.input, term.matrix, term.norm, eps)?;
        if let Some(m) = term.mask {
            s = tape.mul(s, m)?;
        }
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    let acc = acc.expect("at least one pre-activation term");
    tape.add(acc, bias)
}

fn split_gates<T: Real>(tape: &mut Tape<T>, pre: Var, units: usize) -> Result<Gates> {
    let i = tape.slice_cols(pre, 0, units)?;
    let f = tape.slice_cols(pre, units, 2 * units)?;
    let u = tape.slice_cols(pre, 2 * units, 3 * units)?;
    let o = tape.slice_cols(pre, 3 * units, 4 * units)?;
    Ok(Gates { i, f, u, o })
}

/// `round(hard_sigmoid(logit, α))` with straight-through gradients.
fn boundary<T: Real>(tape: &mut Tape<T>, pre: Var, col: usize, flags: &CellFlags) -> Result<Var> {
    let logit = tape.slice_cols(pre, col, col + 1)?;
    let soft = tape.hard_sigmoid(logit, T::from_f64_lossy(flags.slope_alpha))?;
    Ok(tape.straight_through_round(soft))
}

/// `σ(i) ⊙ tanh(u)`.
fn gated_candidate<T: Real>(tape: &mut Tape<T>, g: &Gates) -> Result<Var> {
    let si = tape.sigmoid(g.i);
    let tu = tape.tanh(g.u);
    tape.mul(tu, si)
}

fn output<T: Real>(tape: &mut Tape<T>, o: Var, c: Var) -> Result<Var> {
    let so = tape.sigmoid(o);
    let tc = tape.tanh(c);
    tape.mul(so, tc)
}

/// `mask ⊙ a + (1 − mask) ⊙ b`; exact `b` wherever the mask is 0.
fn blend<T: Real>(tape: &mut Tape<T>, mask: Var, a: Var, b: Var) -> Result<Var> {
    let keep = tape.one_minus(mask);
    let ma = tape.mul(a, mask)?;
    let mb = tape.mul(b, keep)?;
    tape.add(ma, mb)
}

fn require_cell(op: &'static str, prev: &StepVars) -> Result<Var> {
    prev.c.ok_or_else(|| Error::invalid(op, "previous state has no cell"))
}

fn require_z(op: &'static str, prev: &StepVars) -> Result<Var> {
    prev.z.ok_or_else(|| Error::invalid(op, "previous state has no boundary"))
}

fn eps<T: Real>(flags: &CellFlags) -> T {
    T::from_f64_lossy(flags.ln_eps)
}

fn norm_w(w: &LayerWeights<Var>) -> Option<&StreamNorm<Var>> {
    w.norms.as_ref().map(|n| &n.w)
}

fn norm_u(w: &LayerWeights<Var>) -> Option<&StreamNorm<Var>> {
    w.norms.as_ref().map(|n| &n.u)
}

fn norm_v(w: &LayerWeights<Var>) -> Option<&StreamNorm<Var>> {
    w.norms.as_ref().and_then(|n| n.v.as_ref())
}

/// Top-down term `mask ⊙ LN(h_above·V)`, dropped when the layer has no V.
fn top_down<'a>(
    op: &'static str,
    w: &'a LayerWeights<Var>,
    h_above_prev: Option<Var>,
    mask: Var,
) -> Result<Option<Term<'a>>> {
    match (w.v, h_above_prev) {
        (Some(v), Some(h)) => Ok(Some(Term {
            input: h,
            matrix: v,
            norm: norm_v(w),
            mask: Some(mask),
        })),
        (Some(_), None) => Err(Error::invalid(op, "top-down weights present but no state from the layer above")),
        (None, _) => Ok(None),
    }
}

/// Standard LSTM: `[i f u o] = Wx + Uh + b`,
/// `c = c⊙σ(f) + tanh(u)⊙σ(i)`, `h = σ(o)⊙tanh(c)`.
pub fn lstm_step<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    prev: &StepVars,
    w: &LayerWeights<Var>,
    flags: &CellFlags,
) -> Result<StepVars> {
    const OP: &str = "lstm_step";
    let units = check_layer(tape, OP, w, x, prev.h, 4, false)?;
    let c_prev = require_cell(OP, prev)?;
    let terms = [
        Term { input: x, matrix: w.w, norm: norm_w(w), mask: None },
        Term { input: prev.h, matrix: w.u, norm: norm_u(w), mask: None },
    ];
    let pre = preactivation(tape, &terms, w.b, eps(flags))?;
    let g = split_gates(tape, pre, units)?;
    let sf = tape.sigmoid(g.f);
    let kept = tape.mul(c_prev, sf)?;
    let cand = gated_candidate(tape, &g)?;
    let c = tape.add(kept, cand)?;
    let h = output(tape, g.o, c)?;
    Ok(StepVars { h, c: Some(c), z: None })
}

/// HMLSTM bottom layer. The top-down input is gated by `z_{t−1}`, which
/// also selects FLUSH (`c_{t−1}` dropped) over UPDATE:
/// `c = (1 − z_{t−1})⊙c_{t−1}⊙σ(f) + tanh(u)⊙σ(i)`.
pub fn hmlstm_bottom_step<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    prev: &StepVars,
    h_above_prev: Option<Var>,
    w: &LayerWeights<Var>,
    flags: &CellFlags,
) -> Result<StepVars> {
    const OP: &str = "hmlstm_bottom_step";
    let units = check_layer(tape, OP, w, x, prev.h, 4, true)?;
    let c_prev = require_cell(OP, prev)?;
    let z_prev = require_z(OP, prev)?;
    let mut terms = vec![
        Term { input: x, matrix: w.w, norm: norm_w(w), mask: None },
        Term { input: prev.h, matrix: w.u, norm: norm_u(w), mask: None },
    ];
    terms.extend(top_down(OP, w, h_above_prev, z_prev)?);
    let pre = preactivation(tape, &terms, w.b, eps(flags))?;
    let g = split_gates(tape, pre, units)?;
    let z = boundary(tape, pre, 4 * units, flags)?;

    let not_flush = tape.one_minus(z_prev);
    let sf = tape.sigmoid(g.f);
    let kept = tape.mul(c_prev, sf)?;
    let kept = tape.mul(kept, not_flush)?;
    let cand = gated_candidate(tape, &g)?;
    let c = tape.add(kept, cand)?;
    let h = output(tape, g.o, c)?;
    Ok(StepVars { h, c: Some(c), z: Some(z) })
}

/// HMLSTM middle layer with FLUSH / COPY / UPDATE selected by
/// `z^ℓ_{t−1}` and `z^{ℓ−1}_t` through the copy mask
/// `c_m = (1−z^ℓ_{t−1})(1−z^{ℓ−1}_t)` and update mask
/// `u_m = (1−z^ℓ_{t−1})z^{ℓ−1}_t`.
///
/// The cell is assembled as `c_m⊙c_{t−1} + (1−c_m)⊙(u_g + u_m⊙σ(f)⊙c_{t−1})`
/// so that COPY reproduces `c_{t−1}` and `h_{t−1}` bit for bit.
pub fn hmlstm_middle_step<T: Real>(
    tape: &mut Tape<T>,
    h_below: Var,
    z_below: Var,
    prev: &StepVars,
    h_above_prev: Option<Var>,
    w: &LayerWeights<Var>,
    flags: &CellFlags,
) -> Result<StepVars> {
    const OP: &str = "hmlstm_middle_step";
    require_binary(OP, tape.value(z_below))?;
    let units = check_layer(tape, OP, w, h_below, prev.h, 4, true)?;
    let c_prev = require_cell(OP, prev)?;
    let z_prev = require_z(OP, prev)?;
    let mut terms = vec![
        Term { input: h_below, matrix: w.w, norm: norm_w(w), mask: Some(z_below) },
        Term { input: prev.h, matrix: w.u, norm: norm_u(w), mask: None },
    ];
    terms.extend(top_down(OP, w, h_above_prev, z_prev)?);
    let pre = preactivation(tape, &terms, w.b, eps(flags))?;
    let g = split_gates(tape, pre, units)?;
    let z = boundary(tape, pre, 4 * units, flags)?;

    let not_flush = tape.one_minus(z_prev);
    let no_input = tape.one_minus(z_below);
    let copy_mask = tape.mul(not_flush, no_input)?;
    let update_mask = tape.mul(not_flush, z_below)?;

    let ug = gated_candidate(tape, &g)?;
    let sf = tape.sigmoid(g.f);
    let kept = tape.mul(c_prev, sf)?;
    let kept = tape.mul(kept, update_mask)?;
    let fresh = tape.add(ug, kept)?;
    let c = blend(tape, copy_mask, c_prev, fresh)?;
    let h_new = output(tape, g.o, c)?;
    let h = blend(tape, copy_mask, prev.h, h_new)?;
    Ok(StepVars { h, c: Some(c), z: Some(z) })
}

/// HMLSTM top layer: UPDATE when `z^{ℓ−1}_t = 1`, otherwise COPY of the
/// cell. Under `copy_last` the hidden state is copied too; otherwise it is
/// recomputed as `σ(o_t)⊙tanh(c_{t−1})`.
pub fn hmlstm_top_step<T: Real>(
    tape: &mut Tape<T>,
    h_below: Var,
    z_below: Var,
    prev: &StepVars,
    w: &LayerWeights<Var>,
    flags: &CellFlags,
) -> Result<StepVars> {
    const OP: &str = "hmlstm_top_step";
    require_binary(OP, tape.value(z_below))?;
    let units = check_layer(tape, OP, w, h_below, prev.h, 4, false)?;
    let c_prev = require_cell(OP, prev)?;
    let terms = [
        Term { input: h_below, matrix: w.w, norm: norm_w(w), mask: Some(z_below) },
        Term { input: prev.h, matrix: w.u, norm: norm_u(w), mask: None },
    ];
    let pre = preactivation(tape, &terms, w.b, eps(flags))?;
    let g = split_gates(tape, pre, units)?;

    let sf = tape.sigmoid(g.f);
    let kept = tape.mul(c_prev, sf)?;
    let cand = gated_candidate(tape, &g)?;
    let c_hat = tape.add(kept, cand)?;
    let c = blend(tape, z_below, c_hat, c_prev)?;
    let h = if flags.copy_last {
        let h_hat = output(tape, g.o, c_hat)?;
        blend(tape, z_below, h_hat, prev.h)?
    } else {
        output(tape, g.o, c)?
    };
    Ok(StepVars { h, c: Some(c), z: None })
}

/// Dispatches to the HMLSTM layer kind named by `input`.
pub fn hmlstm_step<T: Real>(
    tape: &mut Tape<T>,
    input: LayerInput<Var>,
    prev: &StepVars,
    w: &LayerWeights<Var>,
    flags: &CellFlags,
) -> Result<StepVars> {
    match input {
        LayerInput::Bottom { x, h_above_prev } => hmlstm_bottom_step(tape, x, prev, h_above_prev, w, flags),
        LayerInput::Middle { h_below, z_below, h_above_prev } => {
            hmlstm_middle_step(tape, h_below, z_below, prev, h_above_prev, w, flags)
        }
        LayerInput::Top { h_below, z_below } => hmlstm_top_step(tape, h_below, z_below, prev, w, flags),
    }
}

/// HMRNN bottom layer:
/// `h = tanh(Wx + (1−z_{t−1})⊙Uh_{t−1} + z_{t−1}⊙Vh^{ℓ+1}_{t−1} + b)`.
pub fn hmrnn_bottom_step<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    prev: &StepVars,
    h_above_prev: Option<Var>,
    w: &LayerWeights<Var>,
    flags: &CellFlags,
) -> Result<StepVars> {
    const OP: &str = "hmrnn_bottom_step";
    let units = check_layer(tape, OP, w, x, prev.h, 1, true)?;
    let z_prev = require_z(OP, prev)?;
    let not_flush = tape.one_minus(z_prev);
    let mut terms = vec![
        Term { input: x, matrix: w.w, norm: norm_w(w), mask: None },
        Term { input: prev.h, matrix: w.u, norm: norm_u(w), mask: Some(not_flush) },
    ];
    terms.extend(top_down(OP, w, h_above_prev, z_prev)?);
    let pre = preactivation(tape, &terms, w.b, eps(flags))?;
    let z = boundary(tape, pre, units, flags)?;
    let cand = tape.slice_cols(pre, 0, units)?;
    let h = tape.tanh(cand);
    Ok(StepVars { h, c: None, z: Some(z) })
}

/// HMRNN middle layer. FLUSH: `tanh(Wh^{ℓ−1} + Vh^{ℓ+1}_{t−1})`;
/// COPY: `h_{t−1}`; UPDATE: `tanh(Wh^{ℓ−1} + Uh_{t−1})`. The boundary
/// logit comes from the same blended pre-activation.
pub fn hmrnn_middle_step<T: Real>(
    tape: &mut Tape<T>,
    h_below: Var,
    z_below: Var,
    prev: &StepVars,
    h_above_prev: Option<Var>,
    w: &LayerWeights<Var>,
    flags: &CellFlags,
) -> Result<StepVars> {
    const OP: &str = "hmrnn_middle_step";
    require_binary(OP, tape.value(z_below))?;
    let units = check_layer(tape, OP, w, h_below, prev.h, 1, true)?;
    let z_prev = require_z(OP, prev)?;
    let not_flush = tape.one_minus(z_prev);
    let no_input = tape.one_minus(z_below);
    let copy_mask = tape.mul(not_flush, no_input)?;
    let update_mask = tape.mul(not_flush, z_below)?;
    let not_update = tape.one_minus(update_mask);

    let mut terms = vec![
        Term { input: h_below, matrix: w.w, norm: norm_w(w), mask: None },
        Term { input: prev.h, matrix: w.u, norm: norm_u(w), mask: Some(update_mask) },
    ];
    terms.extend(top_down(OP, w, h_above_prev, not_update)?);
    let pre = preactivation(tape, &terms, w.b, eps(flags))?;
    let z = boundary(tape, pre, units, flags)?;
    let cand = tape.slice_cols(pre, 0, units)?;
    let fresh = tape.tanh(cand);
    let h = blend(tape, copy_mask, prev.h, fresh)?;
    Ok(StepVars { h, c: None, z: Some(z) })
}

/// HMRNN top layer:
/// `h = (1−z^{ℓ−1}_t)⊙h_{t−1} + z^{ℓ−1}_t⊙tanh(Wh^{ℓ−1} + Uh_{t−1} + b)`.
pub fn hmrnn_top_step<T: Real>(
    tape: &mut Tape<T>,
    h_below: Var,
    z_below: Var,
    prev: &StepVars,
    w: &LayerWeights<Var>,
    flags: &CellFlags,
) -> Result<StepVars> {
    const OP: &str = "hmrnn_top_step";
    require_binary(OP, tape.value(z_below))?;
    check_layer(tape, OP, w, h_below, prev.h, 1, false)?;
    let terms = [
        Term { input: h_below, matrix: w.w, norm: norm_w(w), mask: None },
        Term { input: prev.h, matrix: w.u, norm: norm_u(w), mask: None },
    ];
    let pre = preactivation(tape, &terms, w.b, eps(flags))?;
    let fresh = tape.tanh(pre);
    let h = blend(tape, z_below, fresh, prev.h)?;
    Ok(StepVars { h, c: None, z: None })
}

/// Dispatches to the HMRNN layer kind named by `input`.
pub fn hmrnn_step<T: Real>(
    tape: &mut Tape<T>,
    input: LayerInput<Var>,
    prev: &StepVars,
    w: &LayerWeights<Var>,
    flags: &CellFlags,
) -> Result<StepVars> {
    match input {
        LayerInput::Bottom { x, h_above_prev } => hmrnn_bottom_step(tape, x, prev, h_above_prev, w, flags),
        LayerInput::Middle { h_below, z_below, h_above_prev } => {
            hmrnn_middle_step(tape, h_below, z_below, prev, h_above_prev, w, flags)
        }
        LayerInput::Top { h_below, z_below } => hmrnn_top_step(tape, h_below, z_below, prev, w, flags),
    }
}
