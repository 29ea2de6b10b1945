//! Randomized cases comparing the tape-recorded cells against the per-row
//! branch forms, plus the COPY / FLUSH checks built on them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

pub const UNITS: usize = 8;
pub const INPUT: usize = 5;
pub const ABOVE: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Family {
    Hmlstm,
    Hmrnn,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Slot {
    Bottom,
    Middle,
    Top,
}

pub fn shape(family: Family, slot: Slot, flags: &CellFlags) -> LayerShape {
    LayerShape {
        input: if slot == Slot::Bottom { INPUT } else { 7 },
        units: UNITS,
        per_unit: if family == Family::Hmlstm { 4 } else { 1 },
        boundary: slot != Slot::Top,
        top_down: (slot != Slot::Top && !flags.no_top_down).then_some(ABOVE),
        layer_norm: flags.use_layer_norm,
    }
}

pub fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn bits(values: &[f64]) -> Tensor<f64> {
    Tensor::from_fn(&[values.len(), 1], |i| values[i])
}

pub struct Case {
    pub family: Family,
    pub slot: Slot,
    pub flags: CellFlags,
    pub w: LayerWeights<Tensor<f64>>,
    pub input: Tensor<f64>,
    pub z_below: Tensor<f64>,
    pub above: Tensor<f64>,
    pub state: LayerState<f64>,
}

impl Case {
    pub fn random(rng: &mut ChaCha8Rng, family: Family, slot: Slot, flags: CellFlags, z_prev: &[f64], z_below: &[f64]) -> Case {
        let sh = shape(family, slot, &flags);
        let batch = z_prev.len();
        let w = sh.uniform(rng, 0.6);
        let state = LayerState {
            h: rand_t(rng, &[batch, UNITS]),
            c: (family == Family::Hmlstm).then(|| rand_t(rng, &[batch, UNITS])),
            z: (slot != Slot::Top).then(|| bits(z_prev)),
        };
        Case {
            family,
            slot,
            flags,
            w,
            input: rand_t(rng, &[batch, sh.input]),
            z_below: bits(z_below),
            above: rand_t(rng, &[batch, ABOVE]),
            state,
        }
    }

    pub fn vectorized(&self) -> Result<LayerState<f64>> {
        let mut tape = Tape::new();
        let w = self.w.bind(&mut tape);
        let prev = self.state.bind(&mut tape);
        let x = tape.leaf(self.input.clone());
        let zb = tape.leaf(self.z_below.clone());
        let above = (!self.flags.no_top_down).then(|| tape.leaf(self.above.clone()));
        let input = match self.slot {
            Slot::Bottom => LayerInput::Bottom { x, h_above_prev: above },
            Slot::Middle => LayerInput::Middle { h_below: x, z_below: zb, h_above_prev: above },
            Slot::Top => LayerInput::Top { h_below: x, z_below: zb },
        };
        let out = match self.family {
            Family::Hmlstm => hmlstm_step(&mut tape, input, &prev, &w, &self.flags),
            Family::Hmrnn => hmrnn_step(&mut tape, input, &prev, &w, &self.flags),
        }?;
        Ok(out.values(&tape))
    }

    pub fn branched(&self) -> Result<LayerState<f64>> {
        let above = (!self.flags.no_top_down).then_some(&self.above);
        let input = match self.slot {
            Slot::Bottom => LayerInput::Bottom { x: &self.input, h_above_prev: above },
            Slot::Middle => LayerInput::Middle { h_below: &self.input, z_below: &self.z_below, h_above_prev: above },
            Slot::Top => LayerInput::Top { h_below: &self.input, z_below: &self.z_below },
        };
        match self.family {
            Family::Hmlstm => branch::hmlstm_step(input, &self.state, &self.w, &self.flags),
            Family::Hmrnn => branch::hmrnn_step(input, &self.state, &self.w, &self.flags),
        }
    }
}

pub fn max_diff(a: &LayerState<f64>, b: &LayerState<f64>) -> f64 {
    let mut d = a.h.max_abs_diff(&b.h);
    if let (Some(x), Some(y)) = (&a.c, &b.c) {
        d = d.max(x.max_abs_diff(y));
    }
    assert_eq!(a.c.is_some(), b.c.is_some());
    assert_eq!(a.z.is_some(), b.z.is_some());
    if let (Some(x), Some(y)) = (&a.z, &b.z) {
        d = d.max(x.max_abs_diff(y));
    }
    d
}

pub fn same_bits(a: &Tensor<f64>, b: &Tensor<f64>) -> bool {
    a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Every (z^ℓ_{t−1}, z^{ℓ−1}_t) pair once per batch of four, shuffled.
pub fn mixed_pairs(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let mut pairs = vec![(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)];
    for i in (1..pairs.len()).rev() {
        pairs.swap(i, rng.random_range(0..=i));
    }
    pairs.into_iter().unzip()
}


/// Worst-case results of [`run_semantics_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticsReport {
    /// Cases compared between the vectorized and branch forms.
    pub trials: usize,
    pub max_vectorized_diff: f64,
    /// Every COPY row reproduced its previous state bit for bit.
    pub copy_exact: bool,
    /// Every FLUSH row was unaffected by replacing the previous cell
    /// (HMLSTM) or hidden state (HMRNN).
    pub flush_independent: bool,
}

/// `trials` random cases per (family, layer kind, flag combination), each a
/// batch of four rows covering all four `(z_prev, z_below)` pairs.
pub fn run_semantics_suite(seed: u64, trials: usize) -> Result<SemanticsReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SemanticsReport {
        trials: 0,
        max_vectorized_diff: 0.0,
        copy_exact: true,
        flush_independent: true,
    };
    for family in [Family::Hmlstm, Family::Hmrnn] {
        for slot in [Slot::Bottom, Slot::Middle, Slot::Top] {
            for flags in CellFlags::grid() {
                for _ in 0..trials {
                    let (z_prev, z_below) = mixed_pairs(&mut rng);
                    let case = Case::random(&mut rng, family, slot, flags, &z_prev, &z_below);
                    let d = max_diff(&case.vectorized()?, &case.branched()?);
                    report.max_vectorized_diff = report.max_vectorized_diff.max(d);
                    report.trials += 1;
                }
                report.copy_exact &= copy_is_exact(&mut rng, family, slot, flags)?;
                report.flush_independent &= flush_is_independent(&mut rng, family, slot, flags)?;
            }
        }
    }
    Ok(report)
}

fn rows_equal(a: &Tensor<f64>, b: &Tensor<f64>, row: usize) -> bool {
    (0..a.cols()).all(|j| a.get(row, j).to_bits() == b.get(row, j).to_bits())
}

/// COPY rows (`z_prev = 0`, `z_below = 0`) keep `c` and, except for the top
/// layer without copy-last, `h` exactly.
fn copy_is_exact(rng: &mut ChaCha8Rng, family: Family, slot: Slot, flags: CellFlags) -> Result<bool> {
    if slot == Slot::Bottom {
        // the bottom layer has no COPY
        return Ok(true);
    }
    let (z_prev, z_below) = mixed_pairs(rng);
    let case = Case::random(rng, family, slot, flags, &z_prev, &z_below);
    let copy_row = (0..4).find(|&r| z_prev[r] == 0.0 && z_below[r] == 0.0).expect("all pairs present");
    let out = case.vectorized()?;
    let mut ok = true;
    if let (Some(c), Some(prev)) = (&out.c, &case.state.c) {
        ok &= rows_equal(c, prev, copy_row);
    }
    let h_copied = !(slot == Slot::Top && family == Family::Hmlstm && !flags.copy_last);
    if h_copied {
        ok &= rows_equal(&out.h, &case.state.h, copy_row);
    }
    Ok(ok)
}

/// FLUSH rows (`z_prev = 1`) do not depend on the previous cell (HMLSTM)
/// or the previous hidden state (HMRNN).
fn flush_is_independent(rng: &mut ChaCha8Rng, family: Family, slot: Slot, flags: CellFlags) -> Result<bool> {
    if slot == Slot::Top {
        // the top layer has no FLUSH
        return Ok(true);
    }
    let (z_prev, z_below) = mixed_pairs(rng);
    let mut case = Case::random(rng, family, slot, flags, &z_prev, &z_below);
    let flush_rows: Vec<usize> = (0..4).filter(|&r| z_prev[r] == 1.0).collect();
    let a = case.vectorized()?;
    match family {
        Family::Hmlstm => case.state.c = case.state.c.as_ref().map(|c| c.map(|v| v * -40.0 + 3.0)),
        Family::Hmrnn => case.state.h = case.state.h.map(|v| v * -40.0 + 3.0),
    }
    let b = case.vectorized()?;
    let mut ok = true;
    for &r in &flush_rows {
        ok &= rows_equal(&a.h, &b.h, r);
        if let (Some(x), Some(y)) = (&a.c, &b.c) {
            ok &= rows_equal(x, y, r);
        }
    }
    Ok(ok)
}
