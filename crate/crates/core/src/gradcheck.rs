//! Finite-difference gradient suite over the tape primitives, every cell
//! kind under every flag combination, and both output heads.
//!
//! Boundary masks enter the cell checks as constants: a perturbation can
//! never flip a rounded bit, so every checked function is smooth at the
//! evaluation point. The straight-through rule is checked separately for
//! exact identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cells::{self, CellFlags, LayerShape, LayerWeights, StepVars, StreamNorm};
use crate::error::Result;
use crate::model::{gated_output, simple_output};
use crate::numerics::{check_gradients, GradCheck, Tape, Tensor, Var};

/// Largest acceptable relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-6;

const UNITS: usize = 3;
const INPUT: usize = 4;
const BATCH: usize = 4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Weighted sum with fixed random weights so no output entry cancels.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(out).shape().to_vec();
    let w = tape.leaf(random(&mut rng, &shape));
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn primitives(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 5]);
    let row = random(&mut rng, &[1, 4]);
    let col = random(&mut rng, &[3, 1]);
    let wide = random(&mut rng, &[3, 5]);
    let alpha = 0.5;
    // keep hard-sigmoid inputs off the kinks at ±1/(2α)
    let hs = Tensor::from_fn(&[3, 4], |i| {
        let v = -1.6 + 0.27 * i as f64;
        if (v.abs() - 1.0).abs() < 0.05 { v + 0.1 } else { v }
    });
    let targets = [1usize, 4, 0];

    let mut out = Vec::new();
    out.push(check_gradients("matmul", &[a.clone(), b.clone()], STEP, |t, v| {
        let m = t.matmul(v[0], v[1])?;
        project(t, m, 1)
    })?);
    out.push(check_gradients("add/sub/mul broadcast", &[a.clone(), row.clone(), col.clone()], STEP, |t, v| {
        let x = t.add(v[0], v[1])?;
        let y = t.sub(x, v[2])?;
        let z = t.mul(y, v[2])?;
        let w = t.mul(z, v[1])?;
        project(t, w, 2)
    })?);
    out.push(check_gradients("sigmoid/tanh/relu/affine", std::slice::from_ref(&a), STEP, |t, v| {
        let s = t.sigmoid(v[0]);
        let h = t.tanh(v[0]);
        let r = t.relu(v[0]);
        let f = t.affine(h, 0.7, -0.2);
        let x = t.add(s, f)?;
        let y = t.mul(x, r)?;
        project(t, y, 3)
    })?);
    out.push(check_gradients("hard_sigmoid", &[hs], STEP, |t, v| {
        let y = t.hard_sigmoid(v[0], alpha)?;
        project(t, y, 4)
    })?);
    out.push(check_gradients("concat/slice", &[a.clone(), wide], STEP, |t, v| {
        let c = t.concat_cols(&[v[0], v[1]])?;
        let s = t.slice_cols(c, 2, 7)?;
        let r = t.concat_rows(&[s, s])?;
        project(t, r, 5)
    })?);
    out.push(check_gradients("embedding", std::slice::from_ref(&b), STEP, |t, v| {
        let e = t.embedding(v[0], &[3, 0, 3, 2])?;
        project(t, e, 6)
    })?);
    out.push(check_gradients("layer_norm", &[a.clone(), row.clone(), row.clone()], STEP, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        project(t, y, 7)
    })?);
    out.push(check_gradients("softmax_cross_entropy", &[a.matmul(&b)?], STEP, |t, v| {
        t.softmax_cross_entropy(v[0], &targets)
    })?);
    out.push(check_gradients("sum_squares", &[a], STEP, |t, v| Ok(t.sum_squares(v[0])))?);
    Ok(out)
}

/// Backward of straight-through rounding passes upstream gradients through
/// bit for bit; reported as relative error 0 or infinity.
pub fn straight_through_identity(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_fn(&[5, 3], |_| rng.random_range(-0.5..1.5)));
    let r = tape.straight_through_round(x);
    let upstream = random(&mut rng, &[5, 3]);
    let w = tape.leaf(upstream.clone());
    let p = tape.mul(r, w).expect("same shape");
    let loss = tape.sum(p);
    let ok = tape
        .gradients(loss)
        .ok()
        .and_then(|g| g.get(x).cloned())
        .is_some_and(|g| g.data().iter().zip(upstream.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    GradCheck {
        name: "straight_through identity".into(),
        max_rel_error: if ok { 0.0 } else { f64::INFINITY },
        max_abs_error: if ok { 0.0 } else { f64::INFINITY },
        checked: 15,
    }
}

#[derive(Clone, Copy, Debug)]
enum Family {
    Lstm,
    HmlstmBottom,
    HmlstmMiddle,
    HmlstmTop,
    HmrnnBottom,
    HmrnnMiddle,
    HmrnnTop,
}

impl Family {
    const ALL: [Family; 7] = [
        Family::Lstm,
        Family::HmlstmBottom,
        Family::HmlstmMiddle,
        Family::HmlstmTop,
        Family::HmrnnBottom,
        Family::HmrnnMiddle,
        Family::HmrnnTop,
    ];

    fn has_cell(self) -> bool {
        !matches!(self, Family::HmrnnBottom | Family::HmrnnMiddle | Family::HmrnnTop)
    }

    fn boundary(self) -> bool {
        !matches!(self, Family::Lstm | Family::HmlstmTop | Family::HmrnnTop)
    }

    fn bottom(self) -> bool {
        matches!(self, Family::Lstm | Family::HmlstmBottom | Family::HmrnnBottom)
    }

    fn shape(self, flags: &CellFlags) -> LayerShape {
        let top_down = self.boundary() && !flags.no_top_down;
        LayerShape {
            input: if self.bottom() { INPUT } else { UNITS },
            units: UNITS,
            per_unit: if self.has_cell() { 4 } else { 1 },
            boundary: self.boundary(),
            top_down: top_down.then_some(UNITS),
            layer_norm: flags.use_layer_norm,
        }
    }
}

/// One cell step with every real-valued input perturbed and the boundary
/// bits held fixed; rows of the batch cover all four (z_prev, z_below)
/// combinations.
fn cell_check(family: Family, flags: CellFlags, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = family.shape(&flags);
    let weights: LayerWeights<Tensor<f64>> = shape.uniform(&mut rng, 0.8);
    let x = random(&mut rng, &[BATCH, shape.input]);
    let h = random(&mut rng, &[BATCH, UNITS]);
    let c = random(&mut rng, &[BATCH, UNITS]);
    let above = random(&mut rng, &[BATCH, UNITS]);
    let z_prev = Tensor::new(vec![BATCH, 1], vec![0.0, 0.0, 1.0, 1.0])?;
    let z_below = Tensor::new(vec![BATCH, 1], vec![0.0, 1.0, 0.0, 1.0])?;

    let mut inputs = vec![x, h];
    if family.has_cell() {
        inputs.push(c);
    }
    let has_above = shape.top_down.is_some();
    if has_above {
        inputs.push(above);
    }
    let n_state = inputs.len();
    inputs.extend(weights.tensors().into_iter().cloned());

    let name = format!(
        "{family:?} ln={} copy_last={} no_top_down={}",
        flags.use_layer_norm, flags.copy_last, flags.no_top_down
    );
    check_gradients(&name, &inputs, STEP, |t, v| {
        let mut k = n_state;
        let w = weights.map(|_| {
            k += 1;
            v[k - 1]
        });
        let x = v[0];
        let prev = StepVars {
            h: v[1],
            c: family.has_cell().then(|| v[2]),
            z: family.boundary().then(|| t.leaf(z_prev.clone())),
        };
        let above = has_above.then(|| v[n_state - 1]);
        let zb = t.leaf(z_below.clone());
        let s = match family {
            Family::Lstm => cells::lstm_step(t, x, &prev, &w, &flags)?,
            Family::HmlstmBottom => cells::hmlstm_bottom_step(t, x, &prev, above, &w, &flags)?,
            Family::HmlstmMiddle => cells::hmlstm_middle_step(t, x, zb, &prev, above, &w, &flags)?,
            Family::HmlstmTop => cells::hmlstm_top_step(t, x, zb, &prev, &w, &flags)?,
            Family::HmrnnBottom => cells::hmrnn_bottom_step(t, x, &prev, above, &w, &flags)?,
            Family::HmrnnMiddle => cells::hmrnn_middle_step(t, x, zb, &prev, above, &w, &flags)?,
            Family::HmrnnTop => cells::hmrnn_top_step(t, x, zb, &prev, &w, &flags)?,
        };
        let mut loss = project(t, s.h, seed ^ 11)?;
        if let Some(c) = s.c {
            let lc = project(t, c, seed ^ 12)?;
            loss = t.add(loss, lc)?;
        }
        Ok(loss)
    })
}

fn head_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (u, o, layers) = (UNITS, 4, 3);
    let mut out = Vec::new();
    for ln in [false, true] {
        let hs: Vec<Tensor<f64>> = (0..layers).map(|_| random(&mut rng, &[BATCH, u])).collect();
        let gate_w = random(&mut rng, &[layers * u, layers]);
        let embeds: Vec<Tensor<f64>> = (0..layers).map(|_| random(&mut rng, &[u, o])).collect();
        let bias = random(&mut rng, &[1, o]);
        let gain = Tensor::from_fn(&[1, o], |_| 1.0 + rng.random_range(-0.3..0.3));
        let shift = random(&mut rng, &[1, o]);

        let mut inputs = hs.clone();
        inputs.push(gate_w);
        inputs.extend(embeds);
        inputs.extend([bias.clone(), gain.clone(), shift.clone()]);
        out.push(check_gradients(&format!("gated head ln={ln}"), &inputs, STEP, |t, v| {
            let norm = ln.then(|| StreamNorm { gain: v[2 * layers + 2], bias: v[2 * layers + 3] });
            let he = gated_output(t, &v[..layers], v[layers], &v[layers + 1..2 * layers + 1], v[2 * layers + 1], norm.as_ref(), 1e-5)?;
            project(t, he, seed ^ 21)
        })?);

        let mut inputs = hs;
        inputs.push(random(&mut rng, &[layers * u, o]));
        inputs.extend([bias, gain, shift]);
        out.push(check_gradients(&format!("simple head ln={ln}"), &inputs, STEP, |t, v| {
            let norm = ln.then(|| StreamNorm { gain: v[layers + 2], bias: v[layers + 3] });
            let he = simple_output(t, &v[..layers], v[layers], v[layers + 1], norm.as_ref(), 1e-5)?;
            project(t, he, seed ^ 22)
        })?);
    }
    Ok(out)
}

/// Runs the full suite. Each entry passes when its relative error is
/// below [`TOLERANCE`].
pub fn run_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = primitives(seed)?;
    out.push(straight_through_identity(seed));
    for (i, family) in Family::ALL.into_iter().enumerate() {
        for (j, flags) in CellFlags::grid().into_iter().enumerate() {
            out.push(cell_check(family, flags, seed.wrapping_add((i * 100 + j) as u64))?);
        }
    }
    out.extend(head_checks(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let results = run_suite(5).unwrap();
        assert_eq!(results.len(), 9 + 1 + 7 * 8 + 4);
        for r in &results {
            assert!(r.passes(TOLERANCE), "{r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // hard-sigmoid straddling a kink disagrees with its one-sided derivative
        let check = check_gradients("kink", &[Tensor::scalar(1.0)], 1e-3, |t, v| t.hard_sigmoid(v[0], 0.5)).unwrap();
        assert!(!check.passes(TOLERANCE));
    }
}
