use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::conformance::*;
use super::*;

#[test]
fn vectorized_matches_branches_for_every_kind_and_flag() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for family in [Family::Hmlstm, Family::Hmrnn] {
        for slot in [Slot::Bottom, Slot::Middle, Slot::Top] {
            for flags in CellFlags::grid() {
                let mut worst = 0.0f64;
                for _ in 0..100 {
                    let (z_prev, z_below) = mixed_pairs(&mut rng);
                    let case = Case::random(&mut rng, family, slot, flags, &z_prev, &z_below);
                    worst = worst.max(max_diff(&case.vectorized().unwrap(), &case.branched().unwrap()));
                }
                assert!(worst <= 1e-6, "{family:?} {slot:?} {flags:?}: {worst}");
            }
        }
    }
}

/// Independent scalar-loop LSTM with no layer norm.
fn lstm_oracle(x: &Tensor<f64>, h: &Tensor<f64>, c: &Tensor<f64>, w: &LayerWeights<Tensor<f64>>) -> (Tensor<f64>, Tensor<f64>) {
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let units = h.cols();
    let mut h_out = Tensor::zeros(h.shape());
    let mut c_out = Tensor::zeros(c.shape());
    for r in 0..x.rows() {
        let mut gates = vec![0.0; 4 * units];
        for (j, g) in gates.iter_mut().enumerate() {
            let mut s = w.b.get(0, j);
            for k in 0..x.cols() {
                s += x.get(r, k) * w.w.get(k, j);
            }
            for k in 0..units {
                s += h.get(r, k) * w.u.get(k, j);
            }
            *g = s;
        }
        for j in 0..units {
            let (i, f, u, o) = (gates[j], gates[units + j], gates[2 * units + j], gates[3 * units + j]);
            let cn = c.get(r, j) * sig(f) + u.tanh() * sig(i);
            c_out.set(r, j, cn);
            h_out.set(r, j, sig(o) * cn.tanh());
        }
    }
    (h_out, c_out)
}

fn run_lstm(x: &Tensor<f64>, state: &LayerState<f64>, w: &LayerWeights<Tensor<f64>>, flags: &CellFlags) -> LayerState<f64> {
    let mut tape = Tape::new();
    let wv = w.bind(&mut tape);
    let prev = state.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    lstm_step(&mut tape, xv, &prev, &wv, flags).unwrap().values(&tape)
}

fn lstm_shape(ln: bool) -> LayerShape {
    LayerShape { input: INPUT, units: UNITS, per_unit: 4, boundary: false, top_down: None, layer_norm: ln }
}

#[test]
fn lstm_zero_weights_give_zero_state() {
    let flags = CellFlags { use_layer_norm: false, ..CellFlags::default() };
    let w = lstm_shape(false).uniform::<f64, _>(&mut ChaCha8Rng::seed_from_u64(0), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_t(&mut rng, &[3, INPUT]);
    let state = LayerState::zeros(3, UNITS, true, false);
    let out = run_lstm(&x, &state, &w, &flags);
    assert!(out.h.data().iter().all(|&v| v == 0.0));
    assert!(out.c.unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn lstm_saturated_gates_hold_memory() {
    let flags = CellFlags { use_layer_norm: false, ..CellFlags::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut w = lstm_shape(false).uniform::<f64, _>(&mut rng, 0.1);
    for j in 0..UNITS {
        w.b.set(0, j, -60.0); // input gate shut
        w.b.set(0, UNITS + j, 60.0); // forget gate open
    }
    let x = rand_t(&mut rng, &[2, INPUT]);
    let mut state = LayerState::zeros(2, UNITS, true, false);
    state.c = Some(rand_t(&mut rng, &[2, UNITS]));
    state.h = rand_t(&mut rng, &[2, UNITS]);
    let out = run_lstm(&x, &state, &w, &flags);
    assert!(out.c.unwrap().max_abs_diff(state.c.as_ref().unwrap()) < 1e-12);
}

#[test]
fn lstm_matches_scalar_loop_oracle() {
    let flags = CellFlags { use_layer_norm: false, ..CellFlags::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let w = lstm_shape(false).uniform(&mut rng, 0.7);
        let x = rand_t(&mut rng, &[4, INPUT]);
        let state = LayerState { h: rand_t(&mut rng, &[4, UNITS]), c: Some(rand_t(&mut rng, &[4, UNITS])), z: None };
        let (h, c) = lstm_oracle(&x, &state.h, state.c.as_ref().unwrap(), &w);
        let out = run_lstm(&x, &state, &w, &flags);
        assert!(out.h.max_abs_diff(&h) < 1e-6);
        assert!(out.c.as_ref().unwrap().max_abs_diff(&c) < 1e-6);
        let br = branch::lstm_step(&x, &state, &w, &flags).unwrap();
        assert!(br.h.max_abs_diff(&h) < 1e-6);
    }
    // with layer norm the two library paths still agree
    let flags = CellFlags::default();
    let w = lstm_shape(true).uniform(&mut rng, 0.7);
    let x = rand_t(&mut rng, &[4, INPUT]);
    let state = LayerState { h: rand_t(&mut rng, &[4, UNITS]), c: Some(rand_t(&mut rng, &[4, UNITS])), z: None };
    let a = run_lstm(&x, &state, &w, &flags);
    let b = branch::lstm_step(&x, &state, &w, &flags).unwrap();
    assert!(max_diff(&a, &b) < 1e-6);
}

#[test]
fn bottom_flush_ignores_previous_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for flags in CellFlags::grid() {
        let mut case = Case::random(&mut rng, Family::Hmlstm, Slot::Bottom, flags, &[1.0; 4], &[1.0; 4]);
        let a = case.vectorized().unwrap();
        case.state.c = Some(rand_t(&mut rng, &[4, UNITS]).map(|v| v * 100.0));
        let b = case.vectorized().unwrap();
        assert!(same_bits(a.c.as_ref().unwrap(), b.c.as_ref().unwrap()));
        assert!(same_bits(&a.h, &b.h));
    }
}

#[test]
fn bottom_update_is_the_lstm_update() {
    let flags = CellFlags { use_layer_norm: false, ..CellFlags::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let case = Case::random(&mut rng, Family::Hmlstm, Slot::Bottom, flags, &[0.0; 4], &[0.0; 4]);
    let out = case.vectorized().unwrap();
    let cols = 4 * UNITS;
    let trim = |t: &Tensor<f64>| Tensor::from_fn(&[t.rows(), cols], |i| t.get(i / cols, i % cols));
    let lstm_w = LayerWeights { w: trim(&case.w.w), u: trim(&case.w.u), v: None, b: trim(&case.w.b), norms: None };
    let plain_state = LayerState { z: None, ..case.state.clone() };
    let expected = run_lstm(&case.input, &plain_state, &lstm_w, &flags);
    assert!(out.h.max_abs_diff(&expected.h) < 1e-12);
    assert!(out.c.unwrap().max_abs_diff(expected.c.as_ref().unwrap()) < 1e-12);
    let z = out.z.unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn middle_copy_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for family in [Family::Hmlstm, Family::Hmrnn] {
        for flags in CellFlags::grid() {
            for _ in 0..10 {
                let case = Case::random(&mut rng, family, Slot::Middle, flags, &[0.0; 4], &[0.0; 4]);
                let out = case.vectorized().unwrap();
                assert!(same_bits(&out.h, &case.state.h), "{family:?} {flags:?}");
                if let Some(c) = &case.state.c {
                    assert!(same_bits(out.c.as_ref().unwrap(), c));
                }
                let br = case.branched().unwrap();
                assert!(same_bits(&br.h, &case.state.h));
            }
        }
    }
}

#[test]
fn middle_flush_ignores_previous_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for flags in CellFlags::grid() {
        for z_below in [0.0, 1.0] {
            let mut case = Case::random(&mut rng, Family::Hmlstm, Slot::Middle, flags, &[1.0; 4], &[z_below; 4]);
            let a = case.vectorized().unwrap();
            case.state.c = Some(rand_t(&mut rng, &[4, UNITS]).map(|v| v * -50.0));
            let b = case.vectorized().unwrap();
            assert!(same_bits(a.c.as_ref().unwrap(), b.c.as_ref().unwrap()));
        }
    }
}

#[test]
fn top_copy_last_copies_both_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for ln in [false, true] {
        let flags = CellFlags { use_layer_norm: ln, copy_last: true, ..CellFlags::default() };
        let case = Case::random(&mut rng, Family::Hmlstm, Slot::Top, flags, &[0.0; 4], &[0.0; 4]);
        let out = case.vectorized().unwrap();
        assert!(same_bits(&out.h, &case.state.h));
        assert!(same_bits(out.c.as_ref().unwrap(), case.state.c.as_ref().unwrap()));
        assert!(out.z.is_none());
    }
}

#[test]
fn top_without_copy_last_recomputes_hidden_from_old_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let flags = CellFlags { use_layer_norm: false, copy_last: false, ..CellFlags::default() };
    let case = Case::random(&mut rng, Family::Hmlstm, Slot::Top, flags, &[0.0; 4], &[0.0; 4]);
    let out = case.vectorized().unwrap();
    let c_prev = case.state.c.as_ref().unwrap();
    assert!(same_bits(out.c.as_ref().unwrap(), c_prev));
    // z_below = 0 removes the bottom-up term: o = (h_prev·U + b)[3u..4u]
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    for r in 0..4 {
        for j in 0..UNITS {
            let col = 3 * UNITS + j;
            let mut o = case.w.b.get(0, col);
            for k in 0..UNITS {
                o += case.state.h.get(r, k) * case.w.u.get(k, col);
            }
            let expected = sig(o) * c_prev.get(r, j).tanh();
            assert!((out.h.get(r, j) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn top_update_ignores_copy_last_flag() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut case = Case::random(&mut rng, Family::Hmlstm, Slot::Top, CellFlags::default(), &[0.0; 4], &[1.0; 4]);
    case.flags.copy_last = false;
    let a = case.vectorized().unwrap();
    case.flags.copy_last = true;
    let b = case.vectorized().unwrap();
    assert!(same_bits(&a.h, &b.h));
    assert!(same_bits(a.c.as_ref().unwrap(), b.c.as_ref().unwrap()));
}

#[test]
fn hmrnn_flush_drops_recurrent_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for slot in [Slot::Bottom, Slot::Middle] {
        for flags in CellFlags::grid() {
            let mut case = Case::random(&mut rng, Family::Hmrnn, slot, flags, &[1.0; 4], &[1.0, 0.0, 1.0, 0.0]);
            let a = case.vectorized().unwrap();
            case.state.h = rand_t(&mut rng, &[4, UNITS]).map(|v| v * 30.0);
            let b = case.vectorized().unwrap();
            assert!(same_bits(&a.h, &b.h), "{slot:?} {flags:?}");
        }
    }
}

#[test]
fn hmrnn_top_copies_without_input_boundary() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let case = Case::random(&mut rng, Family::Hmrnn, Slot::Top, CellFlags::default(), &[0.0; 4], &[0.0; 4]);
    let out = case.vectorized().unwrap();
    assert!(same_bits(&out.h, &case.state.h));
    assert!(out.z.is_none() && out.c.is_none());
}

#[test]
fn non_binary_boundary_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    for family in [Family::Hmlstm, Family::Hmrnn] {
        for slot in [Slot::Middle, Slot::Top] {
            let mut case = Case::random(&mut rng, family, slot, CellFlags::default(), &[0.0; 4], &[0.0; 4]);
            case.z_below = bits(&[0.0, 0.5, 1.0, 1.0]);
            let mut tape = Tape::new();
            let w = case.w.bind(&mut tape);
            let prev = case.state.bind(&mut tape);
            let x = tape.leaf(case.input.clone());
            let zb = tape.leaf(case.z_below.clone());
            let res = match (family, slot) {
                (Family::Hmlstm, Slot::Middle) => {
                    let above = tape.leaf(case.above.clone());
                    hmlstm_middle_step(&mut tape, x, zb, &prev, Some(above), &w, &case.flags)
                }
                (Family::Hmlstm, _) => hmlstm_top_step(&mut tape, x, zb, &prev, &w, &case.flags),
                (Family::Hmrnn, Slot::Middle) => {
                    let above = tape.leaf(case.above.clone());
                    hmrnn_middle_step(&mut tape, x, zb, &prev, Some(above), &w, &case.flags)
                }
                (Family::Hmrnn, _) => hmrnn_top_step(&mut tape, x, zb, &prev, &w, &case.flags),
            };
            assert!(res.is_err());
            assert!(case.branched_checked().is_err());
        }
    }
}

impl Case {
    fn branched_checked(&self) -> Result<LayerState<f64>> {
        let input = match self.slot {
            Slot::Bottom => LayerInput::Bottom { x: &self.input, h_above_prev: Some(&self.above) },
            Slot::Middle => LayerInput::Middle { h_below: &self.input, z_below: &self.z_below, h_above_prev: Some(&self.above) },
            Slot::Top => LayerInput::Top { h_below: &self.input, z_below: &self.z_below },
        };
        match self.family {
            Family::Hmlstm => branch::hmlstm_step(input, &self.state, &self.w, &self.flags),
            Family::Hmrnn => branch::hmrnn_step(input, &self.state, &self.w, &self.flags),
        }
    }
}

#[test]
fn dimension_mismatch_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let case = Case::random(&mut rng, Family::Hmlstm, Slot::Bottom, CellFlags::default(), &[0.0; 4], &[0.0; 4]);
    let mut tape = Tape::new();
    let w = case.w.bind(&mut tape);
    let prev = case.state.bind(&mut tape);
    let x = tape.leaf(rand_t(&mut rng, &[4, INPUT + 1]));
    let above = tape.leaf(case.above.clone());
    assert!(matches!(
        hmlstm_bottom_step(&mut tape, x, &prev, Some(above), &w, &case.flags),
        Err(Error::Shape { .. })
    ));
    let x = tape.leaf(case.input.clone());
    assert!(hmlstm_bottom_step(&mut tape, x, &prev, None, &w, &case.flags).is_err());
}

#[test]
fn slope_must_be_positive() {
    let flags = CellFlags { slope_alpha: 0.0, ..CellFlags::default() };
    assert!(flags.validate().is_err());
    assert!(CellFlags::default().validate().is_ok());
}
