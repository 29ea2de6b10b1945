//! Central finite-difference checks against tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Relative errors below this denominator are measured absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares tape gradients of `build` with respect to every entry of every
/// input against `(f(x+eps) − f(x−eps)) / 2eps`.
pub fn check_gradients<F>(name: &str, inputs: &[Tensor<f64>], eps: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.gradients(loss)?;

    let mut result = GradCheck {
        name: name.to_string(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, &var) in vars.iter().enumerate() {
        let analytic = grads
            .get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            result.max_abs_error = result.max_abs_error.max((a - numeric).abs());
            result.max_rel_error = result.max_rel_error.max(relative_error(a, numeric));
            result.checked += 1;
        }
    }
    Ok(result)
}
