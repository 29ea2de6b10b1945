//! Output embeddings combining the hidden states of every layer.

use crate::cells::StreamNorm;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Var};

/// Parameters of an output head, bound to a tape.
#[derive(Clone, Debug)]
pub enum HeadVars {
    /// One gate column per layer (`[L·units, L]`) and one embedding per layer.
    Gated {
        gate_w: Var,
        embeds: Vec<Var>,
        bias: Var,
        norm: Option<StreamNorm<Var>>,
    },
    /// One embedding of the concatenated states.
    Simple {
        embed: Var,
        bias: Var,
        norm: Option<StreamNorm<Var>>,
    },
}

fn finish<T: Real>(tape: &mut Tape<T>, sum: Var, bias: Var, norm: Option<&StreamNorm<Var>>, eps: T) -> Result<Var> {
    let mut pre = tape.add(sum, bias)?;
    if let Some(n) = norm {
        pre = tape.layer_norm(pre, n.gain, n.bias, eps)?;
    }
    Ok(tape.relu(pre))
}

/// `g^ℓ = σ(w_ℓᵀ[h¹; …; h^L])`, `h^e = ReLU(Σ_ℓ g^ℓ · h^ℓ W^e_ℓ + b)`, with
/// layer norm on the pre-ReLU sum when `norm` is given.
pub fn gated_output<T: Real>(
    tape: &mut Tape<T>,
    hs: &[Var],
    gate_w: Var,
    embeds: &[Var],
    bias: Var,
    norm: Option<&StreamNorm<Var>>,
    eps: T,
) -> Result<Var> {
    if hs.is_empty() || hs.len() != embeds.len() {
        return Err(Error::invalid(
            "gated_output",
            format!("{} hidden states for {} embeddings", hs.len(), embeds.len()),
        ));
    }
    let cat = tape.concat_cols(hs)?;
    let logits = tape.matmul(cat, gate_w)?;
    if tape.value(logits).cols() != hs.len() {
        return Err(Error::shape("gated_output", tape.value(cat).shape(), tape.value(gate_w).shape()));
    }
    let gates = tape.sigmoid(logits);
    let mut sum: Option<Var> = None;
    for (l, (&h, &e)) in hs.iter().zip(embeds).enumerate() {
        let g = tape.slice_cols(gates, l, l + 1)?;
        let proj = tape.matmul(h, e)?;
        let term = tape.mul(proj, g)?;
        sum = Some(match sum {
            Some(s) => tape.add(s, term)?,
            None => term,
        });
    }
    finish(tape, sum.unwrap(), bias, norm, eps)
}

/// `h^e = ReLU([h¹; …; h^L] W^e + b)`, layer norm as configured.
pub fn simple_output<T: Real>(
    tape: &mut Tape<T>,
    hs: &[Var],
    embed: Var,
    bias: Var,
    norm: Option<&StreamNorm<Var>>,
    eps: T,
) -> Result<Var> {
    if hs.is_empty() {
        return Err(Error::invalid("simple_output", "no hidden states"));
    }
    let cat = tape.concat_cols(hs)?;
    let proj = tape.matmul(cat, embed)?;
    finish(tape, proj, bias, norm, eps)
}

impl HeadVars {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, hs: &[Var], eps: T) -> Result<Var> {
        match self {
            HeadVars::Gated { gate_w, embeds, bias, norm } => {
                gated_output(tape, hs, *gate_w, embeds, *bias, norm.as_ref(), eps)
            }
            HeadVars::Simple { embed, bias, norm } => simple_output(tape, hs, *embed, *bias, norm.as_ref(), eps),
        }
    }
}
