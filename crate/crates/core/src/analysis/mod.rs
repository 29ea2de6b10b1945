//! Bits-per-character evaluation, boundary extraction and statistics, and
//! segmentation rendering.

mod render;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Real;

pub use render::{parse_tsv, render_pgm, render_tsv, write_segmentation, SegmentationFormat};

/// Default evaluation chunk length.
pub const EVAL_CHUNK: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub bpc: f64,
    pub nats_per_char: f64,
    pub chars: usize,
}

/// Predicts `ids[1..]` from `ids[..n-1]` one sequence at a time (batch 1),
/// in consecutive chunks with the state carried between them.
pub fn evaluate<T: Real>(model: &Model<T>, ids: &[usize], chunk: usize) -> Result<Evaluation> {
    if ids.len() < 2 {
        return Err(Error::Data("evaluation needs at least two characters".into()));
    }
    if chunk == 0 {
        return Err(Error::invalid("evaluate", "chunk must be >= 1"));
    }
    let predicted = ids.len() - 1;
    let mut state = model.initial_state(1);
    let mut nats = 0.0f64;
    let mut start = 0;
    while start < predicted {
        let end = (start + chunk).min(predicted);
        let (logits, _, next) = model.run(&ids[start..end], 1, &state)?;
        let v = logits.shape()[2];
        for (k, &target) in ids[start + 1..end + 1].iter().enumerate() {
            let row = &logits.data()[k * v..(k + 1) * v];
            nats += neg_log_prob(row, target);
        }
        state = next;
        start = end;
    }
    let nats_per_char = nats / predicted as f64;
    Ok(Evaluation {
        bpc: nats_per_char / std::f64::consts::LN_2,
        nats_per_char,
        chars: predicted,
    })
}

pub fn evaluate_bpc<T: Real>(model: &Model<T>, ids: &[usize], chunk: usize) -> Result<f64> {
    Ok(evaluate(model, ids, chunk)?.bpc)
}

fn neg_log_prob<T: Real>(logits: &[T], target: usize) -> f64 {
    let max = logits.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v.to_f64_lossy() - max).exp()).sum::<f64>().ln() + max;
    lse - logits[target].to_f64_lossy()
}

/// `freq(z¹) / freq(z²)`; `0 / positive` is 0 and anything over 0 is
/// undefined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZRatio {
    Value(f64),
    Undefined,
}

impl ZRatio {
    pub fn of(freq1: f64, freq2: f64) -> Self {
        if freq2 > 0.0 {
            ZRatio::Value(freq1 / freq2)
        } else {
            ZRatio::Undefined
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            ZRatio::Value(v) => Some(v),
            ZRatio::Undefined => None,
        }
    }
}

impl std::fmt::Display for ZRatio {
    /// Two decimals, or `undefined`.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ZRatio::Value(v) => write!(f, "{v:.2}"),
            ZRatio::Undefined => f.write_str("undefined"),
        }
    }
}

/// Fraction of steps with a boundary.
pub fn frequency(bits: &[u8]) -> f64 {
    if bits.is_empty() {
        return 0.0;
    }
    bits.iter().filter(|&&b| b == 1).count() as f64 / bits.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationRecord {
    pub text: Vec<char>,
    pub z1: Vec<u8>,
    pub z2: Vec<u8>,
    pub freq1: f64,
    pub freq2: f64,
    pub z_ratio: ZRatio,
}

impl SegmentationRecord {
    pub fn new(text: Vec<char>, z1: Vec<u8>, z2: Vec<u8>) -> Result<Self> {
        if text.len() != z1.len() || text.len() != z2.len() {
            return Err(Error::invalid(
                "SegmentationRecord",
                format!("text has {} chars, z1 {} and z2 {} bits", text.len(), z1.len(), z2.len()),
            ));
        }
        if let Some(b) = z1.iter().chain(&z2).find(|&&b| b > 1) {
            return Err(Error::invalid("SegmentationRecord", format!("boundary bit {b} is not 0 or 1")));
        }
        let (freq1, freq2) = (frequency(&z1), frequency(&z2));
        Ok(SegmentationRecord {
            text,
            z1,
            z2,
            freq1,
            freq2,
            z_ratio: ZRatio::of(freq1, freq2),
        })
    }

    pub fn text_string(&self) -> String {
        self.text.iter().collect()
    }

    pub fn bits(&self, level: Level) -> &[u8] {
        match level {
            Level::Z1 => &self.z1,
            Level::Z2 => &self.z2,
        }
    }
}

/// Runs `text` through the model (batch 1, state carried across chunks of
/// [`EVAL_CHUNK`]) and records the boundary bits of the two lowest layers.
pub fn extract_segmentation<T: Real>(model: &Model<T>, vocab: &Vocabulary, text: &str) -> Result<SegmentationRecord> {
    if model.config.boundary_layers() < 2 {
        return Err(Error::invalid(
            "extract_segmentation",
            format!("{:?} model with {} layers has fewer than two boundary layers", model.config.arch, model.config.layers),
        ));
    }
    let chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return Err(Error::Data("segmentation text is empty".into()));
    }
    let ids: Vec<usize> = chars.iter().map(|&c| vocab.id(c)).collect();
    let mut state = model.initial_state(1);
    let (mut z1, mut z2) = (Vec::with_capacity(ids.len()), Vec::with_capacity(ids.len()));
    for part in ids.chunks(EVAL_CHUNK) {
        let (_, bounds, next) = model.run(part, 1, &state)?;
        z1.extend_from_slice(&bounds[0].bits);
        z2.extend_from_slice(&bounds[1].bits);
        state = next;
    }
    SegmentationRecord::new(chars, z1, z2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Z1,
    Z2,
}

/// Precision/recall/F1 of boundaries against spaces. Undefined ratios
/// (nothing predicted, no spaces) are `None`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Agreement {
    pub shift: isize,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

/// Scores `z_t = 1` as a boundary hit when `text[t + shift]` is a space.
pub fn boundary_agreement(record: &SegmentationRecord, level: Level, shift: isize) -> Agreement {
    let bits = record.bits(level);
    let is_space = |i: isize| i >= 0 && (i as usize) < record.text.len() && record.text[i as usize] == ' ';
    let gold = record.text.iter().filter(|&&c| c == ' ').count();
    let predicted = bits.iter().filter(|&&b| b == 1).count();
    let true_positives = (0..bits.len())
        .filter(|&t| bits[t] == 1 && is_space(t as isize + shift))
        .count();
    let precision = (predicted > 0).then(|| true_positives as f64 / predicted as f64);
    let recall = (gold > 0).then(|| true_positives as f64 / gold as f64);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Agreement {
        shift,
        true_positives,
        predicted,
        gold,
        precision,
        recall,
        f1,
    }
}
