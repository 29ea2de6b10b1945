//! Loss, optimization, the epoch loop with truncated backpropagation, and
//! checkpoints.

mod checkpoint;
mod optim;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::analysis::{self, EVAL_CHUNK};
use crate::data::{make_epoch, Chunk, CorpusSplits, Epoch, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{time_major, BoundModel, Model, ModelState};
use crate::numerics::{ParamKind, ParamSet, Real, Tape, Var};
use crate::rng;

pub use checkpoint::{peek_dtype, Snapshot, CHECKPOINT_VERSION, MAGIC};
pub use optim::{clip_global_norm, Adam, AdamScalars, Decision, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub clip: f64,
    pub l2: f64,
    pub max_epochs: usize,
    /// Total optimizer steps across epochs; `None` runs to `max_epochs`.
    pub max_iterations: Option<u64>,
    pub schedule: bool,
    pub patience: usize,
    pub lr_divisor: f64,
    /// Carry recurrent state between the chunks of an epoch.
    pub carry_state: bool,
    pub eval_chunk: usize,
    /// Validation characters scored per epoch; `None` scores the whole split.
    pub valid_limit: Option<usize>,
    /// Master seed of the cropping stream.
    pub seed: u64,
    /// Where the divergence checkpoint is written.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 64,
            seq_len: 100,
            lr: 0.002,
            clip: 1.0,
            l2: 0.0005,
            max_epochs: 50,
            max_iterations: None,
            schedule: true,
            patience: 4,
            lr_divisor: 50.0,
            carry_state: true,
            eval_chunk: EVAL_CHUNK,
            valid_limit: None,
            seed: 1,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch", self.batch as f64),
            ("seq_len", self.seq_len as f64),
            ("lr", self.lr),
            ("clip", self.clip),
            ("lr_divisor", self.lr_divisor),
            ("eval_chunk", self.eval_chunk as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::Config(format!("l2 must be >= 0, got {}", self.l2)));
        }
        Ok(())
    }
}

/// Cross-entropy and `λ·Σ‖W‖²` over every weight matrix. Returns
/// `(total, cross_entropy)`.
pub fn loss_with_penalty<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[usize],
    params: &ParamSet<T>,
    bound: &BoundModel,
    l2: f64,
) -> Result<(Var, Var)> {
    let ce = tape.softmax_cross_entropy(logits, targets)?;
    if l2 == 0.0 {
        return Ok((ce, ce));
    }
    let mut penalty: Option<Var> = None;
    for &(id, var) in &bound.vars {
        if params.get(id).kind != ParamKind::Weight {
            continue;
        }
        let sq = tape.sum_squares(var);
        penalty = Some(match penalty {
            Some(p) => tape.add(p, sq)?,
            None => sq,
        });
    }
    let Some(p) = penalty else { return Ok((ce, ce)) };
    let scaled = tape.affine(p, T::from_f64_lossy(l2), T::zero());
    Ok((tape.add(ce, scaled)?, ce))
}

/// `λ·Σ‖W‖²` evaluated directly on the parameter values.
pub fn weight_penalty<T: Real>(params: &ParamSet<T>, l2: f64) -> f64 {
    l2 * params
        .iter()
        .filter(|p| p.kind == ParamKind::Weight)
        .map(|p| p.value.data().iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>())
        .sum::<f64>()
}

/// Names of the parameters the L2 penalty covers.
pub fn penalized<T: Real>(params: &ParamSet<T>) -> Vec<&str> {
    params
        .iter()
        .filter(|p| p.kind == ParamKind::Weight)
        .map(|p| p.name.as_str())
        .collect()
}

/// JSON has no NaN or infinity; such values are written as strings.
mod nonfinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    #[serde(with = "nonfinite")]
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub iterations: u64,
    #[serde(with = "nonfinite")]
    pub train_loss: f64,
    #[serde(with = "nonfinite")]
    pub valid_loss: f64,
    #[serde(with = "nonfinite")]
    pub valid_bpc: f64,
    pub lr: f64,
    /// Boundary frequency per boundary layer over the epoch's training chunks.
    pub z_freq: Vec<f64>,
    pub decision: Decision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRecord {
    pub iteration: u64,
    pub epoch: usize,
    /// Text form, since the value is NaN or infinite.
    pub loss: String,
    pub grad_norm: String,
    pub lr: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub iterations: Vec<IterationRecord>,
    pub epochs: Vec<EpochRecord>,
    pub divergence: Option<DivergenceRecord>,
}

/// Position inside the run, including the running sums of the current
/// epoch so a resumed run reports the same epoch statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub chunk: usize,
    pub iteration: u64,
    pub epoch_loss_sum: f64,
    pub epoch_z_ones: Vec<u64>,
    pub epoch_z_steps: u64,
    pub finished: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub cross_entropy: f64,
    pub grad_norm: f64,
    pub z_ones: Vec<u64>,
    pub z_steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    MaxIterations,
    MaxEpochs,
    EarlyStop(String),
    Diverged(DivergenceRecord),
}

/// Progress notifications from [`Trainer::run`].
pub enum Event<'a> {
    Iteration(&'a IterationRecord),
    Epoch(&'a EpochRecord),
}

pub struct Trainer<T> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub adam: Adam<T>,
    pub schedule: Schedule,
    pub progress: Progress,
    pub history: History,
    /// State carried into the next chunk.
    pub state: Option<ModelState<T>>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, vocab: Vocabulary, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if vocab.size() != model.config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} ids, model expects {}",
                vocab.size(),
                model.config.vocab_size
            )));
        }
        let adam = Adam::new(&model.params, config.lr);
        let schedule = Schedule::new(config.schedule, config.patience, config.lr_divisor);
        let progress = Progress {
            epoch_z_ones: vec![0; model.config.boundary_layers()],
            ..Progress::default()
        };
        Ok(Trainer {
            model,
            config,
            vocab,
            adam,
            schedule,
            progress,
            history: History::default(),
            state: None,
        })
    }

    /// The epoch layout is a pure function of the seed and epoch index.
    pub fn epoch_layout(&self, split: &[usize], epoch: usize) -> Result<Epoch> {
        let mut r = rng::indexed_stream(self.config.seed, "crop", epoch as u64);
        make_epoch(split, self.config.batch, self.config.seq_len, &mut r)
    }

    /// Forward and backward over one chunk starting from `state` (values
    /// only; no gradient reaches earlier chunks). Leaves the gradients in
    /// the parameters and returns the state after the chunk.
    pub fn chunk_gradients(&mut self, chunk: &Chunk, state: &ModelState<T>) -> Result<(StepReport, ModelState<T>)> {
        let batch = self.config.batch;
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let out = self.model.forward_sequence(&mut tape, &bound, &chunk.inputs, batch, state)?;
        let targets = time_major(&chunk.targets, batch);
        let (loss, ce) = loss_with_penalty(&mut tape, out.logits, &targets, &self.model.params, &bound, self.config.l2)?;
        self.model.params.zero_grad();
        let loss_value = tape.value(loss).item().to_f64_lossy();
        let ce_value = tape.value(ce).item().to_f64_lossy();
        if loss_value.is_finite() {
            tape.backward(loss, &mut self.model.params)?;
        }
        let report = StepReport {
            loss: loss_value,
            cross_entropy: ce_value,
            grad_norm: 0.0,
            z_ones: out.boundaries.iter().map(|b| b.ones() as u64).collect(),
            z_steps: (out.batch * out.steps) as u64,
        };
        Ok((report, out.state))
    }

    /// One optimizer step. Non-finite loss or gradients leave the
    /// parameters untouched and are reported through the returned report.
    pub fn train_step(&mut self, chunk: &Chunk) -> Result<StepReport> {
        let state = match (&self.state, self.config.carry_state) {
            (Some(s), true) => s.clone(),
            _ => self.model.initial_state(self.config.batch),
        };
        let (mut report, next) = self.chunk_gradients(chunk, &state)?;
        if !report.loss.is_finite() {
            report.grad_norm = f64::NAN;
            return Ok(report);
        }
        report.grad_norm = clip_global_norm(&mut self.model.params, self.config.clip)?;
        if !report.grad_norm.is_finite() {
            return Ok(report);
        }
        self.adam.update(&mut self.model.params)?;
        self.state = Some(next);
        Ok(report)
    }

    fn validation_ids<'a>(&self, splits: &'a CorpusSplits) -> &'a [usize] {
        match self.config.valid_limit {
            Some(n) => &splits.valid[..splits.valid.len().min(n.max(2))],
            None => &splits.valid,
        }
    }

    fn diverge(&mut self, report: &StepReport) -> Result<DivergenceRecord> {
        let mut record = DivergenceRecord {
            iteration: self.progress.iteration,
            epoch: self.progress.epoch,
            loss: report.loss.to_string(),
            grad_norm: report.grad_norm.to_string(),
            lr: self.adam.lr,
            checkpoint: None,
        };
        log::error!(
            "diverged at iteration {} (loss={}, grad_norm={})",
            record.iteration,
            record.loss,
            record.grad_norm
        );
        self.progress.finished = true;
        if let Some(dir) = &self.config.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("diverged.hmlb");
            record.checkpoint = Some(path.clone());
            self.history.divergence = Some(record.clone());
            self.snapshot().save(&path)?;
        }
        self.history.divergence = Some(record.clone());
        Ok(record)
    }

    /// Runs epochs until an iteration or epoch limit, early stopping, or
    /// divergence. Resumes mid-epoch from [`Self::progress`].
    pub fn run(&mut self, splits: &CorpusSplits, mut on_event: impl FnMut(Event<'_>)) -> Result<Outcome> {
        if self.progress.finished {
            return Ok(Outcome::EarlyStop("run already finished".into()));
        }
        loop {
            if self.progress.epoch >= self.config.max_epochs {
                return Ok(Outcome::MaxEpochs);
            }
            let epoch = self.epoch_layout(&splits.train, self.progress.epoch)?;
            if self.progress.chunk == 0 {
                self.state = None;
            }
            while self.progress.chunk < epoch.chunks.len() {
                if self.config.max_iterations.is_some_and(|m| self.progress.iteration >= m) {
                    return Ok(Outcome::MaxIterations);
                }
                let report = self.train_step(&epoch.chunks[self.progress.chunk])?;
                if !report.loss.is_finite() || !report.grad_norm.is_finite() {
                    return Ok(Outcome::Diverged(self.diverge(&report)?));
                }
                let p = &mut self.progress;
                p.iteration += 1;
                p.chunk += 1;
                p.epoch_loss_sum += report.cross_entropy;
                for (acc, n) in p.epoch_z_ones.iter_mut().zip(&report.z_ones) {
                    *acc += n;
                }
                p.epoch_z_steps += report.z_steps;
                let record = IterationRecord {
                    iteration: p.iteration,
                    loss: report.cross_entropy,
                    lr: self.adam.lr,
                };
                on_event(Event::Iteration(&record));
                self.history.iterations.push(record);
            }

            let eval = analysis::evaluate(&self.model, self.validation_ids(splits), self.config.eval_chunk)?;
            let lr = self.adam.lr;
            let decision = self.schedule.end_of_epoch(eval.nats_per_char, &mut self.adam);
            let p = &mut self.progress;
            let record = EpochRecord {
                epoch: p.epoch,
                iterations: p.iteration,
                train_loss: p.epoch_loss_sum / p.chunk.max(1) as f64,
                valid_loss: eval.nats_per_char,
                valid_bpc: eval.bpc,
                lr,
                z_freq: p
                    .epoch_z_ones
                    .iter()
                    .map(|&n| if p.epoch_z_steps == 0 { 0.0 } else { n as f64 / p.epoch_z_steps as f64 })
                    .collect(),
                decision: decision.clone(),
            };
            on_event(Event::Epoch(&record));
            self.history.epochs.push(record);
            p.epoch += 1;
            p.chunk = 0;
            p.epoch_loss_sum = 0.0;
            p.epoch_z_ones.iter_mut().for_each(|n| *n = 0);
            p.epoch_z_steps = 0;
            self.state = None;
            if matches!(decision, Decision::Stop { .. }) {
                p.finished = true;
            }
            self.save_epoch_checkpoints(&decision)?;
            if let Decision::Stop { reason } = decision {
                return Ok(Outcome::EarlyStop(reason));
            }
        }
    }

    /// `last.hmlb` after every epoch, `best.hmlb` whenever validation improved.
    fn save_epoch_checkpoints(&self, decision: &Decision) -> Result<()> {
        let Some(dir) = &self.config.checkpoint_dir else {
            return Ok(());
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let snapshot = self.snapshot();
        snapshot.save(&dir.join("last.hmlb"))?;
        if *decision == Decision::Improved {
            snapshot.save(&dir.join("best.hmlb"))?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Snapshot<T> {
        Snapshot {
            model: self.model.clone(),
            train: self.config.clone(),
            vocab: self.vocab.clone(),
            adam: self.adam.clone(),
            schedule: self.schedule.clone(),
            progress: self.progress.clone(),
            history: self.history.clone(),
            state: self.state.clone(),
        }
    }

    pub fn from_snapshot(s: Snapshot<T>) -> Self {
        Trainer {
            model: s.model,
            config: s.train,
            vocab: s.vocab,
            adam: s.adam,
            schedule: s.schedule,
            progress: s.progress,
            history: s.history,
            state: s.state,
        }
    }
}

#[cfg(test)]
mod tests;
