//! The work behind each subcommand, usable without the argument parser.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::config::{ConfigText, DataSource, RunConfig};
use crate::analysis::{
    self, boundary_agreement, extract_segmentation, write_segmentation, Level, SegmentationFormat, SegmentationRecord,
    ZRatio,
};
use crate::data::{load_corpus, split_text, synthetic_text, CorpusSplits, Vocabulary};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::model::Model;
use crate::numerics::{DType, GradCheck, Real};
use crate::training::{peek_dtype, Decision, Event, Outcome, Snapshot, Trainer};

/// Line-oriented `key=value` log, written to a file and optionally echoed
/// to stdout. Nothing time-dependent goes in, so equal runs give equal logs.
pub struct RunLog {
    file: Option<BufWriter<File>>,
    echo: bool,
    lines: Vec<String>,
}

impl RunLog {
    pub fn new(path: Option<&Path>, echo: bool) -> Result<Self> {
        let file = match path {
            Some(p) => {
                if let Some(dir) = p.parent() {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?))
            }
            None => None,
        };
        Ok(RunLog { file, echo, lines: Vec::new() })
    }

    pub fn line(&mut self, line: impl Into<String>) {
        let line = line.into();
        if self.echo {
            println!("{line}");
        }
        if let Some(f) = &mut self.file {
            // a failing log write should not kill a long run
            if let Err(e) = writeln!(f, "{line}") {
                log::warn!("run log write failed: {e}");
                self.file = None;
            }
        }
        self.lines.push(line);
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn flush(&mut self) {
        if let Some(f) = &mut self.file {
            let _ = f.flush();
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |v| format!("{v:.4}"))
}

pub fn load_data(run: &RunConfig) -> Result<(CorpusSplits, Vocabulary)> {
    match &run.data {
        None => Err(Error::Config(
            "no data: set `data`, `train_file`/`valid_file`/`test_file` or `synthetic_chars`".into(),
        )),
        Some(DataSource::Synthetic { chars, seed }) => split_text(&synthetic_text(*seed, *chars), run.corpus_mode),
        Some(source) => load_corpus(&source.corpus_source().expect("file source"), run.corpus_mode),
    }
}

/// One finished training run, as reported in the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub outcome: String,
    pub iterations: u64,
    pub epochs: usize,
    pub best_valid_bpc: Option<f64>,
    pub test_bpc: Option<f64>,
    /// Boundary frequencies of the last completed epoch.
    pub z_freq: Vec<f64>,
    pub diverged_at: Option<u64>,
}

impl RunSummary {
    pub fn z_ratio(&self) -> Option<ZRatio> {
        match self.z_freq.as_slice() {
            [z1, z2, ..] => Some(ZRatio::of(*z1, *z2)),
            _ => None,
        }
    }
}

/// Directory holding a run's log, history and checkpoints.
pub fn run_dir(run: &RunConfig) -> PathBuf {
    run.out_dir.join(&run.name)
}

/// Trains as configured, optionally continuing from a checkpoint.
pub fn train(run: &RunConfig, resume: Option<&Path>, log: &mut RunLog) -> Result<RunSummary> {
    let dtype = match resume {
        Some(p) => peek_dtype(p)?,
        None => run.dtype,
    };
    if dtype != run.dtype {
        return Err(Error::Config(format!("checkpoint holds {dtype:?} but the config asks for {:?}", run.dtype)));
    }
    match dtype {
        DType::F32 => train_typed::<f32>(run, resume, log),
        DType::F64 => train_typed::<f64>(run, resume, log),
    }
}

fn train_typed<T: Real>(run: &RunConfig, resume: Option<&Path>, log: &mut RunLog) -> Result<RunSummary> {
    for l in run.log_lines() {
        log.line(l);
    }
    let (splits, vocab) = load_data(run)?;
    log.line(format!(
        "data mode={} train_chars={} valid_chars={} test_chars={} vocab={}",
        splits.mode,
        splits.train.len(),
        splits.valid.len(),
        splits.test.len(),
        vocab.size()
    ));
    let mut model_config = run.model.clone();
    model_config.vocab_size = vocab.size();
    let dir = run_dir(run);
    let mut train_config = run.train.clone();
    train_config.checkpoint_dir = Some(dir.clone());

    let mut trainer = match resume {
        None => Trainer::new(Model::<T>::new(model_config)?, vocab, train_config)?,
        Some(path) => {
            let snapshot = Snapshot::<T>::load(path)?;
            if snapshot.model.config != model_config {
                return Err(Error::Config(format!("{} was trained with a different model configuration", path.display())));
            }
            if snapshot.vocab != vocab {
                return Err(Error::Config(format!("{} was trained on a different vocabulary", path.display())));
            }
            let mut t = Trainer::from_snapshot(snapshot);
            // limits and output location may change between sessions
            t.config.max_epochs = train_config.max_epochs;
            t.config.max_iterations = train_config.max_iterations;
            t.config.checkpoint_dir = train_config.checkpoint_dir;
            log.line(format!(
                "resume checkpoint={} epoch={} iteration={}",
                path.display(),
                t.progress.epoch,
                t.progress.iteration
            ));
            t
        }
    };
    log.line(format!(
        "model arch={} params={} boundary_layers={}",
        trainer.model.config.arch,
        trainer.model.params.count(),
        trainer.model.config.boundary_layers()
    ));

    let outcome = trainer.run(&splits, |event| match event {
        Event::Iteration(r) => log.line(format!("iter iteration={} loss={:.6} lr={}", r.iteration, r.loss, r.lr)),
        Event::Epoch(r) => {
            let z: Vec<String> = r.z_freq.iter().enumerate().map(|(i, f)| format!(" z{}={f:.4}", i + 1)).collect();
            let decision = match &r.decision {
                Decision::Improved => "improved".to_string(),
                Decision::Continue => "continue".to_string(),
                Decision::DividedLr { to, .. } => format!("divide_lr new_lr={to}"),
                Decision::Stop { .. } => "stop".to_string(),
            };
            log.line(format!(
                "epoch epoch={} iterations={} train_loss={:.6} valid_loss={:.6} valid_bpc={:.4} lr={}{} decision={decision}",
                r.epoch,
                r.iterations,
                r.train_loss,
                r.valid_loss,
                r.valid_bpc,
                r.lr,
                z.concat()
            ))
        }
    })?;

    let outcome_text = match &outcome {
        Outcome::MaxIterations => "max_iterations".to_string(),
        Outcome::MaxEpochs => "max_epochs".to_string(),
        Outcome::EarlyStop(reason) => format!("early_stop reason={reason:?}"),
        Outcome::Diverged(d) => {
            log.line(format!(
                "diverged iteration={} epoch={} loss={} grad_norm={} lr={} checkpoint={}",
                d.iteration,
                d.epoch,
                d.loss,
                d.grad_norm,
                d.lr,
                d.checkpoint.as_ref().map_or("-".to_string(), |p| p.display().to_string())
            ));
            "diverged".to_string()
        }
    };
    let diverged_at = trainer.history.divergence.as_ref().map(|d| d.iteration);
    if diverged_at.is_none() {
        trainer.snapshot().save(&dir.join("last.hmlb"))?;
    }
    let history_path = dir.join("history.json");
    let json = serde_json::to_vec_pretty(&trainer.history).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(&history_path, json).map_err(|e| Error::io(&history_path, e))?;

    // test bpc comes from the parameters with the best validation loss
    let best_path = dir.join("best.hmlb");
    let test_bpc = if diverged_at.is_some() {
        None
    } else if best_path.exists() {
        let best = Snapshot::<T>::load(&best_path)?;
        Some(analysis::evaluate_bpc(&best.model, &splits.test, run.train.eval_chunk)?)
    } else {
        Some(analysis::evaluate_bpc(&trainer.model, &splits.test, run.train.eval_chunk)?)
    };
    let best_valid_bpc = trainer.history.epochs.iter().map(|e| e.valid_bpc).reduce(f64::min);
    let summary = RunSummary {
        name: run.name.clone(),
        outcome: outcome_text,
        iterations: trainer.progress.iteration,
        epochs: trainer.history.epochs.len(),
        best_valid_bpc,
        test_bpc,
        z_freq: trainer.history.epochs.last().map(|e| e.z_freq.clone()).unwrap_or_default(),
        diverged_at,
    };
    log.line(format!(
        "end outcome={} iterations={} epochs={} best_valid_bpc={} test_bpc={}",
        summary.outcome,
        summary.iterations,
        summary.epochs,
        fmt_opt(summary.best_valid_bpc),
        fmt_opt(summary.test_bpc)
    ));
    log.flush();
    Ok(summary)
}

/// Model and vocabulary of a checkpoint, in its stored precision.
pub enum LoadedModel {
    F32(Model<f32>, Vocabulary),
    F64(Model<f64>, Vocabulary),
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(match peek_dtype(path)? {
            DType::F32 => {
                let s = Snapshot::<f32>::load(path)?;
                LoadedModel::F32(s.model, s.vocab)
            }
            DType::F64 => {
                let s = Snapshot::<f64>::load(path)?;
                LoadedModel::F64(s.model, s.vocab)
            }
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        match self {
            LoadedModel::F32(_, v) | LoadedModel::F64(_, v) => v,
        }
    }

    pub fn bpc(&self, text: &str, chunk: usize) -> Result<f64> {
        let ids = self.vocab().encode(text);
        match self {
            LoadedModel::F32(m, _) => analysis::evaluate_bpc(m, &ids, chunk),
            LoadedModel::F64(m, _) => analysis::evaluate_bpc(m, &ids, chunk),
        }
    }

    pub fn segmentation(&self, text: &str) -> Result<SegmentationRecord> {
        match self {
            LoadedModel::F32(m, v) => extract_segmentation(m, v, text),
            LoadedModel::F64(m, v) => extract_segmentation(m, v, text),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.chars().count() < 2 {
        return Err(Error::Data(format!("{} needs at least two characters", path.display())));
    }
    Ok(text)
}

/// Bits per character of a checkpoint on a text file.
pub fn eval(checkpoint: &Path, data: &Path, chunk: usize) -> Result<f64> {
    if chunk == 0 {
        return Err(Error::Config("--chunk must be > 0".into()));
    }
    let model = LoadedModel::load(checkpoint)?;
    model.bpc(&read_text(data)?, chunk)
}

/// Writes the segmentation of `text` and returns `key=value` statistics.
pub fn segment(checkpoint: &Path, text: &Path, out: &Path, format: SegmentationFormat) -> Result<Vec<String>> {
    let model = LoadedModel::load(checkpoint)?;
    let record = model.segmentation(&read_text(text)?)?;
    write_segmentation(&record, format, out)?;
    let mut lines = vec![format!(
        "segment chars={} z1={:.4} z2={:.4} z_ratio={}",
        record.text.len(),
        record.freq1,
        record.freq2,
        record.z_ratio
    )];
    for level in [Level::Z1, Level::Z2] {
        let a = boundary_agreement(&record, level, 0);
        lines.push(format!(
            "space_agreement level={} predicted={} gold={} precision={} recall={} f1={}",
            if level == Level::Z1 { "z1" } else { "z2" },
            a.predicted,
            a.gold,
            fmt_opt(a.precision),
            fmt_opt(a.recall),
            fmt_opt(a.f1)
        ));
    }
    Ok(lines)
}

/// The gradient suite; one line per check plus a summary line.
pub fn gradcheck_report(seed: u64) -> Result<(Vec<String>, bool)> {
    let checks: Vec<GradCheck> = gradcheck::run_suite(seed)?;
    let mut lines = Vec::with_capacity(checks.len() + 1);
    let mut ok = true;
    let mut worst = 0.0f64;
    for c in &checks {
        let pass = c.passes(gradcheck::TOLERANCE);
        ok &= pass;
        worst = worst.max(c.max_rel_error);
        lines.push(format!(
            "check name={:?} checked={} max_rel_error={:.3e} max_abs_error={:.3e} pass={pass}",
            c.name, c.checked, c.max_rel_error, c.max_abs_error
        ));
    }
    lines.push(format!(
        "gradcheck checks={} failures={} max_rel_error={worst:.3e} tolerance={:e}",
        checks.len(),
        checks.iter().filter(|c| !c.passes(gradcheck::TOLERANCE)).count(),
        gradcheck::TOLERANCE
    ));
    Ok((lines, ok))
}

/// Config files of an ablation directory, sorted by file name.
pub fn ablation_configs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "conf"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no .conf files in {}", dir.display())));
    }
    Ok(paths)
}

/// Trains every config in `dir` (with `overrides` applied to each) on up to
/// `jobs` threads and returns the summaries in file order.
pub fn ablate(dir: &Path, overrides: &[String], jobs: usize) -> Result<Vec<RunSummary>> {
    let mut runs = Vec::new();
    for path in ablation_configs(dir)? {
        let mut text = ConfigText::read(&path)?;
        text.apply_overrides(overrides)?;
        runs.push(text.resolve()?);
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<RunSummary>>>> =
        runs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, runs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(run) = runs.get(i) else { break };
                log::info!("ablation run {} started", run.name);
                let result = RunLog::new(Some(&run_dir(run).join("run.log")), false).and_then(|mut log| train(run, None, &mut log));
                match &result {
                    Ok(s) => log::info!("ablation run {} finished: {}", run.name, s.outcome),
                    Err(e) => log::error!("ablation run {} failed: {e}", run.name),
                }
                *results[i].lock().expect("result slot") = Some(result);
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every run finished"))
        .collect()
}

/// Markdown table with one row per run: bpc, iterations, z¹, z², z-ratio.
pub fn ablation_table(rows: &[RunSummary]) -> String {
    let mut out = String::from("| run | bpc | iter | z1 | z2 | z-ratio |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let bpc = match (r.diverged_at, r.test_bpc) {
            (Some(it), _) => format!("diverged at {it}"),
            (None, v) => fmt_opt(v),
        };
        let z = |i: usize| r.z_freq.get(i).map_or("-".to_string(), |f| format!("{f:.2}"));
        let ratio = r.z_ratio().map_or("-".to_string(), |z| z.to_string());
        out.push_str(&format!("| {} | {bpc} | {} | {} | {} | {ratio} |\n", r.name, r.iterations, z(0), z(1)));
    }
    out
}
