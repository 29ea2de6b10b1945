//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! The desk-training and divergence criteria train three 128-unit models
//! on a generated 500K-character corpus; expect 20–40 minutes on one core.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use hmlstm::analysis::{self, evaluate, SegmentationRecord, ZRatio};
use hmlstm::cells::conformance::run_semantics_suite;
use hmlstm::cli::ablation::{ABLATION_GRID, DESK_BASE, FULL_SCALE_BASE};
use hmlstm::cli::config::{parse_config, ConfigText, RunConfig};
use hmlstm::cli::run::{self, RunLog, RunSummary};
use hmlstm::data::{split_text, synthetic_text, CorpusMode, CorpusSplits, Vocabulary};
use hmlstm::gradcheck;
use hmlstm::model::{Arch, Model, ModelConfig, OutputHead};
use hmlstm::numerics::{ParamSet, Tensor};
use hmlstm::training::{Adam, Decision, Outcome, Schedule, Snapshot, TrainConfig, Trainer};

const GRADIENT_TOLERANCE: f64 = 1e-4;
const SEMANTICS_TOLERANCE: f64 = 1e-6;
const SEMANTICS_TRIALS: usize = 100;
const SUITE_TIME_LIMIT: Duration = Duration::from_secs(60);
const ORACLE_TOLERANCE: f64 = 1e-6;
const CHUNK_TOLERANCE: f64 = 1e-9;
const UNIFORM_TOLERANCE: f64 = 1e-6;
const DESK_MARGIN_BELOW_UNIFORM: f64 = 0.5;
const DESK_BASELINE_SLACK: f64 = 0.05;
const DESK_MAX_EPOCHS: usize = 3;
const DESK_TIME_TARGET: Duration = Duration::from_secs(60 * 60);
const RESUME_ITERATIONS: u64 = 100;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict { pass, detail: detail.into() }
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn desk_config(slug_prefix: &str, out: &Path) -> RunConfig {
    let dir = repo_root().join("configs/ablation/desk");
    let path = run::ablation_configs(&dir)
        .expect("desk configs")
        .into_iter()
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with(slug_prefix))
        .unwrap_or_else(|| panic!("no desk config {slug_prefix}"));
    let mut text = ConfigText::read(&path).expect("readable config");
    text.set("out_dir", &out.display().to_string(), 0).unwrap();
    text.resolve().expect("valid config")
}

fn train_quiet(config: &RunConfig) -> hmlstm::Result<RunSummary> {
    let mut log = RunLog::new(Some(&run::run_dir(config).join("run.log")), false)?;
    run::train(config, None, &mut log)
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let checks = match gradcheck::run_suite(1) {
        Ok(c) => c,
        Err(e) => return Verdict::new(false, format!("suite error: {e}")),
    };
    let elapsed = start.elapsed();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !(c.max_rel_error < GRADIENT_TOLERANCE))
        .map(|c| c.name.as_str())
        .collect();
    let st = checks.iter().any(|c| c.name.starts_with("straight_through") && c.max_rel_error == 0.0);
    Verdict::new(
        failed.is_empty() && st && elapsed < SUITE_TIME_LIMIT,
        format!(
            "{} checks, max rel error {worst:.2e} (< {GRADIENT_TOLERANCE:e}), straight-through identity {st}, failed {failed:?}, {:.1}s",
            checks.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn semantics_suite() -> Verdict {
    let start = Instant::now();
    match run_semantics_suite(3, SEMANTICS_TRIALS) {
        Ok(r) => {
            let elapsed = start.elapsed();
            Verdict::new(
                r.max_vectorized_diff <= SEMANTICS_TOLERANCE && r.copy_exact && r.flush_independent && elapsed < SUITE_TIME_LIMIT,
                format!(
                    "{} batch-4 cases, vectorized vs branch max diff {:.2e} (<= {SEMANTICS_TOLERANCE:e}), COPY bit-exact {}, FLUSH independent {}, {:.1}s",
                    r.trials,
                    r.max_vectorized_diff,
                    r.copy_exact,
                    r.flush_independent,
                    elapsed.as_secs_f64()
                ),
            )
        }
        Err(e) => Verdict::new(false, format!("suite error: {e}")),
    }
}

fn small_model(vocab: usize) -> Model<f64> {
    Model::new(ModelConfig {
        units: 16,
        embed_dim: 8,
        output_dim: 16,
        vocab_size: vocab,
        seed: 11,
        ..ModelConfig::default()
    })
    .expect("valid model")
}

/// Mean negative log2-probability from one forward pass over the whole
/// sequence, with the softmax written out here.
fn whole_sequence_bpc(model: &Model<f64>, ids: &[usize]) -> f64 {
    let inputs = &ids[..ids.len() - 1];
    let (logits, _, _) = model.run(inputs, 1, &model.initial_state(1)).expect("forward");
    let v = logits.shape()[2];
    let data = logits.data();
    let mut total = 0.0;
    for (t, &target) in ids[1..].iter().enumerate() {
        let row = &data[t * v..(t + 1) * v];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        total += -((row[target] - max).exp() / z).log2();
    }
    total / inputs.len() as f64
}

fn protocol_suite() -> Verdict {
    let text = synthetic_text(21, 1200);
    let vocab = Vocabulary::from_text(&text);
    let ids = vocab.encode(&text[..401]);
    let model = small_model(vocab.size());

    let oracle = whole_sequence_bpc(&model, &ids);
    let chunked = evaluate(&model, &ids, 100).expect("evaluate").bpc;
    let oracle_ok = (oracle - chunked).abs() <= ORACLE_TOLERANCE;

    let mut spread = 0.0f64;
    for chunk in [1, 7, 64, 399, 400, 1000] {
        let b = evaluate(&model, &ids, chunk).expect("evaluate").bpc;
        spread = spread.max((b - chunked).abs());
    }
    let chunk_ok = spread <= CHUNK_TOLERANCE;

    let mut uniform = small_model(vocab.size());
    for name in ["softmax.W", "softmax.b"] {
        uniform.params.by_name_mut(name).expect("softmax").value.fill(0.0);
    }
    let log2v = (vocab.size() as f64).log2();
    let uniform_bpc = evaluate(&uniform, &ids, 100).expect("evaluate").bpc;
    let uniform_ok = (uniform_bpc - log2v).abs() <= UNIFORM_TOLERANCE;

    // scripted validation losses
    let losses = [3.0, 2.5, 2.6, 2.4, 2.45, 2.41, 2.5, 2.42];
    let mut adam = Adam::new(&ParamSet::<f64>::new(), 0.002);
    let mut schedule = Schedule::new(true, 4, 50.0);
    let got: Vec<Decision> = losses.iter().map(|&l| schedule.end_of_epoch(l, &mut adam)).collect();
    let lrs: Vec<f64> = std::iter::successors(Some(0.002), |lr| Some(lr / 50.0)).take(5).collect();
    let expected_kinds = ["improved", "improved", "divide", "improved", "divide", "divide", "divide", "stop"];
    let mut schedule_ok = got.len() == expected_kinds.len();
    let mut division = 0;
    for (d, kind) in got.iter().zip(expected_kinds) {
        schedule_ok &= match (d, kind) {
            (Decision::Improved, "improved") => true,
            (Decision::DividedLr { from, to }, "divide") => {
                division += 1;
                *from == lrs[division - 1] && *to == lrs[division]
            }
            (Decision::Stop { .. }, "stop") => true,
            _ => false,
        };
    }
    schedule_ok &= division == 4;

    Verdict::new(
        oracle_ok && chunk_ok && uniform_ok && schedule_ok,
        format!(
            "oracle diff {:.2e} (<= {ORACLE_TOLERANCE:e}), chunk spread {spread:.2e} (<= {CHUNK_TOLERANCE:e}), uniform {uniform_bpc:.7} vs log2 V {log2v:.7}, lr path /50 x4 then stop {schedule_ok}",
            (oracle - chunked).abs()
        ),
    )
}

fn desk_training(out: &Path) -> (Verdict, Option<RunSummary>) {
    let start = Instant::now();
    let hm_config = desk_config("04-", out);
    let lstm_config = desk_config("10-", out);
    let same_protocol = {
        let mut a = hm_config.clone();
        a.model.arch = Arch::Lstm;
        a.name.clone_from(&lstm_config.name);
        a.effective.clone_from(&lstm_config.effective);
        a == lstm_config
    };
    let vocab_size = run::load_data(&hm_config).expect("desk corpus").1.size();
    let (hm, lstm) = match (train_quiet(&hm_config), train_quiet(&lstm_config)) {
        (Ok(a), Ok(b)) => (a, b),
        (a, b) => {
            return (
                Verdict::new(false, format!("training failed: {:?} / {:?}", a.err(), b.err())),
                None,
            )
        }
    };
    let elapsed = start.elapsed();
    let ceiling = (vocab_size as f64).log2() - DESK_MARGIN_BELOW_UNIFORM;
    let (hb, lb) = (hm.best_valid_bpc.unwrap_or(f64::NAN), lstm.best_valid_bpc.unwrap_or(f64::NAN));
    let below = hb < ceiling;
    let close = hb <= lb + DESK_BASELINE_SLACK;
    let epochs_ok = hm.epochs <= DESK_MAX_EPOCHS && lstm.epochs <= DESK_MAX_EPOCHS;
    (
        Verdict::new(
            below && close && epochs_ok && same_protocol && elapsed < DESK_TIME_TARGET,
            format!(
                "HMLSTM valid {hb:.4} bpc, LSTM valid {lb:.4} bpc, (a) < log2 V - 0.5 = {ceiling:.4}: {below}, (b) within {DESK_BASELINE_SLACK} of LSTM: {close}, epochs {}/{}, {:.1} min",
                hm.epochs,
                lstm.epochs,
                elapsed.as_secs_f64() / 60.0
            ),
        ),
        Some(hm),
    )
}

fn divergence_guard(out: &Path) -> Verdict {
    // the steep-slope row at desk scale must finish or abort cleanly
    let config = desk_config("07-", out);
    let desk = match std::panic::catch_unwind(|| train_quiet(&config)) {
        Ok(Ok(s)) => s,
        Ok(Err(e)) => return Verdict::new(false, format!("alpha=1.0 run returned an error: {e}")),
        Err(_) => return Verdict::new(false, "alpha=1.0 run panicked"),
    };
    let dir = run::run_dir(&config);
    let desk_ok = match desk.diverged_at {
        Some(_) => dir.join("diverged.hmlb").exists(),
        None => desk.best_valid_bpc.is_some_and(f64::is_finite),
    };

    // forced non-finite loss
    let (splits, vocab) = small_corpus();
    let tmp = tempfile::tempdir().expect("tempdir");
    let mut config = small_train_config();
    config.checkpoint_dir = Some(tmp.path().to_path_buf());
    let mut model = Model::<f32>::new(ModelConfig {
        vocab_size: vocab.size(),
        units: 16,
        embed_dim: 8,
        output_dim: 16,
        ..ModelConfig::default()
    })
    .expect("model");
    model.params.by_name_mut("layer2.U").expect("U").value.set(0, 0, f32::INFINITY);
    let mut trainer = Trainer::new(model, vocab, config).expect("trainer");
    let forced_ok = match trainer.run(&splits, |_| {}) {
        Ok(Outcome::Diverged(record)) => record.checkpoint.as_ref().is_some_and(|p| {
            Snapshot::<f32>::load(p).is_ok_and(|s| s.history.divergence.as_ref() == Some(&record) && s.progress.finished)
        }),
        _ => false,
    };
    Verdict::new(
        desk_ok && forced_ok,
        format!(
            "alpha=1.0 desk run: {} after {} iterations (diverged at {:?}, best valid {}), forced non-finite loss aborts with checkpoint and record: {forced_ok}",
            desk.outcome,
            desk.iterations,
            desk.diverged_at,
            desk.best_valid_bpc.map_or("-".into(), |b| format!("{b:.4}"))
        ),
    )
}

fn statistics() -> Verdict {
    let text: Vec<char> = "the cat sat on a mat".chars().collect();
    let z1: Vec<u8> = text.iter().map(|&c| u8::from(c == ' ')).collect();
    let mut z2 = vec![0u8; text.len()];
    z2[7] = 1;
    z2[14] = 1;
    let record = SegmentationRecord::new(text, z1.clone(), z2).expect("record");
    // 5 spaces and 2 marks in 20 characters
    let hand = record.freq1 == 5.0 / 20.0 && record.freq2 == 2.0 / 20.0 && record.z_ratio == ZRatio::Value(2.5);
    let freq_ok = analysis::frequency(&[1, 0, 0, 1, 0, 0, 0, 1]) == 3.0 / 8.0 && analysis::frequency(&z1) == 0.25;
    let undefined = ZRatio::of(0.3, 0.0) == ZRatio::Undefined && ZRatio::of(0.0, 0.2) == ZRatio::Value(0.0);
    let table = ZRatio::of(0.42, 0.09).to_string();
    Verdict::new(
        hand && freq_ok && undefined && table == "4.67",
        format!("hand counts {hand}, frequencies {freq_ok}, undefined cases {undefined}, 0.42/0.09 -> {table}"),
    )
}

fn ablation_conformance() -> Verdict {
    let mut problems = Vec::new();
    let mut instantiated = 0;
    for (scale, base) in [("desk", DESK_BASE), ("ptb", FULL_SCALE_BASE)] {
        let dir = repo_root().join("configs/ablation").join(scale);
        let files = run::ablation_configs(&dir).unwrap_or_default();
        if files.len() != ABLATION_GRID.len() {
            problems.push(format!("{scale}: {} config files", files.len()));
        }
        for row in &ABLATION_GRID {
            let path = dir.join(format!("{}.conf", row.slug()));
            if std::fs::read_to_string(&path).ok().as_deref() != Some(row.config_text(base).as_str()) {
                problems.push(format!("{} differs from the grid", path.display()));
                continue;
            }
            let mut config = match parse_config(&path) {
                Ok(c) => c,
                Err(e) => {
                    problems.push(e.to_string());
                    continue;
                }
            };
            config.model.vocab_size = 50;
            let model = match Model::<f32>::new(config.model.clone()) {
                Ok(m) => m,
                Err(e) => {
                    problems.push(format!("{}: {e}", row.label));
                    continue;
                }
            };
            instantiated += 1;
            let names: Vec<&str> = model.params.names().collect();
            let has = |suffix: &str| names.iter().any(|n| n.ends_with(suffix));
            let flags = config.model.flags;
            let expect_v = config.model.arch != Arch::Lstm && !flags.no_top_down;
            let expect_gates = config.model.output_head == OutputHead::Gated;
            let expect_gains = flags.use_layer_norm;
            if has(".V") != expect_v {
                problems.push(format!("{}: top-down weights present = {}", row.label, has(".V")));
            }
            if has("head.gate_w") != expect_gates {
                problems.push(format!("{}: gate weights present = {}", row.label, has("head.gate_w")));
            }
            if has(".gain") != expect_gains {
                problems.push(format!("{}: LN gains present = {}", row.label, has(".gain")));
            }
        }
    }
    Verdict::new(
        problems.is_empty(),
        format!("{instantiated}/24 configs instantiated (desk and full scale), problems: {problems:?}"),
    )
}

fn small_corpus() -> (CorpusSplits, Vocabulary) {
    split_text(&synthetic_text(7, 6000), CorpusMode::Raw).expect("corpus")
}

fn small_train_config() -> TrainConfig {
    TrainConfig {
        batch: 4,
        seq_len: 20,
        lr: 0.01,
        max_epochs: 20,
        valid_limit: Some(200),
        seed: 9,
        ..TrainConfig::default()
    }
}

fn persistence() -> Verdict {
    let (splits, vocab) = small_corpus();
    let make = |max: u64| {
        let model = Model::<f64>::new(ModelConfig {
            vocab_size: vocab.size(),
            units: 16,
            embed_dim: 8,
            output_dim: 16,
            seed: 5,
            ..ModelConfig::default()
        })
        .expect("model");
        Trainer::new(model, vocab.clone(), TrainConfig { max_iterations: Some(max), ..small_train_config() }).expect("trainer")
    };
    let tmp = tempfile::tempdir().expect("tempdir");

    let mut whole = make(RESUME_ITERATIONS);
    whole.run(&splits, |_| {}).expect("uninterrupted run");

    let mut first = make(37);
    first.run(&splits, |_| {}).expect("first half");
    let (a, b) = (tmp.path().join("a.hmlb"), tmp.path().join("b.hmlb"));
    first.snapshot().save(&a).expect("save");
    let loaded = Snapshot::<f64>::load(&a).expect("load");
    loaded.save(&b).expect("resave");
    let identical = std::fs::read(&a).ok() == std::fs::read(&b).ok();

    let mut resumed = Trainer::from_snapshot(loaded);
    resumed.config.max_iterations = Some(RESUME_ITERATIONS);
    resumed.run(&splits, |_| {}).expect("resumed run");
    let params_match = resumed
        .model
        .params
        .iter()
        .zip(whole.model.params.iter())
        .all(|(x, y)| bits(&x.value) == bits(&y.value));
    let twin = resumed.history == whole.history && params_match && resumed.progress == whole.progress;
    Verdict::new(
        identical && twin && whole.progress.iteration == RESUME_ITERATIONS,
        format!(
            "save-load-save byte-identical {identical}, float64 run resumed at 37 bit-matches the uninterrupted {RESUME_ITERATIONS}-iteration twin {twin} ({} epochs crossed)",
            whole.history.epochs.len()
        ),
    )
}

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn main() {
    let out = tempfile::tempdir().expect("tempdir");
    let mut verdicts: Vec<(&str, Verdict)> = Vec::new();
    let mut report = |name: &'static str, v: Verdict| {
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        verdicts.push((name, v));
    };
    report("gradient suite", gradient_suite());
    report("semantics suite", semantics_suite());
    report("protocol suite", protocol_suite());
    report("statistics", statistics());
    report("ablation conformance", ablation_conformance());
    report("persistence", persistence());
    let (desk, _) = desk_training(out.path());
    report("desk training", desk);
    report("divergence guard", divergence_guard(out.path()));

    let failed = verdicts.iter().filter(|(_, v)| !v.pass).count();
    println!("acceptance: {} passed, {failed} failed", verdicts.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
