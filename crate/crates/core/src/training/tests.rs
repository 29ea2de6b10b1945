use super::*;
use crate::cells::CellFlags;
use crate::data::{split_text, synthetic_text, CorpusMode};
use crate::model::{Arch, ModelConfig, OutputHead};
use crate::numerics::Tensor;

fn corpus(len: usize) -> (CorpusSplits, Vocabulary) {
    split_text(&synthetic_text(7, len), CorpusMode::Raw).unwrap()
}

fn model_config(arch: Arch, vocab: usize) -> ModelConfig {
    ModelConfig {
        arch,
        layers: 3,
        units: 16,
        embed_dim: 8,
        output_dim: 16,
        vocab_size: vocab,
        flags: CellFlags::default(),
        output_head: OutputHead::Gated,
        ln_on_embeddings: true,
        seed: 5,
    }
}

fn train_config() -> TrainConfig {
    TrainConfig {
        batch: 4,
        seq_len: 20,
        lr: 0.01,
        max_epochs: 3,
        valid_limit: Some(200),
        seed: 9,
        ..TrainConfig::default()
    }
}

fn trainer<T: Real>(arch: Arch, vocab: &Vocabulary, config: TrainConfig) -> Trainer<T> {
    let model = Model::new(model_config(arch, vocab.size())).unwrap();
    Trainer::new(model, vocab.clone(), config).unwrap()
}

#[test]
fn penalty_values() {
    let mut ps = ParamSet::<f64>::new();
    ps.insert("w", ParamKind::Weight, Tensor::ones(&[2, 2])).unwrap();
    ps.insert("b", ParamKind::Bias, Tensor::ones(&[1, 2])).unwrap();
    ps.insert("g", ParamKind::Gain, Tensor::ones(&[1, 2])).unwrap();
    assert!((weight_penalty(&ps, 0.0005) - 0.002).abs() < 1e-15);
    assert_eq!(penalized(&ps), vec!["w"]);
}

#[test]
fn penalty_on_the_tape() {
    let (splits, vocab) = corpus(4000);
    let mut model = Model::<f64>::new(model_config(Arch::Hmlstm, vocab.size())).unwrap();
    let inputs = &splits.train[..40];
    let targets = time_major(&splits.train[1..41], 2);
    let eval = |model: &Model<f64>, l2: f64| {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = model.forward_sequence(&mut tape, &bound, inputs, 2, &model.initial_state(2)).unwrap();
        let (loss, ce) = loss_with_penalty(&mut tape, out.logits, &targets, &model.params, &bound, l2).unwrap();
        (tape.value(loss).item(), tape.value(ce).item())
    };
    let (loss, ce) = eval(&model, 0.0);
    assert_eq!(loss, ce);
    let (loss, ce) = eval(&model, 0.0005);
    assert!((loss - ce - weight_penalty(&model.params, 0.0005)).abs() < 1e-12);

    for p in model.params.iter_mut().filter(|p| p.kind == ParamKind::Weight && p.name != "embed.table") {
        p.value.fill(0.0);
    }
    model.params.by_name_mut("embed.table").unwrap().value.fill(0.0);
    let (loss, ce) = eval(&model, 0.0005);
    assert_eq!(loss, ce);
}

#[test]
fn penalty_skips_biases_and_gains() {
    let m = Model::<f64>::new(model_config(Arch::Hmlstm, 10)).unwrap();
    let names = penalized(&m.params);
    assert!(names.iter().all(|n| !n.ends_with(".b") && !n.ends_with(".bias") && !n.ends_with(".gain")));
    let others: Vec<&str> = m.params.names().filter(|n| !names.contains(n)).collect();
    assert!(others.iter().all(|n| n.ends_with(".b") || n.ends_with(".bias") || n.ends_with(".gain")), "{others:?}");
    assert!(names.contains(&"layer1.V") && names.contains(&"softmax.W") && names.contains(&"embed.table"));
}

#[test]
fn short_run_beats_uniform() {
    let (splits, vocab) = corpus(10_000);
    for arch in [Arch::Hmlstm, Arch::Lstm] {
        let mut t = trainer::<f32>(arch, &vocab, TrainConfig { max_iterations: Some(50), max_epochs: 100, ..train_config() });
        let outcome = t.run(&splits, |_| {}).unwrap();
        assert_eq!(outcome, Outcome::MaxIterations);
        let uniform = (vocab.size() as f64).ln();
        let tail: f64 = t.history.iterations[45..].iter().map(|r| r.loss).sum::<f64>() / 5.0;
        assert!(tail < uniform, "{arch:?}: {tail} vs {uniform}");
        assert_eq!(t.history.iterations.len(), 50);
    }
}

#[test]
fn full_epochs_record_history() {
    let (splits, vocab) = corpus(6000);
    let mut t = trainer::<f32>(Arch::Hmlstm, &vocab, TrainConfig { max_epochs: 2, ..train_config() });
    let mut epochs = 0;
    let outcome = t.run(&splits, |e| epochs += matches!(e, Event::Epoch(_)) as usize).unwrap();
    assert_eq!(outcome, Outcome::MaxEpochs);
    assert_eq!(epochs, 2);
    let e = &t.history.epochs[1];
    assert_eq!(e.z_freq.len(), 2);
    assert!(e.z_freq.iter().all(|f| (0.0..=1.0).contains(f)));
    assert!(e.valid_bpc.is_finite());
    let lrs: Vec<f64> = t.history.iterations.iter().map(|r| r.lr).collect();
    for w in lrs.windows(2) {
        assert!(w[1] == w[0] || w[1] == w[0] / 50.0);
    }
}

#[test]
fn runs_are_deterministic() {
    let (splits, vocab) = corpus(5000);
    let run = || {
        let mut t = trainer::<f64>(Arch::Hmrnn, &vocab, TrainConfig { max_iterations: Some(12), ..train_config() });
        t.run(&splits, |_| {}).unwrap();
        (t.history, t.model.params.checksum())
    };
    assert_eq!(run(), run());
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let (splits, vocab) = corpus(5000);
    let config = TrainConfig { max_iterations: Some(30), ..train_config() };
    let mut whole = trainer::<f64>(Arch::Hmlstm, &vocab, config.clone());
    whole.run(&splits, |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.hmlb");
    let mut first = trainer::<f64>(Arch::Hmlstm, &vocab, TrainConfig { max_iterations: Some(13), ..config });
    first.run(&splits, |_| {}).unwrap();
    first.snapshot().save(&path).unwrap();
    let mut resumed = Trainer::from_snapshot(Snapshot::<f64>::load(&path).unwrap());
    resumed.config.max_iterations = Some(30);
    resumed.run(&splits, |_| {}).unwrap();

    assert_eq!(resumed.history, whole.history);
    assert_eq!(resumed.model.params.checksum(), whole.model.params.checksum());
    for (a, b) in resumed.model.params.iter().zip(whole.model.params.iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let (splits, vocab) = corpus(5000);
    let mut t = trainer::<f32>(Arch::Hmlstm, &vocab, TrainConfig { max_iterations: Some(3), ..train_config() });
    t.run(&splits, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.hmlb"), dir.path().join("b.hmlb"));
    t.snapshot().save(&a).unwrap();
    let loaded = Snapshot::<f32>::load(&a).unwrap();
    loaded.save(&b).unwrap();
    assert!(std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap());
    assert_eq!(peek_dtype(&a).unwrap(), crate::numerics::DType::F32);
    assert!(Snapshot::<f64>::load(&a).is_err());
    assert_eq!(&std::fs::read(&a).unwrap()[..4], b"HMLB");
}

#[test]
fn corruption_is_located() {
    let (_, vocab) = corpus(3000);
    let t = trainer::<f64>(Arch::Lstm, &vocab, train_config());
    let bytes = t.snapshot().to_bytes().unwrap();
    let path = std::path::Path::new("mem.hmlb");

    let mut bad = bytes.clone();
    let last = bad.len() - 3;
    bad[last] ^= 0x40;
    let err = Snapshot::<f64>::from_bytes(&bad, path).unwrap_err().to_string();
    assert!(err.contains("checksum mismatch in tensor adam.v.softmax.b"), "{err}");

    let err = Snapshot::<f64>::from_bytes(&bytes[..bytes.len() - 5], path).unwrap_err().to_string();
    assert!(err.contains("truncated in tensor adam.v.softmax.b"), "{err}");

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Snapshot::<f64>::from_bytes(&bad, path).unwrap_err().to_string().contains("magic"));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(Snapshot::<f64>::from_bytes(&bad, path).unwrap_err().to_string().contains("version"));
    assert!(Snapshot::<f64>::from_bytes(&bytes[..20], path).unwrap_err().to_string().contains("metadata"));
    let mut long = bytes.clone();
    long.push(0);
    assert!(Snapshot::<f64>::from_bytes(&long, path).unwrap_err().to_string().contains("trailing"));
}

#[test]
fn divergence_aborts_with_checkpoint() {
    let (splits, vocab) = corpus(5000);
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig { checkpoint_dir: Some(dir.path().to_path_buf()), ..train_config() };
    let mut t = trainer::<f32>(Arch::Hmlstm, &vocab, config);
    t.model.params.by_name_mut("softmax.W").unwrap().value.set(0, 0, f32::NAN);
    let Outcome::Diverged(record) = t.run(&splits, |_| {}).unwrap() else {
        panic!("expected divergence");
    };
    assert_eq!(record.iteration, 0);
    assert_eq!(record.loss, "NaN");
    let path = record.checkpoint.clone().unwrap();
    let back = Snapshot::<f32>::load(&path).unwrap();
    assert_eq!(back.history.divergence, Some(record));
    assert!(back.progress.finished);
}

#[test]
fn gradients_stop_at_chunk_boundaries() {
    let (splits, vocab) = corpus(5000);
    let mut t = trainer::<f64>(Arch::Hmlstm, &vocab, train_config());
    let epoch = t.epoch_layout(&splits.train, 0).unwrap();
    let (c0, c1) = (&epoch.chunks[0], &epoch.chunks[1]);
    let zero = t.model.initial_state(4);
    let (_, carried) = t.chunk_gradients(c0, &zero).unwrap();

    // the same chunk pair on one tape, state detached between them
    let mut tape = Tape::new();
    let bound = t.model.bind(&mut tape);
    let mut perturbed = c0.inputs.clone();
    perturbed.iter_mut().for_each(|i| *i = (*i + 1) % vocab.size());
    let first = t.model.forward_sequence(&mut tape, &bound, &perturbed, 4, &zero).unwrap();
    let _ = first;
    let second = t.model.forward_sequence(&mut tape, &bound, &c1.inputs, 4, &carried).unwrap();
    let targets = time_major(&c1.targets, 4);
    let (loss, _) = loss_with_penalty(&mut tape, second.logits, &targets, &t.model.params, &bound, t.config.l2).unwrap();
    let mut joint = t.model.params.clone();
    joint.zero_grad();
    tape.backward(loss, &mut joint).unwrap();

    t.chunk_gradients(c1, &carried).unwrap();
    for (a, b) in joint.iter().zip(t.model.params.iter()) {
        assert_eq!(a.grad, b.grad, "{}", a.name);
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { l2: -1.0, ..TrainConfig::default() }.validate().is_err());
    let d = TrainConfig::default();
    assert_eq!((d.seq_len, d.batch, d.lr, d.clip, d.l2), (100, 64, 0.002, 1.0, 0.0005));
    let (_, vocab) = corpus(3000);
    let model = Model::<f64>::new(model_config(Arch::Lstm, vocab.size() + 1)).unwrap();
    assert!(Trainer::new(model, vocab, train_config()).is_err());
}
