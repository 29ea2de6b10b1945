//! Times training steps and validation at desk scale.
//!
//! cargo run --release -p hmlstm --example throughput -- [arch] [steps]

use std::time::Instant;

use hmlstm::data::{split_text, synthetic_text, CorpusMode};
use hmlstm::model::{Arch, Model, ModelConfig};
use hmlstm::training::{TrainConfig, Trainer};

fn main() -> hmlstm::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arch: Arch = args.get(1).map_or(Ok(Arch::Hmlstm), |a| a.parse()).map_err(hmlstm::Error::Config)?;
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let (splits, vocab) = split_text(&synthetic_text(1, 200_000), CorpusMode::Raw)?;
    let config = ModelConfig {
        arch,
        units: 128,
        embed_dim: 64,
        output_dim: 128,
        vocab_size: vocab.size(),
        ..ModelConfig::default()
    };
    let train = TrainConfig { batch: 32, seq_len: 100, ..TrainConfig::default() };
    let mut t = Trainer::new(Model::<f32>::new(config)?, vocab, train)?;
    let epoch = t.epoch_layout(&splits.train, 0)?;
    let start = Instant::now();
    for chunk in epoch.chunks.iter().take(steps) {
        let r = t.train_step(chunk)?;
        if t.adam.step % 10 == 0 { println!("step={} loss={:.4} grad_norm={:.3e}", t.adam.step, r.cross_entropy, r.grad_norm); }
    }
    println!("step_seconds={:.3}", start.elapsed().as_secs_f64() / steps as f64);
    let start = Instant::now();
    let eval = hmlstm::analysis::evaluate(&t.model, &splits.valid[..2000], 100)?;
    println!("bpc={:.4} eval_seconds_per_1k={:.3}", eval.bpc, start.elapsed().as_secs_f64() / 2.0);
    Ok(())
}
