//! Command-line driver: `train`, `eval`, `segment`, `gradcheck`, `ablate`.
//!
//! Exit status 0 on success, 1 when a run fails, 2 for usage and
//! configuration errors. Log verbosity follows `HMLSTM_LOG` (default `info`).

pub mod ablation;
pub mod config;
pub mod run;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::analysis::SegmentationFormat;
use crate::error::{Error, Result};
use ablation::{ABLATION_GRID, DESK_BASE, FULL_SCALE_BASE};
use config::ConfigText;
use run::RunLog;

#[derive(Parser, Debug)]
#[command(name = "hmlstm", version, about = "Hierarchical multiscale LSTM laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output root; overrides `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// `key=value` settings applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print `bpc=<value>` of a checkpoint on a text file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Evaluation chunk length; state carries across chunks.
        #[arg(long, default_value_t = crate::analysis::EVAL_CHUNK)]
        chunk: usize,
    },
    /// Write per-character boundaries of a text as TSV or PGM.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Tsv)]
        format: Format,
    },
    /// Compare analytic and finite-difference gradients of every primitive,
    /// cell variant and output head.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train every `.conf` in a directory and print a summary table.
    Ablate {
        dir: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Runs trained at once.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Write the twelve-row grid into `dir` instead of training.
        #[arg(long, value_enum)]
        write_grid: Option<Scale>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Tsv,
    Pgm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Scale {
    /// 128 units on a generated 500K-character corpus.
    Desk,
    /// 512 units on character-level Penn Treebank files under `data/`.
    Ptb,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(status) => status,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::ConfigLine { .. } => 2,
                _ => 1,
            }
        }
    }
}

pub fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Train { config, out, resume, overrides } => {
            let mut text = ConfigText::read(&config)?;
            text.apply_overrides(&overrides)?;
            if let Some(out) = out {
                text.set("out_dir", &out.display().to_string(), 0)?;
            }
            let run = text.resolve()?;
            let mut log = RunLog::new(Some(&run::run_dir(&run).join("run.log")), true)?;
            let summary = run::train(&run, resume.as_deref(), &mut log)?;
            Ok(if summary.diverged_at.is_some() { 1 } else { 0 })
        }
        Command::Eval { checkpoint, data, chunk } => {
            let bpc = run::eval(&checkpoint, &data, chunk)?;
            println!("bpc={bpc:.4}");
            Ok(0)
        }
        Command::Segment { checkpoint, text, out, format } => {
            let format = match format {
                Format::Tsv => SegmentationFormat::Tsv,
                Format::Pgm => SegmentationFormat::Pgm,
            };
            for line in run::segment(&checkpoint, &text, &out, format)? {
                println!("{line}");
            }
            Ok(0)
        }
        Command::Gradcheck { seed } => {
            let (lines, ok) = run::gradcheck_report(seed)?;
            for line in lines {
                println!("{line}");
            }
            Ok(if ok { 0 } else { 1 })
        }
        Command::Ablate { dir, overrides, jobs, write_grid: Some(scale) } => {
            if !overrides.is_empty() || jobs != 1 {
                return Err(Error::Config("--write-grid takes no other options".into()));
            }
            let base = match scale {
                Scale::Desk => DESK_BASE,
                Scale::Ptb => FULL_SCALE_BASE,
            };
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for row in &ABLATION_GRID {
                let path = dir.join(format!("{}.conf", row.slug()));
                std::fs::write(&path, row.config_text(base)).map_err(|e| Error::io(&path, e))?;
                println!("wrote {}", path.display());
            }
            Ok(0)
        }
        Command::Ablate { dir, overrides, jobs, write_grid: None } => {
            let rows = run::ablate(&dir, &overrides, jobs)?;
            print!("{}", run::ablation_table(&rows));
            Ok(0)
        }
    }
}
