//! `key = value` run configuration with `#` comments.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{CorpusMode, CorpusSource};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::DType;
use crate::training::TrainConfig;

/// Where training text comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Single(PathBuf),
    Files { train: PathBuf, valid: PathBuf, test: PathBuf },
    /// Generated English-like text.
    Synthetic { chars: usize, seed: u64 },
}

impl DataSource {
    pub fn corpus_source(&self) -> Option<CorpusSource> {
        match self {
            DataSource::Single(p) => Some(CorpusSource::Single(p.clone())),
            DataSource::Files { train, valid, test } => Some(CorpusSource::Files {
                train: train.clone(),
                valid: valid.clone(),
                test: test.clone(),
            }),
            DataSource::Synthetic { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Option<DataSource>,
    pub corpus_mode: CorpusMode,
    pub dtype: DType,
    pub out_dir: PathBuf,
    /// `(key, value, explicit)` for every key, in table order.
    pub effective: Vec<(String, String, bool)>,
}

struct Field {
    key: &'static str,
    default: &'static str,
}

/// Every accepted key with its default; `-` means no default.
const FIELDS: &[Field] = &[
    Field { key: "name", default: "run" },
    Field { key: "arch", default: "hmlstm" },
    Field { key: "layers", default: "3" },
    Field { key: "units", default: "512" },
    Field { key: "embed_dim", default: "128" },
    Field { key: "output_dim", default: "512" },
    Field { key: "output_head", default: "gated" },
    Field { key: "layer_norm", default: "true" },
    Field { key: "ln_on_embeddings", default: "-" },
    Field { key: "copy_last", default: "false" },
    Field { key: "no_top_down", default: "false" },
    Field { key: "slope_alpha", default: "0.5" },
    Field { key: "ln_eps", default: "0.00001" },
    Field { key: "seed", default: "1" },
    Field { key: "data", default: "-" },
    Field { key: "train_file", default: "-" },
    Field { key: "valid_file", default: "-" },
    Field { key: "test_file", default: "-" },
    Field { key: "synthetic_chars", default: "-" },
    Field { key: "synthetic_seed", default: "7" },
    Field { key: "corpus_mode", default: "raw" },
    Field { key: "batch", default: "64" },
    Field { key: "seq_len", default: "100" },
    Field { key: "lr", default: "0.002" },
    Field { key: "clip", default: "1.0" },
    Field { key: "l2", default: "0.0005" },
    Field { key: "max_epochs", default: "50" },
    Field { key: "max_iterations", default: "-" },
    Field { key: "schedule", default: "true" },
    Field { key: "patience", default: "4" },
    Field { key: "lr_divisor", default: "50" },
    Field { key: "carry_state", default: "true" },
    Field { key: "eval_chunk", default: "100" },
    Field { key: "valid_limit", default: "-" },
    Field { key: "dtype", default: "f32" },
    Field { key: "out_dir", default: "runs" },
];

/// Raw key/value pairs with the line each came from (0 for overrides).
#[derive(Clone, Debug, Default)]
pub struct ConfigText {
    pub origin: String,
    pub entries: Vec<(String, String, usize)>,
}

impl ConfigText {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut out = ConfigText {
            origin: origin.to_string(),
            entries: Vec::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(out.error(i + 1, format!("expected `key = value`, got {line:?}")));
            };
            out.set(k.trim(), v.trim(), i + 1)?;
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn error(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::ConfigLine {
            path: self.origin.clone(),
            line,
            msg: msg.into(),
        }
    }

    /// Sets `key`, replacing an earlier value; `line` 0 marks an override.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        if !FIELDS.iter().any(|f| f.key == key) {
            return Err(self.error(line, format!("unknown key {key:?}")));
        }
        if value.is_empty() {
            return Err(self.error(line, format!("{key} has no value")));
        }
        self.entries.retain(|(k, _, _)| k != key);
        self.entries.push((key.to_string(), value.to_string(), line));
        Ok(())
    }

    /// Applies `key=value` overrides, e.g. from the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else {
                return Err(Error::Config(format!("override {o:?} is not key=value")));
            };
            self.set(k.trim(), v.trim(), 0)?;
        }
        Ok(())
    }

    fn lookup(&self, key: &str) -> Option<(&str, usize)> {
        self.entries.iter().find(|(k, _, _)| k == key).map(|(_, v, l)| (v.as_str(), *l))
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let mut r = Resolver { text: self, effective: Vec::new() };
        let layer_norm: bool = r.get("layer_norm")?;
        let mut model = ModelConfig {
            arch: r.get("arch")?,
            layers: r.get("layers")?,
            units: r.get("units")?,
            embed_dim: r.get("embed_dim")?,
            output_dim: r.get("output_dim")?,
            vocab_size: 1,
            output_head: r.get("output_head")?,
            ln_on_embeddings: r.opt("ln_on_embeddings")?.unwrap_or(layer_norm),
            seed: r.get("seed")?,
            ..ModelConfig::default()
        };
        model.flags.use_layer_norm = layer_norm;
        model.flags.copy_last = r.get("copy_last")?;
        model.flags.no_top_down = r.get("no_top_down")?;
        model.flags.slope_alpha = r.checked("slope_alpha", |v: &f64| *v > 0.0 && v.is_finite(), "must be > 0")?;
        model.flags.ln_eps = r.checked("ln_eps", |v: &f64| *v > 0.0 && v.is_finite(), "must be > 0")?;

        let data = match (
            r.opt::<PathBuf>("data")?,
            r.opt::<PathBuf>("train_file")?,
            r.opt::<PathBuf>("valid_file")?,
            r.opt::<PathBuf>("test_file")?,
            r.opt::<usize>("synthetic_chars")?,
        ) {
            (None, None, None, None, None) => None,
            (Some(p), None, None, None, None) => Some(DataSource::Single(p)),
            (None, Some(train), Some(valid), Some(test), None) => Some(DataSource::Files { train, valid, test }),
            (None, None, None, None, Some(chars)) => Some(DataSource::Synthetic {
                chars,
                seed: r.get("synthetic_seed")?,
            }),
            _ => {
                return Err(Error::Config(format!(
                    "{}: give exactly one of `data`, all of `train_file`/`valid_file`/`test_file`, or `synthetic_chars`",
                    self.origin
                )))
            }
        };
        let positive = |v: &usize| *v > 0;
        let train = TrainConfig {
            batch: r.checked("batch", positive, "must be > 0")?,
            seq_len: r.checked("seq_len", positive, "must be > 0")?,
            lr: r.checked("lr", |v: &f64| *v > 0.0, "must be > 0")?,
            clip: r.checked("clip", |v: &f64| *v > 0.0, "must be > 0")?,
            l2: r.checked("l2", |v: &f64| *v >= 0.0, "must be >= 0")?,
            max_epochs: r.get("max_epochs")?,
            max_iterations: r.opt("max_iterations")?,
            schedule: r.get("schedule")?,
            patience: r.get("patience")?,
            lr_divisor: r.checked("lr_divisor", |v: &f64| *v > 0.0, "must be > 0")?,
            carry_state: r.get("carry_state")?,
            eval_chunk: r.checked("eval_chunk", positive, "must be > 0")?,
            valid_limit: r.opt("valid_limit")?,
            seed: model.seed,
            checkpoint_dir: None,
        };
        let dtype = match r.get::<String>("dtype")?.as_str() {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => return Err(r.fail("dtype", format!("expected f32 or f64, got {other:?}"))),
        };
        let mut run = RunConfig {
            name: r.get("name")?,
            model,
            train,
            data,
            corpus_mode: r.get("corpus_mode")?,
            dtype,
            out_dir: r.get("out_dir")?,
            effective: Vec::new(),
        };
        run.train.checkpoint_dir = Some(run.out_dir.clone());
        run.effective = r.effective;
        Ok(run)
    }
}

struct Resolver<'a> {
    text: &'a ConfigText,
    effective: Vec<(String, String, bool)>,
}

impl Resolver<'_> {
    fn fail(&self, key: &str, msg: String) -> Error {
        match self.text.lookup(key) {
            Some((_, line)) if line > 0 => self.text.error(line, format!("{key}: {msg}")),
            _ => Error::Config(format!("{key}: {msg}")),
        }
    }

    fn opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let field = FIELDS.iter().find(|f| f.key == key).expect("known key");
        let (raw, explicit) = match self.text.lookup(key) {
            Some((v, _)) => (v.to_string(), true),
            None if field.default == "-" => {
                self.effective.push((key.to_string(), "-".into(), false));
                return Ok(None);
            }
            None => (field.default.to_string(), false),
        };
        let value = raw.parse::<T>().map_err(|e| self.fail(key, format!("cannot parse {raw:?}: {e}")))?;
        self.effective.push((key.to_string(), raw, explicit));
        Ok(Some(value))
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.opt(key)?.ok_or_else(|| Error::Config(format!("missing required key {key}")))
    }

    fn checked<T: FromStr>(&mut self, key: &str, ok: impl Fn(&T) -> bool, msg: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.get(key)?;
        if !ok(&v) {
            let raw = self.effective.last().map(|e| e.1.clone()).unwrap_or_default();
            return Err(self.fail(key, format!("{raw} {msg}")));
        }
        Ok(v)
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    ConfigText::read(path)?.resolve()
}

impl RunConfig {
    /// `key=value` lines, defaults marked, in table order.
    pub fn log_lines(&self) -> Vec<String> {
        self.effective
            .iter()
            .map(|(k, v, explicit)| {
                if *explicit {
                    format!("config {k}={v}")
                } else {
                    format!("config {k}={v} default=1")
                }
            })
            .collect()
    }
}
