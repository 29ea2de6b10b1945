//! Character corpora: vocabulary, train/valid/test splits and epoch
//! batching into contiguous lanes.

mod synthetic;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synthetic::synthetic_text;

/// Characters sorted by codepoint, plus one unknown id after them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<char>", into = "Vec<char>")]
pub struct Vocabulary {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

/// Printed in place of the unknown id.
pub const UNKNOWN_CHAR: char = '\u{FFFD}';

impl Vocabulary {
    pub fn from_text(text: &str) -> Self {
        let mut chars: Vec<char> = text.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        Self::from_sorted(chars)
    }

    fn from_sorted(chars: Vec<char>) -> Self {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Vocabulary { chars, index }
    }

    /// Number of ids, including the unknown id.
    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn unk(&self) -> usize {
        self.chars.len()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(self.chars.len())
    }

    pub fn char(&self, id: usize) -> char {
        self.chars.get(id).copied().unwrap_or(UNKNOWN_CHAR)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id(c)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.char(i)).collect()
    }
}

impl TryFrom<Vec<char>> for Vocabulary {
    type Error = String;

    fn try_from(chars: Vec<char>) -> Result<Self, String> {
        if chars.windows(2).any(|w| w[0] >= w[1]) {
            return Err("vocabulary characters must be strictly increasing".into());
        }
        Ok(Self::from_sorted(chars))
    }
}

impl From<Vocabulary> for Vec<char> {
    fn from(v: Vocabulary) -> Self {
        v.chars
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusMode {
    /// Pre-tokenized character-level Penn Treebank text, used as is.
    PtbChar,
    /// Lowercase `a`–`z` and space only; exact 90M/5M/5M split when the
    /// file holds at least 100M characters.
    Text8,
    Raw,
}

impl std::fmt::Display for CorpusMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CorpusMode::PtbChar => "ptb_char",
            CorpusMode::Text8 => "text8",
            CorpusMode::Raw => "raw",
        })
    }
}

impl std::str::FromStr for CorpusMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ptb_char" => Ok(CorpusMode::PtbChar),
            "text8" => Ok(CorpusMode::Text8),
            "raw" => Ok(CorpusMode::Raw),
            _ => Err(format!("unknown corpus mode {s:?} (expected ptb_char, text8 or raw)")),
        }
    }
}

#[derive(Clone, Debug)]
pub enum CorpusSource {
    /// One file cut into train/valid/test.
    Single(PathBuf),
    Files { train: PathBuf, valid: PathBuf, test: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    /// Mode actually applied (text8 falls back to raw on foreign characters).
    pub mode: CorpusMode,
}

const TEXT8_TRAIN: usize = 90_000_000;
const TEXT8_HELD_OUT: usize = 5_000_000;

fn read(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.is_empty() {
        return Err(Error::Data(format!("{} is empty", path.display())));
    }
    Ok(text)
}

fn is_text8(text: &str) -> bool {
    text.chars().all(|c| c == ' ' || c.is_ascii_lowercase())
}

/// `(train, valid)` lengths of a single-file split. Text8 files of full
/// size use the exact counts, anything else 90/5/5 of its length.
pub fn split_sizes(len: usize, mode: CorpusMode) -> (usize, usize) {
    if mode == CorpusMode::Text8 && len >= TEXT8_TRAIN + 2 * TEXT8_HELD_OUT {
        (TEXT8_TRAIN, TEXT8_HELD_OUT)
    } else {
        (len * 90 / 100, len * 5 / 100)
    }
}

/// Splits and encodes in-memory text. The vocabulary comes from the
/// training part only.
pub fn split_text(text: &str, mode: CorpusMode) -> Result<(CorpusSplits, Vocabulary)> {
    let chars: Vec<char> = text.chars().collect();
    let mode = effective_mode(text, mode);
    let (n_train, n_valid) = split_sizes(chars.len(), mode);
    if n_train == 0 || n_valid == 0 || chars.len() == n_train + n_valid {
        return Err(Error::Data(format!("{} characters are too few to split 90/5/5", chars.len())));
    }
    let train: String = chars[..n_train].iter().collect();
    let valid: String = chars[n_train..n_train + n_valid].iter().collect();
    let test: String = chars[n_train + n_valid..(n_train + 2 * n_valid).min(chars.len())].iter().collect();
    Ok(encode_splits(&train, &valid, &test, mode))
}

fn effective_mode(text: &str, mode: CorpusMode) -> CorpusMode {
    if mode == CorpusMode::Text8 && !is_text8(text) {
        log::warn!("text8 mode expects only a-z and space; falling back to raw");
        return CorpusMode::Raw;
    }
    mode
}

fn encode_splits(train: &str, valid: &str, test: &str, mode: CorpusMode) -> (CorpusSplits, Vocabulary) {
    let vocab = Vocabulary::from_text(train);
    let splits = CorpusSplits {
        train: vocab.encode(train),
        valid: vocab.encode(valid),
        test: vocab.encode(test),
        mode,
    };
    (splits, vocab)
}

pub fn load_corpus(source: &CorpusSource, mode: CorpusMode) -> Result<(CorpusSplits, Vocabulary)> {
    match source {
        CorpusSource::Single(path) => split_text(&read(path)?, mode),
        CorpusSource::Files { train, valid, test } => {
            let (train, valid, test) = (read(train)?, read(valid)?, read(test)?);
            let all_text8 = [&train, &valid, &test].iter().all(|t| is_text8(t));
            let mode = if mode == CorpusMode::Text8 && !all_text8 {
                effective_mode("\u{0}", mode)
            } else {
                mode
            };
            Ok(encode_splits(&train, &valid, &test, mode))
        }
    }
}

/// One truncated-BPTT chunk; both fields are `[batch, seq_len]` batch-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Epoch {
    pub offset: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub chunks: Vec<Chunk>,
}

impl Epoch {
    pub fn characters(&self) -> usize {
        self.chunks.len() * self.batch * self.seq_len
    }
}

/// Cuts `split` into `batch` contiguous lanes starting at a random offset
/// and truncated to a multiple of `batch·seq_len`; chunk `k` holds the
/// `k`-th window of every lane, so state carries across chunks.
pub fn make_epoch<R: Rng>(split: &[usize], batch: usize, seq_len: usize, rng: &mut R) -> Result<Epoch> {
    if batch == 0 || seq_len == 0 {
        return Err(Error::invalid("make_epoch", "batch and seq_len must be > 0"));
    }
    let window = batch * seq_len;
    if split.len() <= window {
        return Err(Error::Data(format!(
            "split of {} characters is too short for batch {batch} x seq_len {seq_len}; need at least {}",
            split.len(),
            window + 1
        )));
    }
    // the last character is only ever a target
    let span = split.len() - 1;
    let offset = rng.random_range(0..=span % window);
    let lane = (span - offset) / window * seq_len;
    let chunks = (0..lane / seq_len)
        .map(|k| {
            let mut inputs = Vec::with_capacity(window);
            let mut targets = Vec::with_capacity(window);
            for b in 0..batch {
                let start = offset + b * lane + k * seq_len;
                inputs.extend_from_slice(&split[start..start + seq_len]);
                targets.extend_from_slice(&split[start + 1..start + seq_len + 1]);
            }
            Chunk { inputs, targets }
        })
        .collect();
    Ok(Epoch { offset, batch, seq_len, chunks })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn vocab_sorted_with_unknown_last() {
        let v = Vocabulary::from_text("abab");
        assert_eq!(v.size(), 3);
        assert_eq!(v.encode("ba"), vec![1, 0]);
        assert_eq!(v.id('z'), 2);
        assert_eq!(v.decode(&[0, 2]), format!("a{UNKNOWN_CHAR}"));
        let v = Vocabulary::from_text("zy a");
        assert_eq!(v.chars(), &[' ', 'a', 'y', 'z']);
    }

    #[test]
    fn vocab_serde_round_trip() {
        let v = Vocabulary::from_text("hello, world");
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocabulary>(&json).unwrap(), v);
        assert!(serde_json::from_str::<Vocabulary>("[\"b\",\"a\"]").is_err());
    }

    #[test]
    fn proportional_split() {
        let text: String = (0..1000).map(|i| if i % 5 == 0 { ' ' } else { 'a' }).collect();
        let (s, _) = split_text(&text, CorpusMode::Text8).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (900, 50, 50));
        assert_eq!(s.mode, CorpusMode::Text8);
        assert_eq!(split_sizes(100_000_000, CorpusMode::Text8), (90_000_000, 5_000_000));
        assert_eq!(split_sizes(100_000_000, CorpusMode::Raw), (90_000_000, 5_000_000));
        assert_eq!(split_sizes(200_000_000, CorpusMode::Text8), (90_000_000, 5_000_000));
    }

    #[test]
    fn text8_falls_back_on_foreign_chars() {
        let text = "Hello there, ".repeat(20);
        let (s, _) = split_text(&text, CorpusMode::Text8).unwrap();
        assert_eq!(s.mode, CorpusMode::Raw);
    }

    #[test]
    fn unseen_held_out_chars_map_to_unknown() {
        let mut text = "ab".repeat(45);
        text.push_str("abcab");
        text.push_str("ababa");
        let (s, v) = split_text(&text, CorpusMode::Raw).unwrap();
        assert_eq!(v.size(), 3);
        assert_eq!(s.valid, vec![0, 1, 2, 0, 1]);
    }

    #[test]
    fn load_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = |n: &str| dir.path().join(n);
        std::fs::write(p("train"), "abc abc").unwrap();
        std::fs::write(p("valid"), "abd").unwrap();
        std::fs::write(p("test"), "cab").unwrap();
        let src = CorpusSource::Files { train: p("train"), valid: p("valid"), test: p("test") };
        let (s, v) = load_corpus(&src, CorpusMode::Text8).unwrap();
        assert_eq!(v.size(), 5);
        assert_eq!(s.valid, vec![1, 2, 4]);
        assert_eq!(s.mode, CorpusMode::Text8);
        std::fs::write(p("empty"), "").unwrap();
        assert!(load_corpus(&CorpusSource::Single(p("empty")), CorpusMode::Raw).is_err());
        assert!(load_corpus(&CorpusSource::Single(p("missing")), CorpusMode::Raw).is_err());
    }

    #[test]
    fn shift_by_one_targets() {
        let e = make_epoch(&[0, 1, 2, 3, 4], 1, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(e.offset, 0);
        assert_eq!(
            e.chunks,
            vec![
                Chunk { inputs: vec![0, 1], targets: vec![1, 2] },
                Chunk { inputs: vec![2, 3], targets: vec![3, 4] },
            ]
        );
    }

    #[test]
    fn too_short_split_rejected() {
        let err = make_epoch(&[0; 8], 2, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(err.to_string().contains("at least 9"), "{err}");
    }

    proptest! {
        #[test]
        fn epochs_are_cropped_lanes(len in 10usize..400, batch in 1usize..5, seq in 1usize..9, seed in 0u64..1000) {
            prop_assume!(len > batch * seq);
            let split: Vec<usize> = (0..len).collect();
            let e = make_epoch(&split, batch, seq, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let again = make_epoch(&split, batch, seq, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(&e, &again);
            prop_assert_eq!(e.characters() % (batch * seq), 0);
            prop_assert!(!e.chunks.is_empty());
            for (k, c) in e.chunks.iter().enumerate() {
                for b in 0..batch {
                    let row = &c.inputs[b * seq..(b + 1) * seq];
                    let tgt = &c.targets[b * seq..(b + 1) * seq];
                    // numbered corpus: consecutive within a row, targets one ahead
                    for t in 0..seq {
                        prop_assert_eq!(row[t], row[0] + t);
                        prop_assert_eq!(tgt[t], row[t] + 1);
                    }
                    if let Some(next) = e.chunks.get(k + 1) {
                        prop_assert_eq!(row[seq - 1] + 1, next.inputs[b * seq]);
                    }
                }
            }
        }
    }
}
