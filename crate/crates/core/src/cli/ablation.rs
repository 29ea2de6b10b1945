//! The twelve-row ablation grid: one base configuration plus the settings
//! each row changes.

use super::config::{ConfigText, RunConfig};
use crate::error::Result;

pub struct AblationRow {
    pub index: usize,
    pub label: &'static str,
    pub settings: &'static [(&'static str, &'static str)],
}

pub const ABLATION_GRID: [AblationRow; 12] = [
    AblationRow {
        index: 1,
        label: "HMLSTM+Schedule+LN+CopyLast",
        settings: &[("copy_last", "true")],
    },
    AblationRow {
        index: 2,
        label: "HMLSTM",
        settings: &[("schedule", "false"), ("layer_norm", "false")],
    },
    AblationRow {
        index: 3,
        label: "HMLSTM+Schedule",
        settings: &[("layer_norm", "false")],
    },
    AblationRow {
        index: 4,
        label: "HMLSTM+Schedule+LN",
        settings: &[],
    },
    AblationRow {
        index: 5,
        label: "HMLSTM+Schedule+LN alpha=0.125",
        settings: &[("slope_alpha", "0.125")],
    },
    AblationRow {
        index: 6,
        label: "HMLSTM+Schedule+LN alpha=0.25",
        settings: &[("slope_alpha", "0.25")],
    },
    AblationRow {
        index: 7,
        label: "HMLSTM+Schedule+LN alpha=1.0",
        settings: &[("slope_alpha", "1.0")],
    },
    AblationRow {
        index: 8,
        label: "NoTopDown+Schedule+LN",
        settings: &[("no_top_down", "true")],
    },
    AblationRow {
        index: 9,
        label: "SimplerOut+Schedule+LN",
        settings: &[("output_head", "simple")],
    },
    AblationRow {
        index: 10,
        label: "LSTM+Schedule+LN",
        settings: &[("arch", "lstm")],
    },
    AblationRow {
        index: 11,
        label: "LSTM+Schedule+LN+SimplerOut",
        settings: &[("arch", "lstm"), ("output_head", "simple")],
    },
    AblationRow {
        index: 12,
        label: "HMRNN+Schedule+LN",
        settings: &[("arch", "hmrnn")],
    },
];

/// Character-level PTB settings shared by every row.
pub const FULL_SCALE_BASE: &str = "\
units = 512
embed_dim = 128
output_dim = 512
batch = 64
seq_len = 100
lr = 0.002
clip = 1.0
l2 = 0.0005
layer_norm = true
schedule = true
slope_alpha = 0.5
corpus_mode = ptb_char
train_file = data/ptb.char.train.txt
valid_file = data/ptb.char.valid.txt
test_file = data/ptb.char.test.txt
";

/// Desk-sized settings: a generated 500K-character corpus and 128 units.
pub const DESK_BASE: &str = "\
units = 128
embed_dim = 64
output_dim = 128
batch = 32
seq_len = 100
lr = 0.002
clip = 1.0
l2 = 0.0005
layer_norm = true
schedule = true
slope_alpha = 0.5
max_epochs = 3
synthetic_chars = 500000
";

impl AblationRow {
    pub fn slug(&self) -> String {
        let s: String = self
            .label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
            .collect();
        let s = s.split('-').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("-");
        format!("{:02}-{s}", self.index)
    }

    /// The row as config-file text on top of `base`.
    pub fn config_text(&self, base: &str) -> String {
        let mut out = format!("# {}\nname = {}\n", self.label, self.slug());
        out.push_str(base);
        for (k, v) in self.settings {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn resolve(&self, base: &str) -> Result<RunConfig> {
        ConfigText::parse(&self.config_text(base), &self.slug())?.resolve()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, OutputHead};

    #[test]
    fn every_row_instantiates_with_expected_parameters() {
        for base in [FULL_SCALE_BASE, DESK_BASE] {
            for row in &ABLATION_GRID {
                let mut run = row.resolve(base).unwrap();
                run.model.vocab_size = 50;
                run.model.units = 8;
                run.model.embed_dim = 4;
                run.model.output_dim = 8;
                let m = Model::<f32>::new(run.model.clone()).unwrap();
                let names: Vec<&str> = m.params.names().collect();
                let has = |pat: &str| names.iter().any(|n| n.contains(pat));
                assert_eq!(has(".V"), run.model.arch != crate::model::Arch::Lstm && !run.model.flags.no_top_down, "{}", row.label);
                assert_eq!(has("head.gate_w"), run.model.output_head == OutputHead::Gated, "{}", row.label);
                assert_eq!(has("ln_w.gain"), run.model.flags.use_layer_norm, "{}", row.label);
                assert_eq!(has(".gain"), run.model.flags.use_layer_norm || run.model.ln_on_embeddings, "{}", row.label);
            }
        }
    }

    #[test]
    fn rows_set_their_factors() {
        let r = |i: usize| ABLATION_GRID[i - 1].resolve(DESK_BASE).unwrap();
        assert!(r(1).model.flags.copy_last);
        assert!(!r(2).train.schedule && !r(2).model.flags.use_layer_norm);
        assert!(r(3).train.schedule && !r(3).model.flags.use_layer_norm);
        assert_eq!(r(4).model.flags.slope_alpha, 0.5);
        assert_eq!(r(5).model.flags.slope_alpha, 0.125);
        assert_eq!(r(7).model.flags.slope_alpha, 1.0);
        assert!(r(8).model.flags.no_top_down);
        assert_eq!(r(11).model.output_head, OutputHead::Simple);
        assert_eq!(ABLATION_GRID[3].slug(), "04-hmlstm-schedule-ln");
    }
}
