use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Zipf};

use crate::rng;

const ONSETS: &[&str] = &["", "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "st", "tr", "pl", "ch", "sh", "th"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ea", "ou", "ai"];
const CODAS: &[&str] = &["", "", "n", "r", "s", "t", "l", "nd", "st", "ng", "ck"];

fn word<R: Rng>(rng: &mut R) -> String {
    let syllables = 1 + rng.random_range(0..2) + usize::from(rng.random_bool(0.2));
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
        w.push_str(CODAS.choose(rng).unwrap());
    }
    w
}

/// Deterministic English-like text of exactly `len` characters:
/// Zipf-distributed pseudo-words built from syllables, sentences with
/// commas and periods, and line breaks between paragraphs.
pub fn synthetic_text(seed: u64, len: usize) -> String {
    let mut rng = rng::stream(seed, "corpus");
    let mut lexicon: Vec<String> = Vec::with_capacity(3000);
    while lexicon.len() < 3000 {
        let w = word(&mut rng);
        if !lexicon.contains(&w) {
            lexicon.push(w);
        }
    }
    // frequent words are short, as in natural text
    lexicon.sort_by_key(|w| w.len());
    let zipf = Zipf::new(lexicon.len() as f64, 1.1).expect("valid zipf");
    let mut out = String::with_capacity(len + 64);
    while out.len() < len {
        let sentences = rng.random_range(2..6);
        for s in 0..sentences {
            let words = rng.random_range(4..16);
            for i in 0..words {
                let k = zipf.sample(&mut rng) as usize - 1;
                let w = &lexicon[k];
                if i == 0 {
                    let mut cs = w.chars();
                    let first = cs.next().unwrap();
                    out.extend(first.to_uppercase());
                    out.push_str(cs.as_str());
                } else {
                    out.push_str(w);
                }
                if i + 1 < words {
                    out.push_str(if rng.random_bool(0.08) { ", " } else { " " });
                }
            }
            out.push('.');
            if s + 1 < sentences {
                out.push(' ');
            }
        }
        out.push('\n');
    }
    out.truncate(len);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_length_and_deterministic() {
        let a = synthetic_text(1, 5000);
        assert_eq!(a.len(), 5000);
        assert_eq!(a, synthetic_text(1, 5000));
        assert_ne!(a, synthetic_text(2, 5000));
        assert!(a.is_ascii());
        let spaces = a.chars().filter(|&c| c == ' ').count();
        assert!(spaces > 500 && spaces < 1500, "{spaces}");
    }
}
