use std::path::Path;

use super::SegmentationRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentationFormat {
    Tsv,
    Pgm,
}

fn escape(c: char, out: &mut String) {
    match c {
        '\t' => out.push_str("\\t"),
        '\n' => out.push_str("\\n"),
        '\r' => out.push_str("\\r"),
        '\\' => out.push_str("\\\\"),
        c => out.push(c),
    }
}

/// One line per character: `char<TAB>z1<TAB>z2`. Tab, newline, carriage
/// return and backslash are written as `\t`, `\n`, `\r`, `\\`.
pub fn render_tsv(r: &SegmentationRecord) -> String {
    let mut out = String::with_capacity(r.text.len() * 6);
    for ((&c, z1), z2) in r.text.iter().zip(&r.z1).zip(&r.z2) {
        escape(c, &mut out);
        out.push_str(&format!("\t{z1}\t{z2}\n"));
    }
    out
}

pub fn parse_tsv(s: &str) -> Result<SegmentationRecord> {
    let (mut text, mut z1, mut z2) = (Vec::new(), Vec::new(), Vec::new());
    for (n, line) in s.lines().enumerate() {
        let bad = |msg: &str| Error::Data(format!("tsv line {}: {msg}", n + 1));
        let mut fields = line.split('\t');
        let (Some(c), Some(a), Some(b), None) = (fields.next(), fields.next(), fields.next(), fields.next()) else {
            return Err(bad("expected three tab-separated fields"));
        };
        let c = match c {
            "\\t" => '\t',
            "\\n" => '\n',
            "\\r" => '\r',
            "\\\\" => '\\',
            other => {
                let mut cs = other.chars();
                match (cs.next(), cs.next()) {
                    (Some(ch), None) => ch,
                    _ => return Err(bad("first field must be one character")),
                }
            }
        };
        let bit = |f: &str| match f {
            "0" => Ok(0u8),
            "1" => Ok(1u8),
            _ => Err(bad("boundary fields must be 0 or 1")),
        };
        text.push(c);
        z1.push(bit(a)?);
        z2.push(bit(b)?);
    }
    SegmentationRecord::new(text, z1, z2)
}

/// Binary PGM (`P5`), one column per character and two rows (z¹ above
/// z²): black (0) where z = 1, white (255) where z = 0. Header:
/// `P5\n<width> 2\n255\n`.
pub fn render_pgm(r: &SegmentationRecord) -> Vec<u8> {
    let mut out = format!("P5\n{} 2\n255\n", r.text.len()).into_bytes();
    for row in [&r.z1, &r.z2] {
        out.extend(row.iter().map(|&z| if z == 1 { 0u8 } else { 255 }));
    }
    out
}

pub fn write_segmentation(r: &SegmentationRecord, format: SegmentationFormat, path: &Path) -> Result<()> {
    let bytes = match format {
        SegmentationFormat::Tsv => render_tsv(r).into_bytes(),
        SegmentationFormat::Pgm => render_pgm(r),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
