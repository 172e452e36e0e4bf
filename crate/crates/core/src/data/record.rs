//! JSON Lines question/answer records with inline RLE masks.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::rle::RleMask;
use crate::error::{Error, Result};

/// Marker standing for one mask in answer text.
pub const PLACEHOLDER: &str = "[SEG]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MuseTarget {
    pub description: String,
    pub category: String,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [u32; 4],
    pub mask: RleMask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MuseRecord {
    pub image: String,
    pub height: u32,
    pub width: u32,
    pub question: String,
    pub answer: String,
    pub targets: Vec<MuseTarget>,
}

pub fn count_placeholders(text: &str) -> usize {
    text.matches(PLACEHOLDER).count()
}

impl MuseRecord {
    /// Checks the record invariants, returning every violation found.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.targets.is_empty() {
            out.push("record has no targets".to_owned());
        }
        let n = count_placeholders(&self.answer);
        if n != self.targets.len() {
            out.push(format!("{n} placeholders for {} targets", self.targets.len()));
        }
        for (i, t) in self.targets.iter().enumerate() {
            if t.mask.size != [self.height, self.width] {
                out.push(format!(
                    "target {i} mask is {:?}, image is {}x{}",
                    t.mask.size, self.height, self.width
                ));
            }
            if let Err(e) = t.mask.validate() {
                out.push(format!("target {i}: {e}"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(format!("{}: {}", self.image, v.join("; "))))
        }
    }

    pub fn to_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub fn write_records<W: Write>(mut w: W, records: &[MuseRecord]) -> Result<()> {
    for r in records {
        let line = r.to_line()?;
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io("<records>", e))?;
    }
    Ok(())
}

/// Parses one record per non-empty line; errors name the line number.
pub fn read_records<R: BufRead>(r: R) -> Result<Vec<MuseRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<records>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MuseRecord = serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save_records(path: &Path, records: &[MuseRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_records(&mut buf, records)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_records(path: &Path) -> Result<Vec<MuseRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(std::io::BufReader::new(f))
}
