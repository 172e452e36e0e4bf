//! Dataset statistics: instances per category, description lengths, and
//! targets per record.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::Serialize;

use super::record::MuseRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub records: usize,
    pub instances_per_category: BTreeMap<String, usize>,
    /// Whitespace-separated word count → number of descriptions.
    pub description_tokens: BTreeMap<usize, usize>,
    /// Target count → number of records.
    pub targets_per_record: BTreeMap<usize, usize>,
    pub mean_targets: f64,
    pub max_targets: usize,
}

pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn compute_statistics(records: &[MuseRecord]) -> Result<StatsReport> {
    if records.is_empty() {
        return Err(Error::Contract("statistics need at least one record".into()));
    }
    let mut report = StatsReport {
        records: records.len(),
        instances_per_category: BTreeMap::new(),
        description_tokens: BTreeMap::new(),
        targets_per_record: BTreeMap::new(),
        mean_targets: 0.0,
        max_targets: 0,
    };
    let mut total = 0usize;
    for r in records {
        let k = r.targets.len();
        total += k;
        report.max_targets = report.max_targets.max(k);
        *report.targets_per_record.entry(k).or_default() += 1;
        for t in &r.targets {
            *report.instances_per_category.entry(t.category.clone()).or_default() += 1;
            *report
                .description_tokens
                .entry(token_count(&t.description))
                .or_default() += 1;
        }
    }
    report.mean_targets = total as f64 / records.len() as f64;
    Ok(report)
}

impl StatsReport {
    /// Three whitespace-separated blocks (`value count` rows) separated by
    /// blank lines, addressable with gnuplot's `index`.
    pub fn to_gnuplot(&self) -> String {
        let mut s = String::new();
        s.push_str("# instances per category\n");
        for (i, (cat, n)) in self.instances_per_category.iter().enumerate() {
            writeln!(s, "{i} {n} \"{cat}\"").unwrap();
        }
        s.push_str("\n\n# description token count\n");
        for (k, n) in &self.description_tokens {
            writeln!(s, "{k} {n}").unwrap();
        }
        s.push_str("\n\n# targets per record\n");
        for (k, n) in &self.targets_per_record {
            writeln!(s, "{k} {n}").unwrap();
        }
        s
    }
}
