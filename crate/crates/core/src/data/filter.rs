//! Deterministic record filtering with machine-readable rejection reasons.

use serde::{Deserialize, Serialize};

use super::record::{count_placeholders, MuseRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterRules {
    /// Targets with fewer foreground pixels are rejected as `small_mask`.
    pub min_mask_area: u64,
}

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules { min_mask_area: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    pub index: usize,
    pub image: String,
    /// Sorted, deduplicated reason codes.
    pub reasons: Vec<&'static str>,
}

/// Reason codes for one record; empty means the record is kept.
pub fn rejection_reasons(record: &MuseRecord, rules: &FilterRules) -> Vec<&'static str> {
    let mut reasons = Vec::new();
    if record.targets.is_empty() {
        reasons.push("no_targets");
    }
    if count_placeholders(&record.answer) != record.targets.len() {
        reasons.push("placeholder_mismatch");
    }
    for (i, t) in record.targets.iter().enumerate() {
        if t.description.trim().is_empty() {
            reasons.push("empty_description");
        }
        if t.mask.size != [record.height, record.width] || t.mask.validate().is_err() {
            reasons.push("rle_size_mismatch");
            continue;
        }
        let area = t.mask.area();
        if area == 0 {
            reasons.push("empty_mask");
        } else if area < rules.min_mask_area {
            reasons.push("small_mask");
        }
        if record.targets[..i].iter().any(|o| o.mask == t.mask) {
            reasons.push("duplicate_instance");
        }
    }
    reasons.sort_unstable();
    reasons.dedup();
    reasons
}

pub fn filter_records(records: Vec<MuseRecord>, rules: &FilterRules) -> (Vec<MuseRecord>, Vec<Rejection>) {
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for (index, r) in records.into_iter().enumerate() {
        let reasons = rejection_reasons(&r, rules);
        if reasons.is_empty() {
            kept.push(r);
        } else {
            rejected.push(Rejection {
                index,
                image: r.image,
                reasons,
            });
        }
    }
    (kept, rejected)
}
