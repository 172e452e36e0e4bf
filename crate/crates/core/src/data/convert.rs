//! Single-object referring annotations → multi-referring question/answer records.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::record::{MuseRecord, MuseTarget, PLACEHOLDER};
use super::rle::RleMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceAnnotation {
    pub description: String,
    pub category: String,
    pub mask: RleMask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageAnnotations {
    pub image: String,
    pub height: u32,
    pub width: u32,
    pub instances: Vec<InstanceAnnotation>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub converted: usize,
    /// Images without any instance.
    pub skipped: Vec<String>,
}

pub fn question_text(descriptions: &[&str]) -> String {
    format!("Please segment the {} in the image", descriptions.join(", "))
}

pub fn answer_text(descriptions: &[&str]) -> String {
    descriptions
        .iter()
        .map(|d| format!("{d} is {PLACEHOLDER}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Picks `k ∈ k_range` distinct instances per image (capped by the number
/// available) and lists them in the same order in question and answer.
pub fn convert_multi_referring(
    annotations: &[ImageAnnotations],
    k_range: (usize, usize),
    seed: u64,
) -> Result<(Vec<MuseRecord>, ConversionReport)> {
    let (k_min, k_max) = k_range;
    if k_min == 0 || k_min > k_max {
        return Err(Error::Config(vec![format!(
            "k range ({k_min}, {k_max}) is empty or starts at 0"
        )]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ConversionReport::default();
    let mut records = Vec::new();
    for ann in annotations {
        let n = ann.instances.len();
        if n == 0 {
            report.skipped.push(ann.image.clone());
            continue;
        }
        let k = rng.random_range(k_min.min(n)..=k_max.min(n));
        let chosen: Vec<&InstanceAnnotation> = sample(&mut rng, n, k).into_iter().map(|i| &ann.instances[i]).collect();
        let descs: Vec<&str> = chosen.iter().map(|i| i.description.as_str()).collect();
        let targets = chosen
            .iter()
            .map(|inst| {
                Ok(MuseTarget {
                    description: inst.description.clone(),
                    category: inst.category.clone(),
                    bbox: inst.mask.bbox()?,
                    mask: inst.mask.clone(),
                })
            })
            .collect::<Result<_>>()?;
        records.push(MuseRecord {
            image: ann.image.clone(),
            height: ann.height,
            width: ann.width,
            question: question_text(&descs),
            answer: answer_text(&descs),
            targets,
        });
        report.converted += 1;
    }
    Ok((records, report))
}

pub fn read_annotations(path: &std::path::Path) -> Result<Vec<ImageAnnotations>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}
