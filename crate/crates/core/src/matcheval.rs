//! Evaluation protocol for multi-target answers: optimal matching of
//! predicted to ground-truth masks with empty-mask padding, description
//! splicing, relevance scoring, gated IoU and gIoU/cIoU aggregation.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::data::record::PLACEHOLDER;
use crate::data::split::TargetSplit;
use crate::error::{Error, Result};
use crate::losses::{bce_mean_value, dice_value};

/// Marker spliced in for predictions matched to an empty slot.
pub const NO_MATCH: &str = "(no match)";
/// Scores at or below this value zero the intersection.
pub const SCORE_GATE: f64 = 0.5;
pub const RAW_SCORE_MAX: u32 = 10;

/// Mean BCE of `pred` (as a probability map) against `target`, plus Dice.
pub fn pair_cost(pred: &[f64], target: &[f64]) -> Result<f64> {
    Ok(bce_mean_value(pred, target)? + dice_value(pred, target)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    /// Padded size `max(K, G)`.
    pub p: usize,
    pub k: usize,
    pub g: usize,
    /// `assignment[i]` is the ground-truth slot of prediction slot `i`;
    /// slots `≥ K` / `≥ G` are empty padding.
    pub assignment: Vec<usize>,
    /// `P×P` row-major, rows are prediction slots.
    pub cost: Vec<f64>,
    pub total_cost: f64,
}

impl MatchResult {
    pub fn pred_is_pad(&self, i: usize) -> bool {
        i >= self.k
    }

    pub fn gt_is_pad(&self, j: usize) -> bool {
        j >= self.g
    }

    /// Ground-truth index matched to real prediction `i`, if any.
    pub fn matched_gt(&self, i: usize) -> Option<usize> {
        let j = self.assignment[i];
        (j < self.g).then_some(j)
    }
}

/// Sum of the chosen entries, added in ascending order so that equal
/// multisets of costs always give the same total.
pub fn assignment_cost(cost: &[f64], p: usize, assignment: &[usize]) -> f64 {
    let mut picked: Vec<f64> = assignment.iter().enumerate().map(|(i, &j)| cost[i * p + j]).collect();
    picked.sort_by(f64::total_cmp);
    picked.iter().sum()
}

/// Minimum-cost perfect assignment on a square matrix (Hungarian method with
/// row/column potentials). Returns `assignment[row] = column`.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    assignment
}

/// Pads the smaller side with empty masks and solves the assignment.
pub fn match_masks<M: AsRef<[f64]>>(preds: &[M], gts: &[M]) -> Result<MatchResult> {
    let (k, g) = (preds.len(), gts.len());
    if k == 0 && g == 0 {
        return Err(Error::Contract("matching needs at least one mask".into()));
    }
    let n = preds
        .first()
        .or_else(|| gts.first())
        .map(|m| m.as_ref().len())
        .unwrap_or(0);
    for m in preds.iter().chain(gts) {
        if m.as_ref().len() != n {
            return Err(Error::dim(
                "match_masks",
                format!("masks have {} and {n} pixels", m.as_ref().len()),
            ));
        }
    }
    let p = k.max(g);
    let empty = vec![0.0; n];
    let mut cost = vec![0.0; p * p];
    for i in 0..p {
        let pred = if i < k { preds[i].as_ref() } else { &empty };
        for j in 0..p {
            let gt = if j < g { gts[j].as_ref() } else { &empty };
            cost[i * p + j] = if i >= k && j >= g { 0.0 } else { pair_cost(pred, gt)? };
        }
    }
    let assignment = hungarian(&cost, p);
    let total_cost = assignment_cost(&cost, p, &assignment);
    Ok(MatchResult {
        p,
        k,
        g,
        assignment,
        cost,
        total_cost,
    })
}

/// Replaces the `i`-th placeholder of `template` by the parenthesized
/// description of prediction `i`'s matched ground truth.
pub fn splice_descriptions(template: &str, m: &MatchResult, gt_descriptions: &[String]) -> Result<String> {
    let pieces: Vec<&str> = template.split(PLACEHOLDER).collect();
    let holes = pieces.len() - 1;
    if holes != m.k {
        return Err(Error::Contract(format!(
            "template has {holes} placeholders for {} predictions",
            m.k
        )));
    }
    if gt_descriptions.len() != m.g {
        return Err(Error::Contract(format!(
            "{} descriptions for {} ground-truth masks",
            gt_descriptions.len(),
            m.g
        )));
    }
    let mut out = String::with_capacity(template.len());
    for (i, piece) in pieces.iter().enumerate() {
        out.push_str(piece);
        if i < holes {
            match m.matched_gt(i) {
                Some(j) => {
                    out.push('(');
                    out.push_str(&gt_descriptions[j]);
                    out.push(')');
                }
                None => out.push_str(NO_MATCH),
            }
        }
    }
    Ok(out)
}

/// What a scorer sees for one answer.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRequest {
    pub text: String,
    pub num_predictions: usize,
    /// Per prediction: what the answer called it, and the matched
    /// ground-truth description when there is one.
    pub pairs: Vec<(String, Option<String>)>,
}

/// Rates every prediction of an answer on the raw 1..=10 scale.
pub trait Scorer: Send + Sync {
    fn raw_scores(&self, request: &ScoreRequest) -> Result<Vec<u32>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StubMode {
    Constant(u32),
    /// 10 when the names match exactly, otherwise 1.
    ExactMatch,
    /// `1 + round(9·J)` with `J` the word-set Jaccard index.
    Jaccard,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StubScorer {
    pub mode: StubMode,
}

fn word_set(s: &str) -> std::collections::BTreeSet<String> {
    s.split_whitespace().map(|w| w.to_lowercase()).collect()
}

pub fn jaccard(a: &str, b: &str) -> f64 {
    let (a, b) = (word_set(a), word_set(b));
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

impl Scorer for StubScorer {
    fn raw_scores(&self, request: &ScoreRequest) -> Result<Vec<u32>> {
        Ok(request
            .pairs
            .iter()
            .map(|(said, gt)| match (self.mode, gt) {
                (StubMode::Constant(c), _) => c,
                (_, None) => 1,
                (StubMode::ExactMatch, Some(gt)) => {
                    if said.trim() == gt.trim() {
                        10
                    } else {
                        1
                    }
                }
                (StubMode::Jaccard, Some(gt)) => 1 + (9.0 * jaccard(said, gt)).round() as u32,
            })
            .collect())
    }
}

#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    text: &'a str,
    num_predictions: usize,
}

#[derive(Debug, Deserialize)]
struct WireReply {
    scores: Vec<i64>,
}

/// HTTP client for an external scoring service.
pub struct RemoteScorer {
    endpoint: String,
    agent: ureq::Agent,
}

impl RemoteScorer {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteScorer {
            endpoint: endpoint.into(),
            agent,
        }
    }
}

impl Scorer for RemoteScorer {
    fn raw_scores(&self, request: &ScoreRequest) -> Result<Vec<u32>> {
        let body = WireRequest {
            text: &request.text,
            num_predictions: request.num_predictions,
        };
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(&body)
            .map_err(|e| Error::Transport(format!("{}: {e}", self.endpoint)))?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(Error::Protocol(format!("{} answered HTTP {status}", self.endpoint)));
        }
        let reply: WireReply = resp.body_mut().read_json().map_err(|e| match e {
            ureq::Error::Io(_) | ureq::Error::Timeout(_) => Error::Transport(format!("{}: {e}", self.endpoint)),
            other => Error::Protocol(format!("unreadable reply from {}: {other}", self.endpoint)),
        })?;
        reply
            .scores
            .into_iter()
            .map(|s| {
                u32::try_from(s)
                    .ok()
                    .filter(|v| (1..=RAW_SCORE_MAX).contains(v))
                    .ok_or_else(|| Error::Protocol(format!("score {s} outside 1..=10")))
            })
            .collect()
    }
}

/// Normalized scores in `[0, 1]`; predictions without a match score 0.
pub fn score_predictions(scorer: &dyn Scorer, request: &ScoreRequest) -> Result<Vec<f64>> {
    let raw = scorer.raw_scores(request)?;
    if raw.len() != request.num_predictions {
        return Err(Error::Protocol(format!(
            "{} scores for {} predictions",
            raw.len(),
            request.num_predictions
        )));
    }
    if let Some(bad) = raw.iter().find(|&&s| !(1..=RAW_SCORE_MAX).contains(&s)) {
        return Err(Error::Protocol(format!("score {bad} outside 1..=10")));
    }
    Ok(raw
        .iter()
        .zip(&request.pairs)
        .map(|(&s, (_, gt))| {
            if gt.is_some() {
                s as f64 / RAW_SCORE_MAX as f64
            } else {
                0.0
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GatedIou {
    pub intersection: f64,
    pub union: f64,
    pub iou: f64,
}

/// IoU of binary masks with the intersection zeroed when `s ≤ 0.5`, or
/// scaled by `s` in soft-product mode. Two empty masks count as IoU 1 when
/// the prediction passes the gate.
pub fn gated_iou(pred: &[u8], gt: &[u8], s: f64, soft_product: bool) -> Result<GatedIou> {
    if pred.len() != gt.len() {
        return Err(Error::dim(
            "gated_iou",
            format!("{} vs {} pixels", pred.len(), gt.len()),
        ));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&a, &b) in pred.iter().zip(gt) {
        let (a, b) = (a != 0, b != 0);
        inter += u64::from(a && b);
        union += u64::from(a || b);
    }
    let factor = if soft_product {
        s
    } else if s > SCORE_GATE {
        1.0
    } else {
        0.0
    };
    let intersection = inter as f64 * factor;
    let iou = if union == 0 {
        factor.min(1.0)
    } else {
        intersection / union as f64
    };
    Ok(GatedIou {
        intersection,
        union: union as f64,
        iou,
    })
}

/// One evaluated answer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageReport {
    pub image: String,
    pub targets: usize,
    pub split: TargetSplit,
    pub p: usize,
    pub scores: Vec<f64>,
    pub ious: Vec<f64>,
    pub intersection: f64,
    pub union: f64,
    pub iou_img: f64,
    pub spliced: String,
}

/// Inputs for one answer: binarized predictions, what the answer called
/// each of them, the response template, and the ground truth.
#[derive(Debug, Clone)]
pub struct AnswerCase {
    pub image: String,
    pub preds: Vec<Vec<u8>>,
    pub pred_names: Vec<String>,
    pub template: String,
    pub gts: Vec<Vec<u8>>,
    pub gt_descriptions: Vec<String>,
}

pub fn evaluate_answer(case: &AnswerCase, scorer: &dyn Scorer, soft_product: bool) -> Result<ImageReport> {
    if case.pred_names.len() != case.preds.len() {
        return Err(Error::Contract(format!(
            "{} names for {} predictions",
            case.pred_names.len(),
            case.preds.len()
        )));
    }
    let to_f = |m: &Vec<u8>| m.iter().map(|&v| f64::from(u8::from(v != 0))).collect::<Vec<f64>>();
    let pf: Vec<Vec<f64>> = case.preds.iter().map(to_f).collect();
    let gf: Vec<Vec<f64>> = case.gts.iter().map(to_f).collect();
    let m = match_masks(&pf, &gf)?;
    let spliced = splice_descriptions(&case.template, &m, &case.gt_descriptions)?;
    let request = ScoreRequest {
        text: spliced.clone(),
        num_predictions: m.k,
        pairs: (0..m.k)
            .map(|i| {
                (
                    case.pred_names[i].clone(),
                    m.matched_gt(i).map(|j| case.gt_descriptions[j].clone()),
                )
            })
            .collect(),
    };
    let scores = if m.k == 0 {
        Vec::new()
    } else {
        score_predictions(scorer, &request)?
    };
    let n = pf.first().or_else(|| gf.first()).map_or(0, Vec::len);
    let empty = vec![0u8; n];
    let mut ious = Vec::with_capacity(m.p);
    let (mut inter, mut union) = (0.0, 0.0);
    for i in 0..m.p {
        let j = m.assignment[i];
        let pred = if i < m.k { &case.preds[i] } else { &empty };
        let gt = if j < m.g { &case.gts[j] } else { &empty };
        let s = if i < m.k { scores[i] } else { 0.0 };
        let r = gated_iou(pred, gt, s, soft_product)?;
        inter += r.intersection;
        union += r.union;
        ious.push(r.iou);
    }
    Ok(ImageReport {
        image: case.image.clone(),
        targets: m.g,
        split: TargetSplit::of(m.g),
        p: m.p,
        iou_img: ious.iter().sum::<f64>() / m.p as f64,
        scores,
        ious,
        intersection: inter,
        union,
        spliced,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitMetrics {
    pub images: usize,
    pub giou: f64,
    pub ciou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub soft_product: bool,
    /// Absent when the split has no images.
    pub few: Option<SplitMetrics>,
    pub many: Option<SplitMetrics>,
    pub overall: Option<SplitMetrics>,
    pub images: Vec<ImageReport>,
}

fn split_metrics<'a>(reports: impl Iterator<Item = &'a ImageReport>) -> Option<SplitMetrics> {
    let (mut n, mut iou, mut inter, mut union) = (0usize, 0.0, 0.0, 0.0);
    for r in reports {
        n += 1;
        iou += r.iou_img;
        inter += r.intersection;
        union += r.union;
    }
    (n > 0).then(|| SplitMetrics {
        images: n,
        giou: iou / n as f64,
        ciou: if union > 0.0 { inter / union } else { 0.0 },
    })
}

pub fn aggregate(images: Vec<ImageReport>, soft_product: bool) -> EvalReport {
    EvalReport {
        soft_product,
        few: split_metrics(images.iter().filter(|r| r.split == TargetSplit::Few)),
        many: split_metrics(images.iter().filter(|r| r.split == TargetSplit::Many)),
        overall: split_metrics(images.iter()),
        images,
    }
}
