use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde_json::{json, Value};

use pixdec::data::synth::gen_synthetic;
use pixdec::data::{
    compute_statistics, convert::read_annotations, convert_multi_referring, filter_records, load_records, save_records,
    FilterRules, MuseRecord,
};
use pixdec::decoder::{flops_breakdown, measured_muladds};
use pixdec::matcheval::{
    aggregate, evaluate_answer, AnswerCase, RemoteScorer, ScoreRequest, Scorer, StubMode, StubScorer,
};
use pixdec::numeric::Scalar;
use pixdec::train::{
    binarize, held_out_seed, load_checkpoint, load_samples, run_training, Manifest, Precision, RunConfig, Sample,
};
use pixdec::{Error, Result};

use crate::{Cli, Command, GlobalArgs, ScorerMode};

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Transport(_) | Error::Protocol(_) => 3,
        Error::Format(_) | Error::Json(_) | Error::Image(_) => 4,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if g.workers == 0 {
        return Err(Error::Config(vec!["--workers must be at least 1".to_owned()]));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(g.workers)
        .build()
        .map_err(|e| Error::Config(vec![format!("cannot start {} workers: {e}", g.workers)]))?;
    pool.install(|| match &cli.command {
        Command::Train { lambda_ref, steps } => train(g, *lambda_ref, *steps),
        Command::Eval {
            checkpoint,
            predictions,
            data,
            scorer_mode,
            scorer_endpoint,
            stub_score,
            stub_fallback,
            scorer_timeout,
            soft_product,
        } => {
            let scorer = build_scorer(
                *scorer_mode,
                scorer_endpoint.as_deref(),
                *stub_score,
                *stub_fallback,
                *scorer_timeout,
            )?;
            let opts = json!({
                "checkpoint": checkpoint,
                "predictions": predictions,
                "data": data,
                "scorer_mode": format!("{scorer_mode:?}"),
                "scorer_endpoint": scorer_endpoint,
                "stub_score": stub_score,
                "stub_fallback": stub_fallback,
                "soft_product": soft_product,
                "workers": g.workers,
            });
            eval(
                g,
                checkpoint.as_deref(),
                predictions.as_deref(),
                data.as_deref(),
                scorer.as_ref(),
                *soft_product,
                opts,
            )
        }
        Command::Convert { input, k_min, k_max } => convert(g, input, *k_min, *k_max),
        Command::Filter { input, min_mask_area } => filter(g, input, *min_mask_area),
        Command::Stats { input, gnuplot } => stats(g, input, gnuplot.as_deref()),
        Command::Flops { targets, image_size } => flops(g, *targets, *image_size),
        Command::Gen { count } => generate(g, *count),
    })
}

/// Config file (or the toy preset), then `--set` overrides, then `--seed`.
pub fn merged_config(g: &GlobalArgs) -> Result<RunConfig> {
    let base = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::toy(),
    };
    let mut value = serde_json::to_value(&base)?;
    for o in &g.overrides {
        apply_override(&mut value, o)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(vec![e.to_string()]))?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_override(value: &mut Value, spec: &str) -> Result<()> {
    let bad = |why: &str| Error::Config(vec![format!("--set {spec}: {why}")]);
    let (path, raw) = spec.split_once('=').ok_or_else(|| bad("expected PATH=VALUE"))?;
    let new: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut slot = value;
    for key in path.split('.') {
        let obj = slot
            .as_object_mut()
            .ok_or_else(|| bad("path walks into a non-object"))?;
        slot = obj.get_mut(key).ok_or_else(|| bad(&format!("unknown key `{key}`")))?;
    }
    *slot = new;
    Ok(())
}

fn write_json(out: Option<&Path>, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::Io {
                    path: dir.to_owned(),
                    source: e,
                })?;
            }
            fs::write(p, text).map_err(|e| Error::Io {
                path: p.to_owned(),
                source: e,
            })
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn require_out<'a>(g: &'a GlobalArgs, what: &str) -> Result<&'a Path> {
    g.out
        .as_deref()
        .ok_or_else(|| Error::Config(vec![format!("--out is required for {what}")]))
}

fn meta_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    out.with_file_name(name)
}

// ------------------------------------------------------------------ train

fn train(g: &GlobalArgs, lambda_ref: Option<f64>, steps: Option<usize>) -> Result<()> {
    let mut cfg = merged_config(g)?;
    if let Some(l) = lambda_ref {
        cfg.loss.lambda_ref = l;
    }
    if let Some(s) = steps {
        cfg.optim.steps = s;
    }
    if let Some(o) = &g.out {
        cfg.out = Some(o.clone());
    }
    if cfg.out.is_none() {
        cfg.out = Some(PathBuf::from("pixdec-run"));
    }
    cfg.validate()?;
    let (eval, last_loss) = match cfg.precision {
        Precision::F64 => {
            let o = run_training::<f64>(&cfg)?;
            (o.final_eval, o.losses.last().copied())
        }
        Precision::F32 => {
            let o = run_training::<f32>(&cfg)?;
            (o.final_eval, o.losses.last().copied())
        }
    };
    let out = cfg.out.clone().unwrap_or_default();
    let summary = json!({ "config": cfg, "final_loss": last_loss, "eval": eval });
    write_json(Some(&out.join("summary.json")), &summary)?;
    eprintln!(
        "trained {} steps: final loss {:.5}, held-out mean IoU {:.4}, overlap rate {:.5}; wrote {}",
        cfg.optim.steps,
        last_loss.unwrap_or(f64::NAN),
        eval.mean_iou,
        eval.overlap_rate,
        out.display()
    );
    Ok(())
}

// ------------------------------------------------------------------- eval

/// Tries the remote service first and answers with stub scores when it
/// cannot be reached.
struct Fallback {
    remote: RemoteScorer,
    stub: StubScorer,
}

impl Scorer for Fallback {
    fn raw_scores(&self, request: &ScoreRequest) -> Result<Vec<u32>> {
        match self.remote.raw_scores(request) {
            Err(Error::Transport(_)) => self.stub.raw_scores(request),
            other => other,
        }
    }
}

fn build_scorer(
    mode: ScorerMode,
    endpoint: Option<&str>,
    stub_score: u32,
    fallback: bool,
    timeout: u64,
) -> Result<Box<dyn Scorer>> {
    Ok(match mode {
        ScorerMode::StubConst => {
            if !(1..=10).contains(&stub_score) {
                return Err(Error::Config(vec![format!("--stub-score {stub_score} outside 1..=10")]));
            }
            Box::new(StubScorer {
                mode: StubMode::Constant(stub_score),
            })
        }
        ScorerMode::StubExact => Box::new(StubScorer {
            mode: StubMode::ExactMatch,
        }),
        ScorerMode::StubJaccard => Box::new(StubScorer {
            mode: StubMode::Jaccard,
        }),
        ScorerMode::Remote => {
            let endpoint = endpoint.ok_or_else(|| {
                Error::Config(vec![
                    "remote scoring needs --scorer-endpoint or SCORER_ENDPOINT".to_owned()
                ])
            })?;
            let remote = RemoteScorer::new(endpoint, Duration::from_secs(timeout));
            if fallback {
                Box::new(Fallback {
                    remote,
                    stub: StubScorer {
                        mode: StubMode::ExactMatch,
                    },
                })
            } else {
                Box::new(remote)
            }
        }
    })
}

fn case_from_record(image: &str, pred: Option<&MuseRecord>, gt: &MuseRecord) -> Result<AnswerCase> {
    let gts = gt.targets.iter().map(|t| t.mask.decode()).collect::<Result<Vec<_>>>()?;
    let gt_descriptions: Vec<String> = gt.targets.iter().map(|t| t.description.clone()).collect();
    let (preds, pred_names, template) = match pred {
        Some(p) => (
            p.targets.iter().map(|t| t.mask.decode()).collect::<Result<Vec<_>>>()?,
            p.targets.iter().map(|t| t.description.clone()).collect(),
            p.answer.clone(),
        ),
        None => (Vec::new(), Vec::new(), String::new()),
    };
    if let (Some(p), Some(g)) = (preds.first(), gts.first()) {
        if p.len() != g.len() {
            return Err(Error::Format(format!(
                "{image}: prediction and ground-truth masks differ in size"
            )));
        }
    }
    Ok(AnswerCase {
        image: image.to_owned(),
        preds,
        pred_names,
        template,
        gts,
        gt_descriptions,
    })
}

fn cases_from_model<S: Scalar>(dir: &Path, samples: &[(String, Sample)]) -> Result<Vec<AnswerCase>> {
    let (model, _) = load_checkpoint::<S>(dir)?;
    samples
        .par_iter()
        .map(|(name, s)| {
            let probs = model.predict(&s.image, &s.specs)?;
            let descs: Vec<&str> = s.descriptions.iter().map(String::as_str).collect();
            Ok(AnswerCase {
                image: name.clone(),
                preds: probs.iter().map(|p| binarize(p)).collect(),
                pred_names: s.descriptions.clone(),
                template: pixdec::data::convert::answer_text(&descs),
                gts: s.masks.clone(),
                gt_descriptions: s.descriptions.clone(),
            })
        })
        .collect()
}

fn eval(
    g: &GlobalArgs,
    checkpoint: Option<&Path>,
    predictions: Option<&Path>,
    data: Option<&Path>,
    scorer: &dyn Scorer,
    soft_product: bool,
    opts: Value,
) -> Result<()> {
    let (cases, config) = if let Some(pred_path) = predictions {
        let data = data.ok_or_else(|| Error::Config(vec!["--predictions needs --data".to_owned()]))?;
        let gts = load_records(data)?;
        let preds = load_records(pred_path)?;
        let mut by_image: BTreeMap<&str, &MuseRecord> = BTreeMap::new();
        for p in &preds {
            if by_image.insert(p.image.as_str(), p).is_some() {
                return Err(Error::Format(format!(
                    "{}: image {} appears twice",
                    pred_path.display(),
                    p.image
                )));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for gt in &gts {
            if !seen.insert(gt.image.as_str()) {
                return Err(Error::Format(format!(
                    "{}: image {} appears twice",
                    data.display(),
                    gt.image
                )));
            }
        }
        if let Some(extra) = by_image.keys().find(|k| !seen.contains(*k)) {
            return Err(Error::Format(format!("prediction for unknown image {extra}")));
        }
        let cases = gts
            .iter()
            .map(|gt| case_from_record(&gt.image, by_image.get(gt.image.as_str()).copied(), gt))
            .collect::<Result<Vec<_>>>()?;
        (cases, Value::Null)
    } else {
        let dir =
            checkpoint.ok_or_else(|| Error::Config(vec!["eval needs --checkpoint or --predictions".to_owned()]))?;
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::Io {
            path: mpath.clone(),
            source: e,
        })?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
        let mut cfg = manifest.config;
        if let Some(s) = g.seed {
            cfg.seed = s;
        }
        let samples: Vec<(String, Sample)> = match data {
            Some(p) => {
                let records = load_records(p)?;
                let loaded = load_samples(p)?;
                records.into_iter().map(|r| r.image).zip(loaded).collect()
            }
            None => gen_synthetic(&cfg.data.synth, cfg.data.val_scenes, held_out_seed(cfg.seed))?
                .iter()
                .enumerate()
                .map(|(i, s)| (format!("heldout_{i:05}"), Sample::from_scene(s)))
                .collect(),
        };
        let cases = match cfg.precision {
            Precision::F64 => cases_from_model::<f64>(dir, &samples)?,
            Precision::F32 => cases_from_model::<f32>(dir, &samples)?,
        };
        (cases, serde_json::to_value(&cfg)?)
    };
    let reports = cases
        .par_iter()
        .map(|c| evaluate_answer(c, scorer, soft_product))
        .collect::<Result<Vec<_>>>()?;
    let report = aggregate(reports, soft_product);
    if let Some(o) = &report.overall {
        eprintln!("overall: {} images, gIoU {:.4}, cIoU {:.4}", o.images, o.giou, o.ciou);
    }
    for (name, s) in [("few", &report.few), ("many", &report.many)] {
        if let Some(s) = s {
            eprintln!("{name}: {} images, gIoU {:.4}, cIoU {:.4}", s.images, s.giou, s.ciou);
        }
    }
    write_json(
        g.out.as_deref(),
        &json!({ "config": { "run": config, "eval": opts }, "report": report }),
    )
}

// --------------------------------------------------------------- data ops

fn convert(g: &GlobalArgs, input: &Path, k_min: usize, k_max: usize) -> Result<()> {
    let out = require_out(g, "convert")?;
    let seed = g.seed.unwrap_or(0);
    let anns = read_annotations(input)?;
    let (records, report) = convert_multi_referring(&anns, (k_min, k_max), seed)?;
    save_records(out, &records)?;
    let meta = json!({
        "config": { "input": input, "k_min": k_min, "k_max": k_max, "seed": seed },
        "report": report,
    });
    write_json(Some(&meta_path(out)), &meta)?;
    eprintln!(
        "converted {} images, skipped {}",
        report.converted,
        report.skipped.len()
    );
    Ok(())
}

fn filter(g: &GlobalArgs, input: &Path, min_mask_area: u64) -> Result<()> {
    let out = require_out(g, "filter")?;
    let rules = FilterRules { min_mask_area };
    let (kept, rejected) = filter_records(load_records(input)?, &rules);
    save_records(out, &kept)?;
    let meta = json!({
        "config": { "input": input, "rules": rules },
        "kept": kept.len(),
        "rejected": rejected,
    });
    write_json(Some(&meta_path(out)), &meta)?;
    eprintln!("kept {}, rejected {}", kept.len(), rejected.len());
    Ok(())
}

fn stats(g: &GlobalArgs, input: &Path, gnuplot: Option<&Path>) -> Result<()> {
    let records = load_records(input)?;
    let report = compute_statistics(&records)?;
    if let Some(p) = gnuplot {
        fs::write(p, report.to_gnuplot()).map_err(|e| Error::Io {
            path: p.to_owned(),
            source: e,
        })?;
    }
    write_json(
        g.out.as_deref(),
        &json!({ "config": { "input": input }, "stats": report }),
    )
}

fn generate(g: &GlobalArgs, count: usize) -> Result<()> {
    let cfg = merged_config(g)?;
    let out = require_out(g, "gen")?;
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::Io {
        path: images.clone(),
        source: e,
    })?;
    let scenes = gen_synthetic(&cfg.data.synth, count, cfg.seed)?;
    let records = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let name = format!("images/scene_{i:05}.png");
            s.save_png(&out.join(&name))?;
            s.to_record(&name)
        })
        .collect::<Result<Vec<_>>>()?;
    save_records(&out.join("records.jsonl"), &records)?;
    write_json(
        Some(&out.join("meta.json")),
        &json!({ "config": { "synth": cfg.data.synth, "seed": cfg.seed, "count": count } }),
    )?;
    eprintln!("wrote {count} scenes to {}", out.display());
    Ok(())
}

// ------------------------------------------------------------------ flops

fn flops(g: &GlobalArgs, targets: usize, image_size: Option<usize>) -> Result<()> {
    let mut cfg = merged_config(g)?;
    if let Some(n) = image_size {
        cfg.model.image_size = n;
        cfg.data.synth.image_size = n;
        cfg.validate()?;
    }
    let dcfg = cfg.model.decoder_config();
    let breakdown = flops_breakdown(&dcfg, targets);
    let measured = measured_muladds(&dcfg, targets, cfg.seed)?;
    let estimate = breakdown.total();
    let gap = if measured == 0 {
        0.0
    } else {
        (estimate as f64 - measured as f64).abs() / measured as f64
    };
    eprintln!("decoder mul-adds: estimate {estimate}, measured {measured}, relative gap {gap:.2e}");
    write_json(
        g.out.as_deref(),
        &json!({
            "config": { "model": cfg.model, "targets": targets },
            "estimate": estimate,
            "breakdown": breakdown,
            "measured": measured,
            "relative_gap": gap,
        }),
    )
}
