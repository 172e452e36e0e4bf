//! Toy-scale training: run configuration, AdamW with warmup/decay, the
//! training loop, checkpoints and held-out mask metrics.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::synth::{gen_synthetic, load_png, SynthConfig, SyntheticScene};
use crate::data::{load_records, MuseRecord};
use crate::encoder::TargetSpec;
use crate::error::{Error, Result};
use crate::losses::{total_mask_loss, LossWeights, BINARY_THRESHOLD};
use crate::model::{ModelConfig, PixelModel};
use crate::numeric::{io as tensor_io, Scalar, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Scenes per micro-batch.
    pub batch_size: usize,
    pub warmup_steps: usize,
    /// Micro-batches accumulated into each optimizer step.
    pub grad_accum: usize,
    /// Optimizer steps.
    pub steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3.0e-4,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            batch_size: 16,
            warmup_steps: 100,
            grad_accum: 10,
            steps: 2000,
        }
    }
}

impl OptimConfig {
    fn errors(&self) -> Vec<String> {
        let mut e = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            e.push(format!("optim.lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            e.push(format!("optim.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        for (name, b) in [("optim.beta1", self.beta1), ("optim.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                e.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            e.push(format!("optim.eps must be positive, got {}", self.eps));
        }
        if self.batch_size == 0 {
            e.push("optim.batch_size must be positive".to_owned());
        }
        if self.grad_accum == 0 {
            e.push("optim.grad_accum must be positive".to_owned());
        }
        if self.steps == 0 {
            e.push("optim.steps must be positive".to_owned());
        }
        e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub synth: SynthConfig,
    /// JSONL records to train on instead of synthetic scenes; image paths
    /// resolve against the file's directory.
    pub train_records: Option<PathBuf>,
    pub val_records: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_scenes: 2000,
            val_scenes: 200,
            synth: SynthConfig::default(),
            train_records: None,
            val_records: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub seed: u64,
    pub precision: Precision,
    /// Steps between held-out evaluations written to the log; 0 evaluates only at the end.
    pub eval_every: usize,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            seed: 0,
            precision: Precision::F64,
            eval_every: 0,
            out: None,
        }
    }
}

impl RunConfig {
    /// Single-core preset: the default optimizer settings with 8-scene
    /// batches, no accumulation and 800 steps.
    pub fn toy() -> Self {
        RunConfig {
            optim: OptimConfig {
                batch_size: 8,
                grad_accum: 1,
                steps: 800,
                ..OptimConfig::default()
            },
            ..RunConfig::default()
        }
    }

    /// Parses strict JSON; unknown keys anywhere are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Every problem found, one message per field.
    pub fn validate(&self) -> Result<()> {
        let mut e = self.model.errors();
        if let Err(l) = self.loss.validate() {
            e.extend(l);
        }
        e.extend(self.optim.errors());
        if let Err(Error::Config(s)) = self.data.synth.validate() {
            e.extend(s);
        }
        if self.data.train_records.is_none() {
            if self.data.train_scenes == 0 {
                e.push("data.train_scenes must be positive".to_owned());
            }
            if self.data.synth.image_size != self.model.image_size {
                e.push(format!(
                    "data.synth.image_size {} differs from model.image_size {}",
                    self.data.synth.image_size, self.model.image_size
                ));
            }
        }
        if self.model.in_channels != 3 {
            e.push("model.in_channels must be 3 for RGB scenes".to_owned());
        }
        if e.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(e))
        }
    }
}

/// One training or evaluation example: an RGB image, target specs and
/// row-major binary masks in target order.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Vec<f32>,
    pub descriptions: Vec<String>,
    pub specs: Vec<TargetSpec>,
    pub masks: Vec<Vec<u8>>,
}

impl Sample {
    pub fn from_scene(scene: &SyntheticScene) -> Self {
        let descriptions: Vec<String> = scene.instances.iter().map(|i| i.description.clone()).collect();
        Sample {
            image: scene.image.clone(),
            specs: descriptions
                .iter()
                .enumerate()
                .map(|(k, d)| TargetSpec::from_description(k, d))
                .collect(),
            descriptions,
            masks: scene.instances.iter().map(|i| i.mask.clone()).collect(),
        }
    }

    /// Loads the record's PNG (relative paths resolve against `base`).
    pub fn from_record(record: &MuseRecord, base: &Path) -> Result<Self> {
        let path = base.join(&record.image);
        let (h, w, image) = load_png(&path)?;
        if (h, w) != (record.height as usize, record.width as usize) {
            return Err(Error::Format(format!(
                "{}: image is {h}x{w}, record says {}x{}",
                path.display(),
                record.height,
                record.width
            )));
        }
        let masks = record
            .targets
            .iter()
            .map(|t| t.mask.decode())
            .collect::<Result<Vec<_>>>()?;
        let descriptions: Vec<String> = record.targets.iter().map(|t| t.description.clone()).collect();
        Ok(Sample {
            image,
            specs: descriptions
                .iter()
                .enumerate()
                .map(|(k, d)| TargetSpec::from_description(k, d))
                .collect(),
            descriptions,
            masks,
        })
    }
}

pub fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    let records = load_records(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    records.iter().map(|r| Sample::from_record(r, base)).collect()
}

/// Training and held-out samples named by the data config.
pub fn prepare_data(config: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let d = &config.data;
    let train = match &d.train_records {
        Some(p) => load_samples(p)?,
        None => gen_synthetic(&d.synth, d.train_scenes, config.seed)?
            .iter()
            .map(Sample::from_scene)
            .collect(),
    };
    let val = match &d.val_records {
        Some(p) => load_samples(p)?,
        None => gen_synthetic(&d.synth, d.val_scenes, held_out_seed(config.seed))?
            .iter()
            .map(Sample::from_scene)
            .collect(),
    };
    let n = config.model.image_size;
    for s in train.iter().chain(&val) {
        if s.image.len() != 3 * n * n || s.masks.iter().any(|m| m.len() != n * n) {
            return Err(Error::Format(format!("sample is not {n}x{n} RGB with matching masks")));
        }
        if s.masks.is_empty() {
            return Err(Error::Format("sample without targets".to_owned()));
        }
    }
    Ok((train, val))
}

/// Held-out scenes never share a generator stream with training scenes.
pub fn held_out_seed(seed: u64) -> u64 {
    seed ^ 0x5ee_d0f4_e1d0_u64
}

/// Linear warmup from 0 to the base rate, then linear decay to 0 at the last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupDecay {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
}

impl WarmupDecay {
    /// Rate for optimizer step `t` (0-based).
    pub fn rate(&self, t: usize) -> f64 {
        if t < self.warmup {
            return self.base * (t + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1) as f64;
        let left = self.total.saturating_sub(t) as f64;
        self.base * (left / span).clamp(0.0, 1.0)
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<S: Scalar = f64> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(o: &OptimConfig) -> Self {
        AdamW {
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut crate::nn::ParamStore<S>, lr: f64) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        if self.m.is_empty() {
            self.m = ids.iter().map(|&i| vec![S::zero(); store.get(i).numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let decay = S::lit(1.0 - lr * self.weight_decay);
        let step = S::lit(lr / c1);
        let c2 = S::lit(c2);
        let eps = S::lit(self.eps);
        for (slot, &id) in ids.iter().enumerate() {
            let tensor = store.get_mut(id);
            let Some(grad) = tensor.grad().map(<[S]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = b1 * m[i] + (S::one() - b1) * g;
                v[i] = b2 * v[i] + (S::one() - b2) * g * g;
                let denom = (v[i] / c2).sqrt() + eps;
                *p = *p * decay - step * m[i] / denom;
            }
        }
        Ok(())
    }
}

/// Held-out mask quality of the fused predictions.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean over all targets of the binarized-mask IoU.
    pub mean_iou: f64,
    /// Share of pixels claimed by two or more binarized predictions,
    /// pooled over images with at least two targets.
    pub overlap_rate: f64,
    pub targets: usize,
    pub multi_target_images: usize,
}

/// IoU of two binary masks; two empty masks count as a perfect match.
pub fn mask_iou(pred: &[u8], gt: &[u8]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += usize::from(p != 0 && g != 0);
        union += usize::from(p != 0 || g != 0);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn binarize(probs: &[f64]) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p > BINARY_THRESHOLD)).collect()
}

pub fn evaluate<S: Scalar>(model: &PixelModel<S>, samples: &[Sample]) -> Result<EvalMetrics> {
    let mut iou_sum = 0.0;
    let mut targets = 0;
    let (mut overlap, mut pixels, mut multi) = (0usize, 0usize, 0usize);
    for s in samples {
        let probs = model.predict(&s.image, &s.specs)?;
        let bins: Vec<Vec<u8>> = probs.iter().map(|p| binarize(p)).collect();
        for (b, g) in bins.iter().zip(&s.masks) {
            iou_sum += mask_iou(b, g);
            targets += 1;
        }
        if bins.len() >= 2 {
            multi += 1;
            let n = bins[0].len();
            pixels += n;
            overlap += (0..n)
                .filter(|&i| bins.iter().filter(|b| b[i] != 0).count() >= 2)
                .count();
        }
    }
    Ok(EvalMetrics {
        mean_iou: if targets == 0 { 0.0 } else { iou_sum / targets as f64 },
        overlap_rate: if pixels == 0 {
            0.0
        } else {
            overlap as f64 / pixels as f64
        },
        targets,
        multi_target_images: multi,
    })
}

/// Loss of one sample, scaled by `weight`, with gradients accumulated into
/// the model's store. Returns the unscaled loss.
pub fn accumulate_sample<S: Scalar>(
    model: &mut PixelModel<S>,
    sample: &Sample,
    loss_weights: &LossWeights,
    weight: f64,
) -> Result<f64> {
    let n = model.config.image_size;
    let mut tape = Tape::new();
    let bind = model.store.bind(&mut tape);
    let out = model.forward(&mut tape, &bind, &sample.image, &sample.specs)?;
    let mut preds = Vec::with_capacity(out.len());
    let mut targets = Vec::with_capacity(out.len());
    for (m, gt) in out.iter().zip(&sample.masks) {
        preds.push(tape.sigmoid(m.fused)?);
        targets.push(tape.constant(&[n, n], gt.iter().map(|&v| S::lit(f64::from(v))).collect())?);
    }
    let loss = total_mask_loss(&mut tape, &preds, &targets, loss_weights)?;
    let value = tape.value(loss)[0].as_f64();
    let scaled = tape.scale(loss, S::lit(weight))?;
    tape.backward(scaled)?;
    model.store.accumulate(&tape, &bind)?;
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub step: usize,
    pub eval: EvalMetrics,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S: Scalar = f64> {
    pub model: PixelModel<S>,
    pub losses: Vec<f64>,
    pub evals: Vec<EvalLog>,
    pub final_eval: EvalMetrics,
}

/// Runs a full training job on prepared data. `log` receives one JSON line
/// per step after a header echoing the configuration.
pub fn train_on<S: Scalar>(
    config: &RunConfig,
    train: &[Sample],
    val: &[Sample],
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("no training samples".to_owned()));
    }
    let mut model = PixelModel::<S>::new(config.model.clone(), config.seed)?;
    let o = &config.optim;
    let mut opt = AdamW::<S>::new(o);
    let sched = WarmupDecay {
        base: o.lr,
        warmup: o.warmup_steps,
        total: o.steps,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let per_step = o.batch_size * o.grad_accum;
    let weight = 1.0 / per_step as f64;
    let write_line = |log: &mut Option<&mut dyn Write>, v: serde_json::Value| -> Result<()> {
        if let Some(w) = log.as_mut() {
            writeln!(w, "{v}").map_err(|e| Error::io("<training log>", e))?;
        }
        Ok(())
    };
    write_line(&mut log, serde_json::json!({ "config": config }))?;
    let mut losses = Vec::with_capacity(o.steps);
    let mut evals = Vec::new();
    for step in 0..o.steps {
        model.store.zero_grads();
        let mut total = 0.0;
        for _ in 0..per_step {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let sample = &train[order[cursor]];
            cursor += 1;
            total += accumulate_sample(&mut model, sample, &config.loss, weight).map_err(|e| diverged(step, e))?;
        }
        let loss = total / per_step as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss is {loss}"),
            });
        }
        let lr = sched.rate(step);
        opt.step(&mut model.store, lr)?;
        losses.push(loss);
        write_line(&mut log, serde_json::to_value(StepLog { step, loss, lr })?)?;
        if config.eval_every > 0 && (step + 1) % config.eval_every == 0 && step + 1 < o.steps {
            let e = EvalLog {
                step: step + 1,
                eval: evaluate(&model, val)?,
            };
            write_line(&mut log, serde_json::to_value(&e)?)?;
            evals.push(e);
        }
    }
    let final_eval = evaluate(&model, val)?;
    let e = EvalLog {
        step: o.steps,
        eval: final_eval,
    };
    write_line(&mut log, serde_json::to_value(&e)?)?;
    evals.push(e);
    Ok(TrainOutcome {
        model,
        losses,
        evals,
        final_eval,
    })
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::Numeric { op, detail } => Error::Diverged {
            step,
            detail: format!("{op}: {detail}"),
        },
        other => other,
    }
}

/// Prepares data, trains, and writes `train_log.jsonl` plus a checkpoint
/// under `config.out` when set.
pub fn run_training<S: Scalar>(config: &RunConfig) -> Result<TrainOutcome<S>> {
    config.validate()?;
    let (train, val) = prepare_data(config)?;
    let Some(out) = &config.out else {
        return train_on(config, &train, &val, None);
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join("train_log.jsonl");
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut w = BufWriter::new(file);
    let outcome = train_on(config, &train, &val, Some(&mut w))?;
    w.flush().map_err(|e| Error::io(&log_path, e))?;
    save_checkpoint(&outcome.model, config, &out.join("checkpoint"))?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: RunConfig,
    pub params: Vec<ParamEntry>,
}

/// Writes `dir/params/*.bin` and `dir/manifest.json` into a sibling temp
/// directory, then renames it into place.
pub fn save_checkpoint<S: Scalar>(model: &PixelModel<S>, config: &RunConfig, dir: &Path) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Contract(format!("checkpoint path {} has no file name", dir.display())))?;
    let tmp = dir.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    let params_dir = tmp.join("params");
    fs::create_dir_all(&params_dir).map_err(|e| Error::io(&params_dir, e))?;
    let mut params = Vec::new();
    for (i, (pname, t)) in model.store.iter().enumerate() {
        let file = format!("{i:04}.bin");
        tensor_io::save_tensor(t, &params_dir.join(&file))?;
        params.push(ParamEntry {
            name: pname.to_owned(),
            shape: t.shape().to_vec(),
            file: format!("params/{file}"),
        });
    }
    let manifest = Manifest {
        config: config.clone(),
        params,
    };
    let mpath = tmp.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

/// Rebuilds a model from a checkpoint directory.
pub fn load_checkpoint<S: Scalar>(dir: &Path) -> Result<(PixelModel<S>, RunConfig)> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    let mut model = PixelModel::<S>::new(manifest.config.model.clone(), manifest.config.seed)?;
    if manifest.params.len() != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model expects {}",
            manifest.params.len(),
            model.store.len()
        )));
    }
    for entry in &manifest.params {
        let id = model
            .store
            .id(&entry.name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {}", entry.name)))?;
        let t: Tensor<S> = tensor_io::load_tensor(&dir.join(&entry.file))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!(
                "{}: shape {:?} vs manifest {:?}",
                entry.name,
                t.shape(),
                entry.shape
            )));
        }
        model.store.set(id, t)?;
    }
    Ok((model, manifest.config))
}
