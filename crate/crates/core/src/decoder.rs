//! Multi-scale pixel decoder: one attention block per scale, sigmoid feature
//! modulation from the deeper scale's mask, and a softmax-weighted fusion of
//! the per-scale masks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::TOKEN_INIT_STD;
use crate::encoder::{sinusoidal_position_encoding, MultiScaleFeatures};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Attention, Bindings, Mlp, Norm, ParamId, ParamStore};
use crate::numeric::{Scalar, Tape, Tensor, Var};

/// Spatial upscale between a level's features and its mask.
pub const UPSCALE: usize = 4;
/// Initial weights of each mask head's last layer are scaled by this, so
/// untrained masks start close to probability 0.5.
pub const MASK_HEAD_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Number of scales `L`.
    pub levels: usize,
    /// Channel width `d`.
    pub d: usize,
    /// Learnable output tokens `N_out`.
    pub n_out: usize,
    pub mlp_width: usize,
    /// `(H_ℓ, W_ℓ)` per level, finest first.
    pub sizes: Vec<(usize, usize)>,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.levels == 0 {
            errs.push("decoder.levels must be at least 1".to_owned());
        }
        if self.d == 0 {
            errs.push("decoder.d must be positive".to_owned());
        }
        if self.n_out == 0 {
            errs.push("decoder.n_out must be at least 1".to_owned());
        }
        if self.mlp_width == 0 {
            errs.push("decoder.mlp_width must be positive".to_owned());
        }
        if self.sizes.len() != self.levels {
            errs.push(format!(
                "decoder.sizes has {} entries for {} levels",
                self.sizes.len(),
                self.levels
            ));
        }
        if self.sizes.iter().any(|&(h, w)| h == 0 || w == 0) {
            errs.push("decoder.sizes entries must be positive".to_owned());
        }
        if self.sizes.windows(2).any(|p| p[1].0 > p[0].0 || p[1].1 > p[0].1) {
            errs.push("decoder.sizes must be non-increasing with depth".to_owned());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Grid of the fused mask: the finest level upscaled.
    pub fn mask_size(&self) -> (usize, usize) {
        let (h, w) = self.sizes[0];
        (UPSCALE * h, UPSCALE * w)
    }
}

/// Per-target decoder output.
#[derive(Debug, Clone)]
pub struct MaskLogits {
    /// `m^ℓ` at `(4H_ℓ, 4W_ℓ)`, finest first.
    pub per_scale: Vec<Var>,
    /// Fused logits on the finest mask grid.
    pub fused: Var,
    /// Normalized fusion weights, shape `(1, L)`.
    pub gamma: Var,
}

#[derive(Debug, Clone)]
struct ScaleBlock {
    self_attn: Attention,
    norm1: Norm,
    token_to_image: Attention,
    mlp: Mlp,
    norm2: Norm,
    image_to_token: Attention,
    norm3: Norm,
    out_mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct PixelDecoder {
    config: DecoderConfig,
    out_token: ParamId,
    lev_token: ParamId,
    gamma_logits: ParamId,
    blocks: Vec<ScaleBlock>,
    position: Vec<Vec<f64>>,
}

impl PixelDecoder {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        config: DecoderConfig,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let out_token = store.insert(
            "decoder.out_token",
            normal_tensor(rng, &[config.n_out, d], TOKEN_INIT_STD),
        )?;
        let lev_token = store.insert(
            "decoder.lev_token",
            normal_tensor(rng, &[config.levels, d], TOKEN_INIT_STD),
        )?;
        let mut blocks = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            let p = format!("decoder.scale{l}");
            blocks.push(ScaleBlock {
                self_attn: Attention::new(store, rng, &format!("{p}.self_attn"), d)?,
                norm1: Norm::new(store, &format!("{p}.norm1"), d)?,
                token_to_image: Attention::new(store, rng, &format!("{p}.token_to_image"), d)?,
                mlp: Mlp::new(store, rng, &format!("{p}.mlp"), d, config.mlp_width, d)?,
                norm2: Norm::new(store, &format!("{p}.norm2"), d)?,
                image_to_token: Attention::new(store, rng, &format!("{p}.image_to_token"), d)?,
                norm3: Norm::new(store, &format!("{p}.norm3"), d)?,
                out_mlp: Mlp::new(store, rng, &format!("{p}.out_mlp"), d, config.mlp_width, d)?,
            });
            let w = blocks[l].out_mlp.out.weight;
            let shrunk = store.get(w).map(|v| v * S::lit(MASK_HEAD_INIT_SCALE));
            store.set(w, shrunk)?;
        }
        let gamma_logits = store.insert("decoder.gamma_logits", Tensor::zeros(&[config.levels]))?;
        let position = config
            .sizes
            .iter()
            .map(|&(h, w)| sinusoidal_position_encoding(h, w, d))
            .collect();
        Ok(PixelDecoder {
            config,
            out_token,
            lev_token,
            gamma_logits,
            blocks,
            position,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn gamma_logits(&self) -> ParamId {
        self.gamma_logits
    }

    /// Last layer of the per-scale token MLP that produces mask weights.
    pub fn out_projection(&self, level: usize) -> &crate::nn::Linear {
        &self.blocks[level].out_mlp.out
    }

    /// Current normalized fusion weights, computed outside any tape.
    pub fn fusion_weights<S: Scalar>(&self, store: &ParamStore<S>) -> Vec<f64> {
        softmax_f64(
            &store
                .get(self.gamma_logits)
                .data()
                .iter()
                .map(|v| v.as_f64())
                .collect::<Vec<_>>(),
        )
    }

    /// One scale: `h` is `(d)`, `f` is `(d, H, W)`; returns the mask logits at
    /// `(4H, 4W)` and the updated features at `(d, H, W)`.
    pub fn attention_block<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &Bindings,
        h: Var,
        f: Var,
        level: usize,
    ) -> Result<(Var, Var)> {
        let d = self.config.d;
        if level >= self.config.levels {
            return Err(Error::dim(
                "attention_block",
                format!("level {level} out of range for {} scales", self.config.levels),
            ));
        }
        if tape.shape(h) != [d] {
            return Err(Error::dim(
                "attention_block",
                format!("token has shape {:?}, expected [{d}]", tape.shape(h)),
            ));
        }
        let fs = tape.shape(f).to_vec();
        if fs.len() != 3 || fs[0] != d {
            return Err(Error::dim(
                "attention_block",
                format!("features have shape {fs:?}, expected [{d}, H, W]"),
            ));
        }
        let (fh, fw) = (fs[1], fs[2]);
        let p = fh * fw;
        let block = &self.blocks[level];

        let h_row = tape.reshape(h, &[1, d])?;
        let tokens = tape.concat(&[bind[self.out_token], h_row], 0)?;
        let lev = tape.narrow(bind[self.lev_token], 0, level, 1)?;
        let lev = tape.reshape(lev, &[d])?;
        let tokens = tape.add_row(tokens, lev)?;

        let a = block.self_attn.forward(tape, bind, tokens, tokens, tokens)?;
        let tokens = tape.add(tokens, a)?;
        let tokens = block.norm1.forward(tape, bind, tokens)?;

        let flat = tape.reshape(f, &[d, p])?;
        let pixels = tape.transpose(flat)?;
        let pe = if (fh, fw) == self.config.sizes[level] {
            self.position[level].iter().map(|&v| S::lit(v)).collect()
        } else {
            sinusoidal_position_encoding(fh, fw, d)
                .into_iter()
                .map(S::lit)
                .collect()
        };
        let pe = tape.constant(&[p, d], pe)?;
        let key = tape.add(pixels, pe)?;

        let a = block.token_to_image.forward(tape, bind, tokens, key, pixels)?;
        let m = block.mlp.forward(tape, bind, tokens)?;
        let tokens = tape.add(tokens, a)?;
        let tokens = tape.add(tokens, m)?;
        let tokens = block.norm2.forward(tape, bind, tokens)?;

        let a = block.image_to_token.forward(tape, bind, key, tokens, tokens)?;
        let pixels = tape.add(pixels, a)?;
        let pixels = block.norm3.forward(tape, bind, pixels)?;
        let f_new = tape.transpose(pixels)?;
        let f_new = tape.reshape(f_new, &[d, fh, fw])?;

        let (mh, mw) = (UPSCALE * fh, UPSCALE * fw);
        let f_up = tape.resize_bilinear(f_new, mh, mw)?;
        let f_up = tape.reshape(f_up, &[d, mh * mw])?;
        let weights = block.out_mlp.forward(tape, bind, tokens)?;
        let scores = tape.matmul(weights, f_up)?;
        let mask = tape.mean(scores, 0)?;
        let mask = tape.reshape(mask, &[mh, mw])?;
        Ok((mask, f_new))
    }

    /// `f ⊙ (σ(m̃) + 1)` with `m̃` the previous mask resized to `f`'s grid.
    pub fn feature_modulate<S: Scalar>(&self, tape: &mut Tape<S>, f: Var, m_prev: Var) -> Result<Var> {
        feature_modulate(tape, f, m_prev)
    }

    /// Decodes every target. `h_all` is `(K, L, d)`; features are the
    /// projected levels, finest first.
    pub fn decode<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &Bindings,
        h_all: Var,
        features: &MultiScaleFeatures,
    ) -> Result<Vec<MaskLogits>> {
        let cfg = &self.config;
        let hs = tape.shape(h_all).to_vec();
        if hs.len() != 3 || hs[1] != cfg.levels || hs[2] != cfg.d {
            return Err(Error::dim(
                "decode",
                format!("embeddings {hs:?}, expected [K, {}, {}]", cfg.levels, cfg.d),
            ));
        }
        if features.len() != cfg.levels {
            return Err(Error::dim(
                "decode",
                format!("{} feature levels for {} scales", features.len(), cfg.levels),
            ));
        }
        let finest = tape.shape(features.levels[0]).to_vec();
        let (mh, mw) = (UPSCALE * finest[1], UPSCALE * finest[2]);
        let gl = tape.reshape(bind[self.gamma_logits], &[1, cfg.levels])?;
        let gamma = tape.softmax(gl, 1)?;

        let mut out = Vec::with_capacity(hs[0]);
        for k in 0..hs[0] {
            let hk = tape.narrow(h_all, 0, k, 1)?;
            let mut per_scale = vec![None; cfg.levels];
            let mut prev: Option<Var> = None;
            for l in (0..cfg.levels).rev() {
                let h = tape.narrow(hk, 1, l, 1)?;
                let h = tape.reshape(h, &[cfg.d])?;
                let mut f = features.levels[l];
                if let Some(m) = prev {
                    f = feature_modulate(tape, f, m)?;
                }
                let (mask, _) = self.attention_block(tape, bind, h, f, l)?;
                per_scale[l] = Some(mask);
                prev = Some(mask);
            }
            let per_scale: Vec<Var> = per_scale.into_iter().map(Option::unwrap).collect();
            let mut rows = Vec::with_capacity(cfg.levels);
            for &m in &per_scale {
                let m = if tape.shape(m) == [mh, mw] {
                    m
                } else {
                    tape.resize_bilinear(m, mh, mw)?
                };
                rows.push(tape.reshape(m, &[1, mh * mw])?);
            }
            let stacked = tape.concat(&rows, 0)?;
            let fused = tape.matmul(gamma, stacked)?;
            let fused = tape.reshape(fused, &[mh, mw])?;
            out.push(MaskLogits {
                per_scale,
                fused,
                gamma,
            });
        }
        Ok(out)
    }
}

/// `f: (d, H, W)`, `m_prev: (h, w)` → `f ⊙ (σ(resize(m_prev, H, W)) + 1)`.
pub fn feature_modulate<S: Scalar>(tape: &mut Tape<S>, f: Var, m_prev: Var) -> Result<Var> {
    let fs = tape.shape(f).to_vec();
    if fs.len() != 3 {
        return Err(Error::dim(
            "feature_modulate",
            format!("features {fs:?} are not (d, H, W)"),
        ));
    }
    if tape.shape(m_prev).len() != 2 {
        return Err(Error::dim(
            "feature_modulate",
            format!("mask {:?} is not (H, W)", tape.shape(m_prev)),
        ));
    }
    let m = tape.resize_bilinear(m_prev, fs[1], fs[2])?;
    let s = tape.sigmoid(m)?;
    let mult = tape.add_scalar(s, S::one())?;
    tape.mul_map(f, mult)
}

fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Closed-form mul-add count of [`PixelDecoder::decode`], split by component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FlopsBreakdown {
    pub self_attention: u64,
    /// Query/output projections of token→image and key/value projections of
    /// image→token attention; independent of the pixel count.
    pub cross_attention_token_side: u64,
    /// Every cross-attention term that scales with the pixel count.
    pub cross_attention_feature_side: u64,
    pub mlp: u64,
    pub upscale: u64,
    pub mask_product: u64,
    pub modulation: u64,
    pub fusion: u64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u64 {
        self.self_attention
            + self.cross_attention_token_side
            + self.cross_attention_feature_side
            + self.mlp
            + self.upscale
            + self.mask_product
            + self.modulation
            + self.fusion
    }
}

/// Mul-adds (matrix products and bilinear taps) to decode `targets` targets.
pub fn flops_breakdown(config: &DecoderConfig, targets: usize) -> FlopsBreakdown {
    let mut b = FlopsBreakdown::default();
    if targets == 0 {
        return b;
    }
    let k = targets as u64;
    let d = config.d as u64;
    let t = config.n_out as u64 + 1;
    let m = config.mlp_width as u64;
    let up = (UPSCALE * UPSCALE) as u64;
    let (h0, w0) = config.sizes[0];
    let fine = up * (h0 * w0) as u64;
    for (l, &(h, w)) in config.sizes.iter().enumerate() {
        let p = (h * w) as u64;
        b.self_attention += 4 * t * d * d + 2 * t * t * d;
        b.cross_attention_token_side += 4 * t * d * d;
        b.cross_attention_feature_side += 4 * p * d * d + 4 * t * p * d;
        b.mlp += 4 * t * d * m;
        b.upscale += 4 * d * up * p;
        b.mask_product += t * d * up * p;
        if l + 1 < config.levels {
            b.modulation += 4 * p;
        }
        if (UPSCALE * h, UPSCALE * w) != (UPSCALE * h0, UPSCALE * w0) {
            b.fusion += 4 * fine;
        }
    }
    b.fusion += config.levels as u64 * fine;
    for v in [
        &mut b.self_attention,
        &mut b.cross_attention_token_side,
        &mut b.cross_attention_feature_side,
        &mut b.mlp,
        &mut b.upscale,
        &mut b.mask_product,
        &mut b.modulation,
        &mut b.fusion,
    ] {
        *v *= k;
    }
    b
}

pub fn flops_estimate(config: &DecoderConfig, targets: usize) -> u64 {
    flops_breakdown(config, targets).total()
}

/// Mul-adds counted by the tape while decoding `targets` targets with
/// randomly initialized weights and constant inputs.
pub fn measured_muladds(config: &DecoderConfig, targets: usize, seed: u64) -> Result<u64> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let dec = PixelDecoder::new(&mut store, &mut rng, config.clone())?;
    if targets == 0 {
        return Ok(0);
    }
    let mut tape = Tape::new();
    let bind = store.bind_detached(&mut tape);
    let h = tape.constant(
        &[targets, config.levels, config.d],
        vec![0.1; targets * config.levels * config.d],
    )?;
    let levels = config
        .sizes
        .iter()
        .map(|&(a, b)| tape.constant(&[config.d, a, b], vec![0.1; config.d * a * b]))
        .collect::<Result<Vec<_>>>()?;
    tape.reset_muladd_count();
    dec.decode(&mut tape, &bind, h, &MultiScaleFeatures { levels })?;
    Ok(tape.muladd_count())
}
