//! Stand-ins for the frozen vision backbone and for the language model's
//! hidden states.
//!
//! [`VisionEncoder`] is a stack of strided patch convolutions producing one
//! feature map per scale, followed by a per-scale affine projection to the
//! decoder width. [`TargetEmbedder`] maps a target's attribute vector plus the
//! pooled image feature to one hidden embedding per codebook token.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::SegCodebook;
use crate::error::{Error, Result};
use crate::nn::{Bindings, Linear, ParamStore};
use crate::numeric::{Scalar, Tape, Var};

/// Feature maps `(C, H_ℓ, W_ℓ)` ordered finest first; the last level is the
/// deepest, global one.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleFeatures {
    pub levels: Vec<Var>,
}

impl MultiScaleFeatures {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn deepest(&self) -> Var {
        *self.levels.last().expect("at least one level")
    }

    /// `(channels, height, width)` of each level.
    pub fn shapes<S: Scalar>(&self, tape: &Tape<S>) -> Vec<[usize; 3]> {
        self.levels
            .iter()
            .map(|&v| {
                let s = tape.shape(v);
                [s[0], s[1], s[2]]
            })
            .collect()
    }
}

/// Words recognised in target descriptions; the attribute vector is their
/// multi-hot indicator.
pub const ATTRIBUTE_WORDS: &[&str] = &[
    "red",
    "green",
    "blue",
    "yellow",
    "magenta",
    "cyan",
    "rectangle",
    "ellipse",
    "top",
    "bottom",
    "left",
    "right",
    "center",
];

/// Query for one target: a fixed-width attribute vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub target_id: usize,
    pub attributes: Vec<f64>,
}

impl TargetSpec {
    pub fn new(target_id: usize, attributes: Vec<f64>) -> Self {
        TargetSpec { target_id, attributes }
    }

    /// Multi-hot over [`ATTRIBUTE_WORDS`]; unknown words are ignored.
    pub fn from_description(target_id: usize, text: &str) -> Self {
        let mut attributes = vec![0.0; ATTRIBUTE_WORDS.len()];
        for word in text.split(|c: char| !c.is_alphanumeric()) {
            let word = word.to_ascii_lowercase();
            if let Some(i) = ATTRIBUTE_WORDS.iter().position(|&w| w == word) {
                attributes[i] = 1.0;
            }
        }
        TargetSpec { target_id, attributes }
    }
}

#[derive(Debug, Clone)]
struct Stage {
    patch: usize,
    conv: Linear,
    proj: Linear,
}

/// Strided patch-convolution backbone plus the vision-to-decoder projection.
#[derive(Debug, Clone)]
pub struct VisionEncoder {
    strides: Vec<usize>,
    in_channels: usize,
    d_enc: usize,
    d: usize,
    stages: Vec<Stage>,
    to_decoder: Vec<Linear>,
}

impl VisionEncoder {
    /// `strides` are cumulative per level (e.g. `[4, 8]`); each must divide the next.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        in_channels: usize,
        strides: &[usize],
        d_enc: usize,
        d: usize,
    ) -> Result<Self> {
        if strides.is_empty() {
            return Err(Error::Contract("encoder needs at least one level".into()));
        }
        let mut stages = Vec::with_capacity(strides.len());
        let mut prev = 1;
        let mut c_in = in_channels;
        for (l, &s) in strides.iter().enumerate() {
            if s == 0 || s % prev != 0 || s == prev {
                return Err(Error::Contract(format!(
                    "stride schedule {strides:?} must be strictly increasing multiples"
                )));
            }
            let patch = s / prev;
            stages.push(Stage {
                patch,
                conv: Linear::new(
                    store,
                    rng,
                    &format!("encoder.stage{l}.conv"),
                    c_in * patch * patch,
                    d_enc,
                )?,
                proj: Linear::new(store, rng, &format!("encoder.stage{l}.proj"), d_enc, d_enc)?,
            });
            prev = s;
            c_in = d_enc;
        }
        let to_decoder = (0..strides.len())
            .map(|l| Linear::new(store, rng, &format!("encoder.to_decoder{l}"), d_enc, d))
            .collect::<Result<_>>()?;
        Ok(VisionEncoder {
            strides: strides.to_vec(),
            in_channels,
            d_enc,
            d,
            stages,
            to_decoder,
        })
    }

    pub fn levels(&self) -> usize {
        self.strides.len()
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Weight of the last affine layer of stage `level`.
    pub fn final_projection(&self, level: usize) -> &Linear {
        &self.stages[level].proj
    }

    pub fn decoder_projection(&self, level: usize) -> &Linear {
        &self.to_decoder[level]
    }

    /// `(C_in, H, W)` image → per-level `(d_enc, H/s_ℓ, W/s_ℓ)` features.
    pub fn encode_multiscale<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &Bindings,
        image: Var,
    ) -> Result<MultiScaleFeatures> {
        let shape = tape.shape(image).to_vec();
        let [c, h, w] = shape[..] else {
            return Err(Error::dim(
                "encode_multiscale",
                format!("image must be (C,H,W), got {shape:?}"),
            ));
        };
        if c != self.in_channels {
            return Err(Error::dim(
                "encode_multiscale",
                format!("image has {c} channels, encoder expects {}", self.in_channels),
            ));
        }
        let deepest = *self.strides.last().unwrap();
        if h % deepest != 0 || w % deepest != 0 {
            return Err(Error::dim(
                "encode_multiscale",
                format!("{h}x{w} not divisible by stride schedule {:?}", self.strides),
            ));
        }
        let mut levels = Vec::with_capacity(self.stages.len());
        let mut x = image;
        for (stage, &s) in self.stages.iter().zip(&self.strides) {
            let patches = tape.patchify(x, stage.patch)?;
            let hidden = stage.conv.forward(tape, bind, patches)?;
            let hidden = tape.gelu(hidden)?;
            let out = stage.proj.forward(tape, bind, hidden)?;
            let out = tape.transpose(out)?;
            x = tape.reshape(out, &[self.d_enc, h / s, w / s])?;
            levels.push(x);
        }
        Ok(MultiScaleFeatures { levels })
    }

    /// Per-level affine map from encoder width to decoder width.
    pub fn project_to_decoder<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &Bindings,
        features: &MultiScaleFeatures,
    ) -> Result<MultiScaleFeatures> {
        if features.len() != self.to_decoder.len() {
            return Err(Error::dim(
                "project_to_decoder",
                format!("{} levels, projection has {}", features.len(), self.to_decoder.len()),
            ));
        }
        let mut levels = Vec::with_capacity(features.len());
        for (&f, proj) in features.levels.iter().zip(&self.to_decoder) {
            let shape = tape.shape(f).to_vec();
            if shape.len() != 3 || shape[0] != self.d_enc {
                return Err(Error::dim(
                    "project_to_decoder",
                    format!("level {shape:?} does not have encoder width {}", self.d_enc),
                ));
            }
            let (h, w) = (shape[1], shape[2]);
            let flat = tape.reshape(f, &[self.d_enc, h * w])?;
            let rows = tape.transpose(flat)?;
            let out = proj.forward(tape, bind, rows)?;
            let out = tape.transpose(out)?;
            levels.push(tape.reshape(out, &[self.d, h, w])?);
        }
        Ok(MultiScaleFeatures { levels })
    }
}

/// Spatial mean of a `(C, H, W)` map → `(C)`.
pub fn global_feature<S: Scalar>(tape: &mut Tape<S>, level: Var) -> Result<Var> {
    let shape = tape.shape(level).to_vec();
    let flat = tape.reshape(level, &[shape[0], shape[1] * shape[2]])?;
    tape.mean(flat, 1)
}

/// Small trainable network standing in for the language model: produces the
/// hidden state of every codebook token for every target.
#[derive(Debug, Clone)]
pub struct TargetEmbedder {
    attr_width: usize,
    d: usize,
    levels: usize,
    tokens_per_level: usize,
    hidden: Linear,
    out: Linear,
}

impl TargetEmbedder {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        attr_width: usize,
        d: usize,
        hidden_width: usize,
        levels: usize,
        tokens_per_level: usize,
    ) -> Result<Self> {
        Ok(TargetEmbedder {
            attr_width,
            d,
            levels,
            tokens_per_level,
            hidden: Linear::new(store, rng, "embedder.hidden", attr_width + d, hidden_width)?,
            out: Linear::new(store, rng, "embedder.out", hidden_width, levels * tokens_per_level * d)?,
        })
    }

    pub fn attr_width(&self) -> usize {
        self.attr_width
    }

    /// Returns `(K, L, N_cb, d)` hidden embeddings: the codebook token plus a
    /// target-conditioned offset.
    pub fn embed_targets<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &Bindings,
        codebook: &SegCodebook,
        specs: &[TargetSpec],
        global: Var,
    ) -> Result<Var> {
        if specs.is_empty() {
            return Err(Error::Contract("embed_targets needs at least one target".into()));
        }
        if tape.shape(global) != [self.d] {
            return Err(Error::dim(
                "embed_targets",
                format!("global feature {:?}, expected [{}]", tape.shape(global), self.d),
            ));
        }
        if codebook.levels() != self.levels || codebook.tokens_per_level() != self.tokens_per_level {
            return Err(Error::dim(
                "embed_targets",
                "codebook layout differs from embedder layout",
            ));
        }
        let k = specs.len();
        let mut attrs = Vec::with_capacity(k * self.attr_width);
        for s in specs {
            if s.attributes.len() != self.attr_width {
                return Err(Error::dim(
                    "embed_targets",
                    format!(
                        "target {} has {} attributes, expected {}",
                        s.target_id,
                        s.attributes.len(),
                        self.attr_width
                    ),
                ));
            }
            attrs.extend(s.attributes.iter().map(|&a| S::lit(a)));
        }
        let attrs = tape.constant(&[k, self.attr_width], attrs)?;
        let g = tape.reshape(global, &[1, self.d])?;
        let repeated = tape.concat(&vec![g; k], 0)?;
        let input = tape.concat(&[attrs, repeated], 1)?;
        let h = self.hidden.forward(tape, bind, input)?;
        let h = tape.gelu(h)?;
        let offsets = self.out.forward(tape, bind, h)?;
        let tokens = codebook.flat_tokens(tape, bind)?;
        let hidden = tape.add_row(offsets, tokens)?;
        tape.reshape(hidden, &[k, self.levels, self.tokens_per_level, self.d])
    }
}

/// Fixed 2-D sinusoidal position encoding laid out as `(H·W, d)` rows.
///
/// The first half of the channels encodes the column, the second half the row;
/// positions are normalized to `(0, 2π)` and spread over geometric frequencies.
pub fn sinusoidal_position_encoding(h: usize, w: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let pairs = half.div_ceil(2).max(1);
    let mut out = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let row = &mut out[(y * w + x) * d..(y * w + x + 1) * d];
            let px = (x as f64 + 0.5) / w as f64 * std::f64::consts::TAU;
            let py = (y as f64 + 0.5) / h as f64 * std::f64::consts::TAU;
            for c in 0..d {
                let (pos, j) = if c < half { (px, c) } else { (py, c - half) };
                let freq = 10000f64.powf(-((j / 2) as f64) / pairs as f64);
                row[c] = if j % 2 == 0 {
                    (pos * freq).sin()
                } else {
                    (pos * freq).cos()
                };
            }
        }
    }
    out
}
