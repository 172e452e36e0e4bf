//! The assembled mask generator: encoder stand-in, target embedder,
//! codebook fusion and pixel decoder over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::SegCodebook;
use crate::decoder::{DecoderConfig, MaskLogits, PixelDecoder};
use crate::encoder::{global_feature, TargetEmbedder, TargetSpec, VisionEncoder, ATTRIBUTE_WORDS};
use crate::error::{Error, Result};
use crate::nn::{Bindings, ParamStore};
use crate::numeric::{Scalar, Tape, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Cumulative stride of each feature level, finest first.
    pub strides: Vec<usize>,
    pub d_enc: usize,
    pub d: usize,
    pub n_cb: usize,
    pub n_out: usize,
    pub mlp_width: usize,
    pub embed_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            in_channels: 3,
            strides: vec![4, 8],
            d_enc: 24,
            d: 24,
            n_cb: 3,
            n_out: 2,
            mlp_width: 48,
            embed_hidden: 48,
        }
    }
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.strides.len()
    }

    pub fn errors(&self) -> Vec<String> {
        let mut e = Vec::new();
        for (name, v) in [
            ("model.image_size", self.image_size),
            ("model.in_channels", self.in_channels),
            ("model.d_enc", self.d_enc),
            ("model.d", self.d),
            ("model.n_cb", self.n_cb),
            ("model.n_out", self.n_out),
            ("model.mlp_width", self.mlp_width),
            ("model.embed_hidden", self.embed_hidden),
        ] {
            if v == 0 {
                e.push(format!("{name} must be positive"));
            }
        }
        if self.strides.is_empty() {
            e.push("model.strides needs at least one level".to_owned());
        }
        let mut prev = 1;
        for &s in &self.strides {
            if s <= prev || s % prev != 0 {
                e.push(format!(
                    "model.strides {:?} must be strictly increasing multiples",
                    self.strides
                ));
                break;
            }
            prev = s;
        }
        if let Some(&deepest) = self.strides.last() {
            if deepest > 0 && !self.image_size.is_multiple_of(deepest) {
                e.push(format!(
                    "model.image_size {} is not divisible by stride {deepest}",
                    self.image_size
                ));
            }
        }
        e
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            levels: self.levels(),
            d: self.d,
            n_out: self.n_out,
            mlp_width: self.mlp_width,
            sizes: self
                .strides
                .iter()
                .map(|&s| (self.image_size / s, self.image_size / s))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PixelModel<S: Scalar = f64> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    pub encoder: VisionEncoder,
    pub embedder: TargetEmbedder,
    pub codebook: SegCodebook,
    pub decoder: PixelDecoder,
}

impl<S: Scalar> PixelModel<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let errs = config.errors();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let l = config.levels();
        let encoder = VisionEncoder::new(
            &mut store,
            &mut rng,
            config.in_channels,
            &config.strides,
            config.d_enc,
            config.d,
        )?;
        let codebook = SegCodebook::new(&mut store, &mut rng, l, config.n_cb, config.d)?;
        let embedder = TargetEmbedder::new(
            &mut store,
            &mut rng,
            ATTRIBUTE_WORDS.len(),
            config.d,
            config.embed_hidden,
            l,
            config.n_cb,
        )?;
        let decoder = PixelDecoder::new(&mut store, &mut rng, config.decoder_config())?;
        Ok(PixelModel {
            config,
            store,
            encoder,
            embedder,
            codebook,
            decoder,
        })
    }

    /// Mask logits for every target; `image` is `(C, H, W)` row-major.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        bind: &Bindings,
        image: &[f32],
        specs: &[TargetSpec],
    ) -> Result<Vec<MaskLogits>> {
        let n = self.config.image_size;
        let img = tape.constant(
            &[self.config.in_channels, n, n],
            image.iter().map(|&v| S::lit(f64::from(v))).collect(),
        )?;
        self.forward_var(tape, bind, img, specs)
    }

    pub fn forward_var(
        &self,
        tape: &mut Tape<S>,
        bind: &Bindings,
        image: Var,
        specs: &[TargetSpec],
    ) -> Result<Vec<MaskLogits>> {
        let feats = self.encoder.encode_multiscale(tape, bind, image)?;
        let feats = self.encoder.project_to_decoder(tape, bind, &feats)?;
        let global = global_feature(tape, feats.deepest())?;
        let hidden = self.embedder.embed_targets(tape, bind, &self.codebook, specs, global)?;
        let fused = self.codebook.fuse_all(tape, bind, hidden)?;
        self.decoder.decode(tape, bind, fused, &feats)
    }

    /// Fused mask probabilities per target, computed without gradients.
    pub fn predict(&self, image: &[f32], specs: &[TargetSpec]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let bind = self.store.bind_detached(&mut tape);
        let out = self.forward(&mut tape, &bind, image, specs)?;
        out.iter()
            .map(|m| {
                let p = tape.sigmoid(m.fused)?;
                Ok(tape.value(p).iter().map(|v| v.as_f64()).collect())
            })
            .collect()
    }

    /// Side length of the predicted masks.
    pub fn mask_size(&self) -> (usize, usize) {
        self.config.decoder_config().mask_size()
    }
}
