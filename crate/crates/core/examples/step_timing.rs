//! Times one forward/backward pass per scene for a few model widths.

use std::time::Instant;

use pixdec::data::synth::{gen_synthetic, SynthConfig};
use pixdec::losses::LossWeights;
use pixdec::model::{ModelConfig, PixelModel};
use pixdec::numeric::Scalar;
use pixdec::train::{accumulate_sample, Sample};

fn time<S: Scalar>(cfg: &ModelConfig, samples: &[Sample]) -> f64 {
    let mut m = PixelModel::<S>::new(cfg.clone(), 0).unwrap();
    let t = Instant::now();
    for s in samples {
        accumulate_sample(&mut m, s, &LossWeights::default(), 1.0).unwrap();
    }
    t.elapsed().as_secs_f64() / samples.len() as f64
}

fn main() {
    let scenes = gen_synthetic(&SynthConfig::default(), 40, 1).unwrap();
    let samples: Vec<Sample> = scenes.iter().map(Sample::from_scene).collect();
    for d in [16, 24, 32] {
        let cfg = ModelConfig {
            d,
            d_enc: d,
            mlp_width: 2 * d,
            embed_hidden: 2 * d,
            ..ModelConfig::default()
        };
        println!(
            "d={d}: f64 {:.1} ms, f32 {:.1} ms",
            time::<f64>(&cfg, &samples) * 1e3,
            time::<f32>(&cfg, &samples) * 1e3
        );
    }
}
