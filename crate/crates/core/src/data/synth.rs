//! Synthetic scenes of colored rectangles and ellipses with exact masks.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::convert::{answer_text, question_text};
use super::record::{MuseRecord, MuseTarget};
use super::rle::{bbox, RleMask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Ellipse => "ellipse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

pub const COLORS: [Color; 6] = [
    Color::Red,
    Color::Green,
    Color::Blue,
    Color::Yellow,
    Color::Magenta,
    Color::Cyan,
];

impl Color {
    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Magenta => "magenta",
            Color::Cyan => "cyan",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.8, 0.2],
            Color::Blue => [0.15, 0.2, 0.9],
            Color::Yellow => [0.9, 0.85, 0.1],
            Color::Magenta => [0.85, 0.15, 0.85],
            Color::Cyan => [0.1, 0.85, 0.85],
        }
    }
}

/// Axis-aligned shape in continuous pixel coordinates; pixel `(x, y)` is
/// sampled at its center `(x + 0.5, y + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    /// Half-extent along x.
    pub rx: f64,
    /// Half-extent along y.
    pub ry: f64,
}

impl Geometry {
    /// Row-major coverage mask, filled one scanline at a time.
    pub fn rasterize(&self, height: usize, width: usize) -> Vec<u8> {
        let mut mask = vec![0u8; height * width];
        for y in 0..height {
            let dy = y as f64 + 0.5 - self.cy;
            let half = match self.kind {
                ShapeKind::Rectangle if dy.abs() <= self.ry => self.rx,
                ShapeKind::Ellipse => {
                    let t = 1.0 - (dy / self.ry).powi(2);
                    if t < 0.0 {
                        continue;
                    }
                    self.rx * t.sqrt()
                }
                _ => continue,
            };
            let lo = (self.cx - half - 0.5).ceil().max(0.0);
            let hi = (self.cx + half - 0.5).floor().min(width as f64 - 1.0);
            if hi < lo {
                continue;
            }
            mask[y * width + lo as usize..=y * width + hi as usize].fill(1);
        }
        mask
    }

    /// Coarse 3×3 location of the center: "top left", "left", "center", ...
    pub fn position(&self, height: usize, width: usize) -> &'static str {
        let third = |v: f64, n: usize| {
            if v < n as f64 / 3.0 {
                0
            } else if v > 2.0 * n as f64 / 3.0 {
                2
            } else {
                1
            }
        };
        match (third(self.cy, height), third(self.cx, width)) {
            (0, 0) => "top left",
            (0, 1) => "top",
            (0, _) => "top right",
            (1, 0) => "left",
            (1, 1) => "center",
            (1, _) => "right",
            (_, 0) => "bottom left",
            (_, 1) => "bottom",
            _ => "bottom right",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub k_min: usize,
    pub k_max: usize,
    /// Shape half-extent range as fractions of the image size.
    pub min_extent: f64,
    pub max_extent: f64,
    /// Smallest visible pixel count per instance after occlusion.
    pub min_visible: usize,
    /// Std of the additive pixel noise.
    pub noise: f64,
    pub max_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            k_min: 1,
            k_max: 4,
            min_extent: 0.08,
            max_extent: 0.22,
            min_visible: 40,
            noise: 0.03,
            max_retries: 200,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut e = Vec::new();
        if self.image_size < 4 {
            e.push("synth.image_size must be at least 4".to_owned());
        }
        if self.k_min == 0 || self.k_min > self.k_max {
            e.push(format!(
                "synth.k range [{}, {}] is empty or starts at 0",
                self.k_min, self.k_max
            ));
        }
        if self.k_max > COLORS.len() {
            e.push(format!(
                "synth.k_max {} exceeds the {} available colors",
                self.k_max,
                COLORS.len()
            ));
        }
        if !(self.min_extent > 0.0 && self.min_extent <= self.max_extent && self.max_extent <= 0.5) {
            e.push("synth extents must satisfy 0 < min_extent <= max_extent <= 0.5".to_owned());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            e.push("synth.noise must be a finite non-negative number".to_owned());
        }
        if self.max_retries == 0 {
            e.push("synth.max_retries must be positive".to_owned());
        }
        if e.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(e))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub geometry: Geometry,
    pub color: Color,
    /// Visible pixels only, row-major 0/1.
    pub mask: Vec<u8>,
    pub description: String,
}

impl Instance {
    pub fn category(&self) -> &'static str {
        self.geometry.kind.name()
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&v| v != 0).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub height: usize,
    pub width: usize,
    /// `(3, H, W)` in `[0, 1]`.
    pub image: Vec<f32>,
    /// Back to front; later instances occlude earlier ones.
    pub instances: Vec<Instance>,
}

pub const BACKGROUND: [f32; 3] = [0.45, 0.45, 0.45];

/// Paints `shapes` back to front. Each returned mask keeps only the pixels
/// its shape still owns after occlusion.
pub fn compose(height: usize, width: usize, shapes: &[(Geometry, Color)]) -> (Vec<f32>, Vec<Vec<u8>>) {
    let mut owner = vec![usize::MAX; height * width];
    for (i, (g, _)) in shapes.iter().enumerate() {
        for (o, &c) in owner.iter_mut().zip(&g.rasterize(height, width)) {
            if c != 0 {
                *o = i;
            }
        }
    }
    let plane = height * width;
    let mut image = vec![0f32; 3 * plane];
    for (p, &o) in owner.iter().enumerate() {
        let rgb = if o == usize::MAX { BACKGROUND } else { shapes[o].1.rgb() };
        for c in 0..3 {
            image[c * plane + p] = rgb[c];
        }
    }
    let masks = (0..shapes.len())
        .map(|i| owner.iter().map(|&o| u8::from(o == i)).collect())
        .collect();
    (image, masks)
}

pub fn describe(color: Color, geometry: &Geometry, height: usize, width: usize) -> String {
    format!(
        "{} {} at the {}",
        color.name(),
        geometry.kind.name(),
        geometry.position(height, width)
    )
}

/// Per-scene seed derived from the run seed and the scene index.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_scene(config: &SynthConfig, seed: u64) -> Result<SyntheticScene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.image_size;
    let k = rng.random_range(config.k_min..=config.k_max);
    let colors: Vec<Color> = sample(&mut rng, COLORS.len(), k)
        .into_iter()
        .map(|i| COLORS[i])
        .collect();
    let (lo, hi) = (config.min_extent * n as f64, config.max_extent * n as f64);
    for _ in 0..config.max_retries {
        let shapes: Vec<(Geometry, Color)> = colors
            .iter()
            .map(|&color| {
                let kind = if rng.random_bool(0.5) {
                    ShapeKind::Rectangle
                } else {
                    ShapeKind::Ellipse
                };
                let rx = rng.random_range(lo..=hi);
                let ry = rng.random_range(lo..=hi);
                let cx = rng.random_range(rx..=n as f64 - rx);
                let cy = rng.random_range(ry..=n as f64 - ry);
                (Geometry { kind, cx, cy, rx, ry }, color)
            })
            .collect();
        let (mut image, masks) = compose(n, n, &shapes);
        if masks
            .iter()
            .any(|m| m.iter().filter(|&&v| v != 0).count() < config.min_visible)
        {
            continue;
        }
        if config.noise > 0.0 {
            let dist = Normal::new(0.0, config.noise).expect("finite noise");
            for v in &mut image {
                *v = (*v + dist.sample(&mut rng) as f32).clamp(0.0, 1.0);
            }
        }
        let instances = shapes
            .into_iter()
            .zip(masks)
            .map(|((geometry, color), mask)| Instance {
                description: describe(color, &geometry, n, n),
                geometry,
                color,
                mask,
            })
            .collect();
        return Ok(SyntheticScene {
            height: n,
            width: n,
            image,
            instances,
        });
    }
    Err(Error::Generation {
        seed,
        detail: format!(
            "could not place {k} shapes with {} visible pixels each in {} attempts",
            config.min_visible, config.max_retries
        ),
    })
}

/// `count` scenes; scene `i` depends only on `(seed, i)`.
pub fn gen_synthetic(config: &SynthConfig, count: usize, seed: u64) -> Result<Vec<SyntheticScene>> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| generate_scene(config, scene_seed(seed, i)))
        .collect()
}

impl SyntheticScene {
    /// Record asking for every instance in scene order.
    pub fn to_record(&self, image: &str) -> Result<MuseRecord> {
        let descs: Vec<&str> = self.instances.iter().map(|i| i.description.as_str()).collect();
        let targets = self
            .instances
            .iter()
            .map(|inst| {
                Ok(MuseTarget {
                    description: inst.description.clone(),
                    category: inst.category().to_owned(),
                    bbox: bbox(&inst.mask, self.height, self.width)?,
                    mask: RleMask::encode(&inst.mask, self.height, self.width)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(MuseRecord {
            image: image.to_owned(),
            height: self.height as u32,
            width: self.width as u32,
            question: question_text(&descs),
            answer: answer_text(&descs),
            targets,
        })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let plane = self.height * self.width;
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = y as usize * self.width + x as usize;
            image::Rgb([0, 1, 2].map(|c| (self.image[c * plane + p] * 255.0).round() as u8))
        })
    }

    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }
}

/// Reads an 8-bit RGB PNG back into `(3, H, W)` floats.
pub fn load_png(path: &std::path::Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for c in 0..3 {
            out[c * h * w + p] = px.0[c] as f32 / 255.0;
        }
    }
    Ok((h, w, out))
}
