//! Per-image augmentations, selected by name from a registry.
//!
//! `autoaugment` is a fixed list of eight two-operation sub-policies (no
//! policy search). `color_jitter` perturbs brightness, contrast, saturation
//! and hue. `random_crop` pads and crops back to the original size.

use std::f32::consts::PI;
use std::fmt::Debug;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::Image;
use crate::error::Result;
use crate::registry::Registry;
use crate::rng::StreamRng;

pub trait Augmentation: Send + Sync + Debug {
    fn name(&self) -> &'static str;
    fn apply(&self, img: &mut Image, rng: &mut StreamRng);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColorJitterConfig {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    /// Maximum hue rotation as a fraction of a full turn.
    pub hue: f32,
}

impl Default for ColorJitterConfig {
    fn default() -> Self {
        ColorJitterConfig {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
        }
    }
}

impl ColorJitterConfig {
    pub fn is_identity(&self) -> bool {
        self.brightness == 0.0 && self.contrast == 0.0 && self.saturation == 0.0 && self.hue == 0.0
    }
}

/// Settings shared by the augmentation factories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSettings {
    pub color_jitter: ColorJitterConfig,
    pub crop_padding: usize,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        AugmentSettings {
            color_jitter: ColorJitterConfig::default(),
            crop_padding: 2,
        }
    }
}

const FILL: f32 = 0.5;

fn luma(img: &Image, i: usize) -> f32 {
    let n = img.size * img.size;
    0.299 * img.data[i] + 0.587 * img.data[n + i] + 0.114 * img.data[2 * n + i]
}

fn blend_to(img: &mut Image, factor: f32, target: impl Fn(&Image, usize, usize) -> f32) {
    let n = img.size * img.size;
    let src = img.clone();
    for c in 0..img.channels {
        for i in 0..n {
            let t = target(&src, c, i);
            img.data[c * n + i] = t + factor * (src.data[c * n + i] - t);
        }
    }
}

fn adjust_brightness(img: &mut Image, factor: f32) {
    img.data.iter_mut().for_each(|v| *v *= factor);
}

fn adjust_contrast(img: &mut Image, factor: f32) {
    let n = img.size * img.size;
    let mean = (0..n).map(|i| luma(img, i)).sum::<f32>() / n as f32;
    blend_to(img, factor, |_, _, _| mean);
}

fn adjust_saturation(img: &mut Image, factor: f32) {
    blend_to(img, factor, |src, _, i| luma(src, i));
}

/// Rotates colours about the grey axis by `turns` of a full circle.
fn adjust_hue(img: &mut Image, turns: f32) {
    let (s, c) = (2.0 * PI * turns).sin_cos();
    let k = 1.0 / 3.0;
    let sq = (1.0f32 / 3.0).sqrt();
    // Rodrigues rotation around (1,1,1)/sqrt(3)
    let m = [
        [c + k * (1.0 - c), k * (1.0 - c) - sq * s, k * (1.0 - c) + sq * s],
        [k * (1.0 - c) + sq * s, c + k * (1.0 - c), k * (1.0 - c) - sq * s],
        [k * (1.0 - c) - sq * s, k * (1.0 - c) + sq * s, c + k * (1.0 - c)],
    ];
    let n = img.size * img.size;
    for i in 0..n {
        let rgb = [img.data[i], img.data[n + i], img.data[2 * n + i]];
        for (ch, row) in m.iter().enumerate() {
            img.data[ch * n + i] = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
        }
    }
}

/// Resamples with nearest neighbour: output pixel `(x, y)` reads the source
/// at `map(x, y)` (pixel-centre coordinates relative to the image centre).
fn warp(img: &mut Image, map: impl Fn(f32, f32) -> (f32, f32)) {
    let s = img.size;
    let half = s as f32 / 2.0;
    let src = img.clone();
    for y in 0..s {
        for x in 0..s {
            let (u, v) = map(x as f32 + 0.5 - half, y as f32 + 0.5 - half);
            let (sx, sy) = ((u + half).floor(), (v + half).floor());
            let inside = sx >= 0.0 && sy >= 0.0 && (sx as usize) < s && (sy as usize) < s;
            for c in 0..img.channels {
                *img.at_mut(c, y, x) = if inside { src.at(c, sy as usize, sx as usize) } else { FILL };
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Op {
    Invert,
    AutoContrast,
    Contrast,
    Brightness,
    Color,
    Solarize,
    Posterize,
    Rotate,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
}

fn signed<R: Rng + ?Sized>(rng: &mut R, v: f32) -> f32 {
    if rng.random_bool(0.5) {
        v
    } else {
        -v
    }
}

fn apply_op(img: &mut Image, op: Op, magnitude: u8, rng: &mut StreamRng) {
    let m = magnitude as f32 / 10.0;
    match op {
        Op::Invert => img.data.iter_mut().for_each(|v| *v = 1.0 - *v),
        Op::AutoContrast => {
            let n = img.size * img.size;
            for c in 0..img.channels {
                let plane = &mut img.data[c * n..(c + 1) * n];
                let (lo, hi) = plane.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
                if hi > lo {
                    plane.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
                }
            }
        }
        Op::Contrast => adjust_contrast(img, 1.0 + signed(rng, 0.9 * m)),
        Op::Brightness => adjust_brightness(img, 1.0 + signed(rng, 0.9 * m)),
        Op::Color => adjust_saturation(img, 1.0 + signed(rng, 0.9 * m)),
        Op::Solarize => {
            let threshold = 1.0 - m;
            img.data.iter_mut().for_each(|v| {
                if *v >= threshold {
                    *v = 1.0 - *v
                }
            });
        }
        Op::Posterize => {
            let levels = (1u32 << (4 + ((1.0 - m) * 4.0).round() as u32)) as f32;
            img.data.iter_mut().for_each(|v| *v = (*v * levels).floor() / levels);
        }
        Op::Rotate => {
            let (s, c) = signed(rng, 30f32.to_radians() * m).sin_cos();
            warp(img, |x, y| (c * x + s * y, -s * x + c * y));
        }
        Op::ShearX => {
            let k = signed(rng, 0.3 * m);
            warp(img, |x, y| (x + k * y, y));
        }
        Op::ShearY => {
            let k = signed(rng, 0.3 * m);
            warp(img, |x, y| (x, y + k * x));
        }
        Op::TranslateX => {
            let t = signed(rng, 0.45 * m) * img.size as f32;
            warp(img, |x, y| (x - t, y));
        }
        Op::TranslateY => {
            let t = signed(rng, 0.45 * m) * img.size as f32;
            warp(img, |x, y| (x, y - t));
        }
    }
}

type SubPolicy = [(Op, f64, u8); 2];

/// Eight fixed sub-policies: `(op, probability, magnitude 0..=10)` pairs.
const POLICIES: [SubPolicy; 8] = [
    [(Op::Invert, 0.1, 7), (Op::Contrast, 0.2, 6)],
    [(Op::Rotate, 0.7, 2), (Op::TranslateX, 0.3, 9)],
    [(Op::ShearY, 0.5, 8), (Op::TranslateY, 0.7, 9)],
    [(Op::AutoContrast, 0.5, 8), (Op::Brightness, 0.9, 3)],
    [(Op::Color, 0.4, 3), (Op::Brightness, 0.6, 7)],
    [(Op::Solarize, 0.5, 2), (Op::Posterize, 0.2, 5)],
    [(Op::ShearX, 0.6, 5), (Op::Color, 0.3, 9)],
    [(Op::Contrast, 0.7, 2), (Op::Rotate, 0.3, 4)],
];

#[derive(Clone, Copy, Debug, Default)]
pub struct AutoAugment;

impl Augmentation for AutoAugment {
    fn name(&self) -> &'static str {
        "autoaugment"
    }

    fn apply(&self, img: &mut Image, rng: &mut StreamRng) {
        let policy = POLICIES[rng.random_range(0..POLICIES.len())];
        for (op, prob, mag) in policy {
            if rng.random_bool(prob) {
                apply_op(img, op, mag, rng);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ColorJitter(pub ColorJitterConfig);

fn factor<R: Rng + ?Sized>(rng: &mut R, range: f32) -> f32 {
    if range == 0.0 {
        1.0
    } else {
        rng.random_range((1.0 - range).max(0.0)..=1.0 + range)
    }
}

impl Augmentation for ColorJitter {
    fn name(&self) -> &'static str {
        "color_jitter"
    }

    fn apply(&self, img: &mut Image, rng: &mut StreamRng) {
        let cfg = &self.0;
        if cfg.is_identity() {
            return;
        }
        adjust_brightness(img, factor(rng, cfg.brightness));
        adjust_contrast(img, factor(rng, cfg.contrast));
        adjust_saturation(img, factor(rng, cfg.saturation));
        if cfg.hue > 0.0 {
            adjust_hue(img, rng.random_range(-cfg.hue..=cfg.hue));
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RandomCrop {
    pub padding: usize,
}

/// Pads by `padding` on every side with the fill value and cuts the
/// original-size window whose top-left corner is `(ox, oy)` in padded
/// coordinates. `(padding, padding)` returns the input unchanged.
pub fn crop_at(img: &Image, padding: usize, ox: usize, oy: usize) -> Image {
    let s = img.size;
    let mut out = Image::zeros(img.channels, s);
    for c in 0..img.channels {
        for y in 0..s {
            for x in 0..s {
                let (sy, sx) = ((y + oy) as isize - padding as isize, (x + ox) as isize - padding as isize);
                *out.at_mut(c, y, x) = if sy >= 0 && sx >= 0 && (sy as usize) < s && (sx as usize) < s {
                    img.at(c, sy as usize, sx as usize)
                } else {
                    FILL
                };
            }
        }
    }
    out
}

impl Augmentation for RandomCrop {
    fn name(&self) -> &'static str {
        "random_crop"
    }

    fn apply(&self, img: &mut Image, rng: &mut StreamRng) {
        if self.padding == 0 {
            return;
        }
        let ox = rng.random_range(0..=2 * self.padding);
        let oy = rng.random_range(0..=2 * self.padding);
        *img = crop_at(img, self.padding, ox, oy);
    }
}

pub type AugmentRegistry = Registry<AugmentSettings, dyn Augmentation>;

/// Registry with `autoaugment`, `color_jitter` and `random_crop`.
pub fn registry() -> AugmentRegistry {
    let mut r = AugmentRegistry::new("augmentation");
    r.register("autoaugment", |_| Ok(Box::new(AutoAugment) as Box<dyn Augmentation>));
    r.register("color_jitter", |s: &AugmentSettings| {
        Ok(Box::new(ColorJitter(s.color_jitter.clone())) as Box<dyn Augmentation>)
    });
    r.register("random_crop", |s: &AugmentSettings| {
        Ok(Box::new(RandomCrop { padding: s.crop_padding }) as Box<dyn Augmentation>)
    });
    r
}

/// An ordered list of augmentations.
#[derive(Debug, Default)]
pub struct AugmentPipeline {
    steps: Vec<Box<dyn Augmentation>>,
}

impl AugmentPipeline {
    pub fn build(names: &[String], settings: &AugmentSettings, registry: &AugmentRegistry) -> Result<Self> {
        let steps = names.iter().map(|n| registry.build(n, settings)).collect::<Result<_>>()?;
        Ok(AugmentPipeline { steps })
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.steps.iter().map(|s| s.name()).collect()
    }

    pub fn apply(&self, img: &mut Image, rng: &mut StreamRng) {
        for step in &self.steps {
            step.apply(img, rng);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn sample_image() -> Image {
        let mut img = Image::zeros(3, 8);
        img.data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i * 37) % 101) as f32 / 100.0);
        img
    }

    #[test]
    fn empty_pipeline_is_identity() {
        let p = AugmentPipeline::build(&[], &AugmentSettings::default(), &registry()).unwrap();
        let mut img = sample_image();
        p.apply(&mut img, &mut stream(0, Purpose::Augment, 0, 0));
        assert_eq!(img, sample_image());
    }

    #[test]
    fn centred_crop_is_identity() {
        let img = sample_image();
        assert_eq!(crop_at(&img, 3, 3, 3), img);
        let shifted = crop_at(&img, 3, 4, 3);
        assert_eq!(shifted.at(0, 0, 0), img.at(0, 0, 1));
        assert_eq!(shifted.at(0, 0, 7), FILL);
    }

    #[test]
    fn zero_jitter_is_identity() {
        let cfg = ColorJitterConfig {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        };
        let mut img = sample_image();
        ColorJitter(cfg).apply(&mut img, &mut stream(0, Purpose::Augment, 0, 0));
        assert_eq!(img, sample_image());
    }

    #[test]
    fn hue_rotation_by_full_turn_is_close_to_identity() {
        let mut img = sample_image();
        adjust_hue(&mut img, 1.0);
        for (a, b) in img.data.iter().zip(sample_image().data.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn augmentations_are_deterministic_per_stream() {
        let names: Vec<String> = ["autoaugment", "color_jitter", "random_crop"].iter().map(|s| s.to_string()).collect();
        let p = AugmentPipeline::build(&names, &AugmentSettings::default(), &registry()).unwrap();
        let run = |k| {
            let mut img = sample_image();
            p.apply(&mut img, &mut stream(1, Purpose::Augment, k, 0));
            img
        };
        assert_eq!(run(5), run(5));
        assert_eq!(p.names(), vec!["autoaugment", "color_jitter", "random_crop"]);
    }

    #[test]
    fn unknown_name_lists_choices() {
        let err = AugmentPipeline::build(&["mixup".to_string()], &AugmentSettings::default(), &registry())
            .err()
            .unwrap()
            .to_string();
        assert!(err.contains("random_crop"), "{err}");
    }

    #[test]
    fn every_policy_op_preserves_shape() {
        for (k, policy) in POLICIES.iter().enumerate() {
            for (op, _, mag) in policy {
                let mut img = sample_image();
                apply_op(&mut img, *op, *mag, &mut stream(0, Purpose::Augment, k as u64, 0));
                assert_eq!(img.data.len(), 3 * 64);
                assert!(img.data.iter().all(|v| v.is_finite()));
            }
        }
    }
}
