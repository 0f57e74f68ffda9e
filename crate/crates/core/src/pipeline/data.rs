//! Synthetic multi-domain image classification data.
//!
//! The class picks a geometric shape; the domain picks a rendering style
//! (foreground and background hue, background stripe frequency, pixel noise).
//! Samples are stored as parameters and rendered on demand, so the same
//! dataset can be drawn at any resolution. Everything is a pure function of
//! `(config, seed)`.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Number of distinct shapes available as classes.
pub const MAX_CLASSES: usize = 8;

/// One CHW float image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub size: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(channels: usize, size: usize) -> Self {
        Image {
            channels,
            size,
            data: vec![0.0; channels * size * size],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.size + y) * self.size + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.size + y) * self.size + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Stacks images into a normalized `[N, C, H, W]` model input.
pub fn to_batch(images: &[Image]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let (c, s) = (first.channels, first.size);
    let mut data = Vec::with_capacity(images.len() * c * s * s);
    for img in images {
        if img.channels != c || img.size != s {
            return Err(Error::Dataset("batch mixes image sizes".into()));
        }
        data.extend(img.data.iter().map(|v| (v - 0.5) * 4.0));
    }
    Tensor::new(vec![images.len(), c, s, s], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub num_domains: usize,
    /// Samples for every (class, domain) pair.
    pub samples_per_cell: usize,
    /// Multiplier on the per-domain style offsets; 0 makes all domains
    /// identically distributed.
    pub style_spread: f64,
    /// Pixel noise standard deviation shared by all domains.
    pub base_noise: f64,
    /// Maximum displacement of the shape centre, as a fraction of the image.
    pub position_jitter: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 4,
            num_domains: 3,
            samples_per_cell: 40,
            style_spread: 1.0,
            base_noise: 0.04,
            position_jitter: 0.12,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(Error::config(format!(
                "dataset.num_classes must be in 2..={MAX_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.num_domains < 2 {
            return Err(Error::config("dataset.num_domains must be at least 2"));
        }
        if self.samples_per_cell == 0 {
            return Err(Error::config("dataset.samples_per_cell must be positive"));
        }
        if !(self.style_spread >= 0.0 && self.base_noise >= 0.0 && (0.0..0.5).contains(&self.position_jitter)) {
            return Err(Error::config("dataset style parameters out of range"));
        }
        Ok(())
    }
}

/// Rendering style of one domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub fg_hue: f64,
    pub bg_hue: f64,
    pub texture_freq: f64,
    pub noise: f64,
}

/// Per-sample parameters; rendering is deterministic given these.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleParams {
    pub class: usize,
    pub domain: usize,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub angle: f64,
    pub hue_jitter: f64,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDomainDataset {
    pub config: SyntheticConfig,
    pub seed: u64,
    pub styles: Vec<DomainStyle>,
    pub samples: Vec<SampleParams>,
}

fn domain_style(cfg: &SyntheticConfig, seed: u64, domain: usize) -> DomainStyle {
    let mut rng = stream(seed, Purpose::Dataset, domain as u64, u64::MAX);
    let s = cfg.style_spread;
    let (dfg, dbg): (f64, f64) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
    let (dfreq, dnoise): (f64, f64) = (rng.random_range(0.0..4.0), rng.random_range(0.0..0.08));
    DomainStyle {
        fg_hue: (0.05 + s * dfg).rem_euclid(1.0),
        bg_hue: (0.55 + s * dbg).rem_euclid(1.0),
        texture_freq: 1.0 + s * dfreq,
        noise: cfg.base_noise + s * dnoise,
    }
}

/// Builds the dataset; the same `(config, seed)` always yields the same data.
pub fn generate_synthetic_domains(config: &SyntheticConfig, seed: u64) -> Result<SyntheticDomainDataset> {
    config.validate()?;
    let styles = (0..config.num_domains).map(|d| domain_style(config, seed, d)).collect();
    let mut samples = Vec::with_capacity(config.num_domains * config.num_classes * config.samples_per_cell);
    for domain in 0..config.num_domains {
        for class in 0..config.num_classes {
            for i in 0..config.samples_per_cell {
                let key = ((domain * config.num_classes + class) * config.samples_per_cell + i) as u64;
                let mut rng = stream(seed, Purpose::Dataset, key, 0);
                let j = config.position_jitter;
                samples.push(SampleParams {
                    class,
                    domain,
                    cx: 0.5 + rng.random_range(-j..=j),
                    cy: 0.5 + rng.random_range(-j..=j),
                    radius: rng.random_range(0.24..0.34),
                    angle: rng.random_range(-0.3..0.3),
                    hue_jitter: rng.random_range(-0.04..0.04),
                    phase: rng.random_range(0.0..1.0),
                });
            }
        }
    }
    Ok(SyntheticDomainDataset {
        config: config.clone(),
        seed,
        styles,
        samples,
    })
}

/// Whether the point `(x, y)` in shape-local units lies inside shape `class`.
fn inside(class: usize, x: f64, y: f64) -> bool {
    let r = (x * x + y * y).sqrt();
    match class {
        0 => r < 1.0,
        1 => x.abs().max(y.abs()) < 0.8,
        2 => (0.55..1.0).contains(&r),
        3 => (x.abs() < 0.3 && y.abs() < 1.0) || (y.abs() < 0.3 && x.abs() < 1.0),
        4 => y < 0.7 && y > -0.9 && x.abs() < (0.7 - y) * 0.6,
        5 => ((x - y).abs() < 0.35 || (x + y).abs() < 0.35) && x.abs() < 0.85 && y.abs() < 0.85,
        6 => y.abs() < 0.35 && x.abs() < 1.0,
        _ => x.abs() < 0.35 && y.abs() < 1.0,
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

impl SyntheticDomainDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn label(&self, index: usize) -> usize {
        self.samples[index].class
    }

    /// Indices of every sample of `domain`.
    pub fn domain_indices(&self, domain: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.samples[i].domain == domain).collect()
    }

    /// Renders sample `index` at `size x size` with 2x2 supersampling.
    pub fn render(&self, index: usize, size: usize) -> Image {
        let p = &self.samples[index];
        let style = &self.styles[p.domain];
        let fg = hsv(style.fg_hue + p.hue_jitter, 0.85, 0.95);
        let (sin, cos) = p.angle.sin_cos();
        let mut img = Image::zeros(3, size);
        let mut noise_rng = stream(self.seed, Purpose::Dataset, index as u64, size as u64);
        for py in 0..size {
            for px in 0..size {
                let mut acc = [0.0f64; 3];
                for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                    let u = (px as f64 + ox) / size as f64;
                    let v = (py as f64 + oy) / size as f64;
                    let (dx, dy) = ((u - p.cx) / p.radius, (v - p.cy) / p.radius);
                    let (x, y) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                    let colour = if inside(p.class, x, y) {
                        fg
                    } else {
                        let stripe = (2.0 * PI * (style.texture_freq * (u + 0.5 * v) + p.phase)).sin();
                        hsv(style.bg_hue, 0.5, 0.45 + 0.15 * stripe)
                    };
                    acc.iter_mut().zip(colour).for_each(|(a, c)| *a += 0.25 * c);
                }
                for (c, a) in acc.iter().enumerate() {
                    let n: f64 = StandardNormal.sample(&mut noise_rng);
                    *img.at_mut(c, py, px) = (a + style.noise * n) as f32;
                }
            }
        }
        img
    }

    pub fn render_all(&self, indices: &[usize], size: usize) -> Vec<Image> {
        indices.iter().map(|&i| self.render(i, size)).collect()
    }

    /// Writes one raw RGB (u8, HWC) file per sample plus `manifest.jsonl`
    /// with the class, domain and split of each file.
    pub fn export(&self, dir: &Path, size: usize, split: &Split) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = fs::File::create(dir.join("manifest.jsonl"))?;
        let mut membership = vec!["unused"; self.len()];
        for (name, idx) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
            idx.iter().for_each(|&i| membership[i] = name);
        }
        for i in 0..self.len() {
            let img = self.render(i, size);
            let mut raw = Vec::with_capacity(3 * size * size);
            for y in 0..size {
                for x in 0..size {
                    for c in 0..3 {
                        raw.push((img.at(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                    }
                }
            }
            let file = format!("{i:06}.rgb");
            fs::write(dir.join(&file), raw)?;
            let record = serde_json::json!({
                "file": file,
                "class": self.samples[i].class,
                "domain": self.samples[i].domain,
                "split": membership[i],
                "size": size,
            });
            writeln!(manifest, "{record}")?;
        }
        Ok(())
    }
}

/// Index sets of one experiment.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Source domains are divided `1 - val_fraction` / `val_fraction` into
/// train/val per (domain, class) cell; every sample of a held-out domain
/// goes to test. Membership is a pure function of `seed`.
pub fn split_domains(data: &SyntheticDomainDataset, held_out: &[usize], val_fraction: f64, seed: u64) -> Result<Split> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::config(format!("val_fraction must be in [0, 1), got {val_fraction}")));
    }
    let mut split = Split::default();
    for d in 0..data.config.num_domains {
        let members = data.domain_indices(d);
        if members.is_empty() {
            return Err(Error::Dataset(format!("domain {d} has no samples")));
        }
        if held_out.contains(&d) {
            split.test.extend(members);
            continue;
        }
        for c in 0..data.num_classes() {
            let mut cell: Vec<usize> = members.iter().copied().filter(|&i| data.label(i) == c).collect();
            let mut rng = stream(seed, Purpose::Split, d as u64, c as u64);
            rand::seq::SliceRandom::shuffle(cell.as_mut_slice(), &mut rng);
            let n_val = (cell.len() as f64 * val_fraction).round() as usize;
            split.val.extend_from_slice(&cell[..n_val]);
            split.train.extend_from_slice(&cell[n_val..]);
        }
    }
    for held in held_out {
        if *held >= data.config.num_domains {
            return Err(Error::Dataset(format!("held-out domain {held} does not exist")));
        }
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    Ok(split)
}
