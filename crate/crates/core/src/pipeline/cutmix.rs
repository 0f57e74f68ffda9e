//! Batch-level CutMix with soft targets.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::data::Image;
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CutMixConfig {
    /// Probability that a batch is mixed at all.
    pub prob: f64,
    /// Symmetric Beta parameter for `lambda`.
    pub beta: f64,
}

impl Default for CutMixConfig {
    fn default() -> Self {
        CutMixConfig { prob: 0.5, beta: 1.0 }
    }
}

/// Pasted rectangle in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutBox {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CutMixOutcome {
    /// Soft targets `lambda * y_a + (1 - lambda) * y_b`, `[N, classes]`.
    pub targets: Tensor<f32>,
    /// Fraction of each image kept from itself, recomputed from the box.
    pub lambda: f64,
    /// `partner[i]` is the batch index pasted into image `i`.
    pub partner: Vec<usize>,
    pub cut: Option<CutBox>,
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor<f32>> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Dataset(format!("label {bad} outside {classes} classes")));
    }
    Tensor::from_fn(vec![labels.len(), classes], |k| {
        if labels[k / classes] == k % classes {
            1.0
        } else {
            0.0
        }
    })
}

/// Pastes a box covering `1 - lambda` of the area from `partner[i]` into
/// image `i`. The box lies fully inside the image; its top-left corner is
/// drawn from `rng`.
pub fn cutmix_with(
    images: &mut [Image],
    labels: &[usize],
    classes: usize,
    lambda: f64,
    partner: Vec<usize>,
    rng: &mut StreamRng,
) -> Result<CutMixOutcome> {
    let n = images.len();
    if labels.len() != n || partner.len() != n || partner.iter().any(|&p| p >= n) {
        return Err(Error::Dataset("cutmix batch, labels and partners disagree".into()));
    }
    let size = images.first().map_or(0, |i| i.size);
    let ratio = (1.0 - lambda.clamp(0.0, 1.0)).sqrt();
    let side = ((size as f64 * ratio).round() as usize).min(size);
    let cut = if side == 0 {
        None
    } else {
        let x0 = rng.random_range(0..=size - side);
        let y0 = rng.random_range(0..=size - side);
        Some(CutBox {
            x0,
            y0,
            width: side,
            height: side,
        })
    };
    if let Some(b) = cut {
        let originals: Vec<Image> = images.to_vec();
        for (i, img) in images.iter_mut().enumerate() {
            let src = &originals[partner[i]];
            for c in 0..img.channels {
                for y in b.y0..b.y0 + b.height {
                    for x in b.x0..b.x0 + b.width {
                        *img.at_mut(c, y, x) = src.at(c, y, x);
                    }
                }
            }
        }
    }
    let area = cut.map_or(0, |b| b.width * b.height);
    let lambda = if size == 0 { 1.0 } else { 1.0 - area as f64 / (size * size) as f64 };
    let ya = one_hot(labels, classes)?;
    let yb = one_hot(&partner.iter().map(|&p| labels[p]).collect::<Vec<_>>(), classes)?;
    let (la, lb) = (lambda as f32, (1.0 - lambda) as f32);
    let targets = Tensor::new(
        ya.shape().to_vec(),
        ya.data().iter().zip(yb.data()).map(|(&a, &b)| la * a + lb * b).collect(),
    )?;
    Ok(CutMixOutcome {
        targets,
        lambda,
        partner,
        cut,
    })
}

/// Draws whether to mix, `lambda ~ Beta(beta, beta)` and a random partner
/// permutation, then applies [`cutmix_with`]. Batches smaller than two are
/// left untouched.
pub fn cutmix(images: &mut [Image], labels: &[usize], classes: usize, cfg: &CutMixConfig, rng: &mut StreamRng) -> Result<CutMixOutcome> {
    let n = images.len();
    let identity: Vec<usize> = (0..n).collect();
    if n < 2 || cfg.prob <= 0.0 || !rng.random_bool(cfg.prob.min(1.0)) {
        return Ok(CutMixOutcome {
            targets: one_hot(labels, classes)?,
            lambda: 1.0,
            partner: identity,
            cut: None,
        });
    }
    let beta = Beta::new(cfg.beta, cfg.beta).map_err(|e| Error::config(format!("cutmix.beta: {e}")))?;
    let lambda = beta.sample(rng);
    let mut partner = identity;
    partner.shuffle(rng);
    cutmix_with(images, labels, classes, lambda, partner, rng)
}
