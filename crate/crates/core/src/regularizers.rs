//! ShakeDrop at residual joins.
//!
//! Training forward: `out = x_residual + (beta + alpha - beta*alpha) * x_block`
//! with `beta ~ Bernoulli(p)` and `alpha ~ U[alpha_range]`. The gradient sent
//! into the block branch is scaled by `beta + gamma - beta*gamma` with a
//! fresh `gamma ~ U[gamma_range]` drawn at backward time. Inference replaces
//! the coefficient by its expectation `p + E[alpha] * (1 - p)`.

use std::any::Any;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Float, GradientOverride, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One draw shared by the whole batch.
    #[default]
    PerBatch,
    /// Independent draws for every batch row.
    PerExample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShakeDropConfig {
    /// Bernoulli parameter of the gate `beta` (probability of keeping the
    /// block unscaled).
    pub gate_prob: f64,
    pub alpha_range: [f64; 2],
    pub gamma_range: [f64; 2],
    /// Use the unreconciled backward coefficient `gamma + alpha - gamma*alpha`
    /// (no gate) instead of `beta + gamma - beta*gamma`.
    pub literal_eq3: bool,
    /// Decay the gate probability linearly with depth from 1 at the input
    /// to `gate_prob` at the last block.
    pub linear_decay: bool,
    pub granularity: Granularity,
    /// Draw `gamma` equal to `alpha`, making backward the exact chain rule of
    /// forward. For gradient checks.
    pub tie_gamma_to_alpha: bool,
    /// Disable ShakeDrop entirely; joins become plain residual additions.
    pub enabled: bool,
}

impl Default for ShakeDropConfig {
    fn default() -> Self {
        ShakeDropConfig {
            gate_prob: 0.5,
            alpha_range: [0.0, 1.0],
            gamma_range: [0.0, 1.0],
            literal_eq3: false,
            linear_decay: false,
            granularity: Granularity::PerBatch,
            tie_gamma_to_alpha: false,
            enabled: true,
        }
    }
}

impl ShakeDropConfig {
    pub fn validate(&self) -> Result<()> {
        let [a0, a1] = self.alpha_range;
        let [g0, g1] = self.gamma_range;
        if !(0.0..=1.0).contains(&self.gate_prob) || a0 > a1 || g0 > g1 {
            return Err(Error::config(format!(
                "shakedrop needs 0 <= gate_prob <= 1 and ordered ranges, got p={} alpha={:?} gamma={:?}",
                self.gate_prob, self.alpha_range, self.gamma_range
            )));
        }
        Ok(())
    }

    /// Gate probability of the `layer`-th join (1-based) out of `depth`.
    pub fn layer_gate_prob(&self, layer: usize, depth: usize) -> f64 {
        if self.linear_decay && depth > 0 {
            1.0 - (layer as f64 / depth as f64) * (1.0 - self.gate_prob)
        } else {
            self.gate_prob
        }
    }

    /// `E[beta + alpha - beta*alpha] = p + E[alpha] * (1 - p)`.
    pub fn expected_coefficient(&self, gate_prob: f64) -> f64 {
        let mean_alpha = 0.5 * (self.alpha_range[0] + self.alpha_range[1]);
        gate_prob + mean_alpha * (1.0 - gate_prob)
    }
}

/// Coefficients drawn for one batch row of one join application.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShakeDropSample {
    pub beta: f64,
    pub alpha: f64,
    /// Filled in when the backward pass draws it.
    pub gamma: Option<f64>,
}

impl ShakeDropSample {
    /// `beta + alpha - beta*alpha`, written so that `beta = 1` yields exactly 1.
    pub fn forward_coefficient(&self) -> f64 {
        self.beta + (1.0 - self.beta) * self.alpha
    }
}

/// Key of the counter-based stream for one join application.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamKey {
    pub seed: u64,
    pub layer: u64,
    pub step: u64,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Draws the forward coefficients for `batch` rows.
pub fn sample_forward(cfg: &ShakeDropConfig, gate_prob: f64, key: StreamKey, batch: usize) -> Vec<ShakeDropSample> {
    let mut rng = stream(key.seed, Purpose::ShakeDropForward, key.layer, key.step);
    let draws = match cfg.granularity {
        Granularity::PerBatch => 1,
        Granularity::PerExample => batch,
    };
    let drawn: Vec<ShakeDropSample> = (0..draws)
        .map(|_| {
            let beta = if rng.random_bool(gate_prob) { 1.0 } else { 0.0 };
            ShakeDropSample {
                beta,
                alpha: uniform(&mut rng, cfg.alpha_range),
                gamma: None,
            }
        })
        .collect();
    (0..batch).map(|i| drawn[i % draws]).collect()
}

/// Gradient multiplier for one sample given its backward draw `gamma`.
pub fn backward_coefficient(cfg: &ShakeDropConfig, sample: &ShakeDropSample, gamma: f64) -> f64 {
    if cfg.literal_eq3 {
        gamma + (1.0 - gamma) * sample.alpha
    } else {
        sample.beta + (1.0 - sample.beta) * gamma
    }
}

/// Gradient override attached to a join on the tape.
#[derive(Clone, Debug)]
pub struct ShakeDropRecord {
    pub cfg: ShakeDropConfig,
    pub key: StreamKey,
    pub samples: Vec<ShakeDropSample>,
}

impl ShakeDropRecord {
    /// Draws `gamma` (one per distinct forward draw) and returns the per-row
    /// block-branch gradient multipliers.
    pub fn draw_backward(&mut self) -> Vec<f64> {
        let mut rng = stream(self.key.seed, Purpose::ShakeDropBackward, self.key.layer, self.key.step);
        let draws = match self.cfg.granularity {
            Granularity::PerBatch => 1,
            Granularity::PerExample => self.samples.len(),
        };
        let gammas: Vec<f64> = (0..draws).map(|_| uniform(&mut rng, self.cfg.gamma_range)).collect();
        let cfg = self.cfg.clone();
        self.samples
            .iter_mut()
            .enumerate()
            .map(|(i, s)| {
                let gamma = if cfg.tie_gamma_to_alpha { s.alpha } else { gammas[i % draws] };
                s.gamma = Some(gamma);
                backward_coefficient(&cfg, s, gamma)
            })
            .collect()
    }
}

impl<T: Float> GradientOverride<T> for ShakeDropRecord {
    fn backward_scales(&mut self, batch: usize) -> Vec<T> {
        debug_assert_eq!(batch, self.samples.len());
        self.draw_backward().into_iter().map(T::lit).collect()
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Training-mode join. The returned samples are also stored on the tape and
/// receive their `gamma` during backward.
pub fn shakedrop_forward<T: Float>(
    g: &mut Graph<T>,
    x_residual: Var,
    x_block: Var,
    cfg: &ShakeDropConfig,
    gate_prob: f64,
    key: StreamKey,
) -> Result<(Var, Vec<ShakeDropSample>)> {
    if g.shape(x_residual) != g.shape(x_block) {
        return Err(Error::ShapeMismatch {
            op: "shakedrop",
            lhs: g.shape(x_residual).to_vec(),
            rhs: g.shape(x_block).to_vec(),
        });
    }
    let batch = g.shape(x_block)[0];
    let samples = sample_forward(cfg, gate_prob, key, batch);
    let scale: Vec<T> = samples.iter().map(|s| T::lit(s.forward_coefficient())).collect();
    let record = ShakeDropRecord {
        cfg: cfg.clone(),
        key,
        samples: samples.clone(),
    };
    let out = g.residual_join(x_residual, x_block, &scale, Box::new(record))?;
    Ok((out, samples))
}

/// Same forward value as [`shakedrop_forward`] built from ordinary ops, so
/// its backward is the plain chain rule. Used to check the override path.
pub fn shakedrop_plain<T: Float>(
    g: &mut Graph<T>,
    x_residual: Var,
    x_block: Var,
    samples: &[ShakeDropSample],
) -> Result<Var> {
    let scale: Vec<T> = samples.iter().map(|s| T::lit(s.forward_coefficient())).collect();
    let scaled = g.scale_rows(x_block, scale)?;
    g.add(x_residual, scaled)
}

/// Applies the block-branch multiplier to an incoming gradient.
pub fn shakedrop_backward<T: Float>(grad_in: &[T], record: &mut ShakeDropRecord) -> Vec<T> {
    let scales = record.draw_backward();
    let per = grad_in.len() / scales.len();
    grad_in
        .chunks(per)
        .zip(&scales)
        .flat_map(|(row, &s)| row.iter().map(move |&v| T::lit(s) * v))
        .collect()
}

/// Inference-mode join with the expected coefficient. Deterministic.
pub fn shakedrop_inference<T: Float>(
    g: &mut Graph<T>,
    x_residual: Var,
    x_block: Var,
    cfg: &ShakeDropConfig,
    gate_prob: f64,
) -> Result<Var> {
    let scaled = g.scale(x_block, T::lit(cfg.expected_coefficient(gate_prob)));
    g.add(x_residual, scaled)
}
