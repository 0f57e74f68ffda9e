//! Accuracy, test-time augmentation and leave-one-domain-out evaluation.

use std::fmt::Debug;

use super::augment::{AugmentPipeline, AugmentSettings};
use super::data::{split_domains, to_batch, Image, Split, SyntheticDomainDataset};
use super::plan::StagePlan;
use super::train::{run_dfp, Registries, RunContext, StageReport};
use crate::distill::DistillConfig;
use crate::engine::softmax_rows;
use crate::error::{Error, Result};
use crate::model::{build_model, ForwardCtx, Mode, Model, PyramidSpec};
use crate::regularizers::ShakeDropConfig;
use crate::rng::{stream, Purpose};

/// Images per forward pass during evaluation.
pub const EVAL_BATCH: usize = 64;

fn require_eval(model: &Model<f32>) -> Result<()> {
    if model.mode() != Mode::Eval {
        return Err(Error::WrongMode {
            expected: "evaluation needs an eval-mode model",
        });
    }
    Ok(())
}

/// Softmax probabilities, one row per image.
pub fn predict_probs(model: &Model<f32>, images: &[Image]) -> Result<Vec<Vec<f64>>> {
    require_eval(model)?;
    let classes = model.spec.num_classes;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let logits = model.logits(&to_batch(chunk)?, &mut ForwardCtx::default())?;
        let probs = softmax_rows(logits.data(), classes);
        out.extend(probs.chunks(classes).map(|r| r.iter().map(|&v| v as f64).collect()));
    }
    Ok(out)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

pub fn accuracy_from(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return f64::NAN;
    }
    let hits = probs.iter().zip(labels).filter(|(p, &l)| argmax(p) == l).count();
    hits as f64 / labels.len() as f64
}

pub fn accuracy_on(model: &Model<f32>, images: &[Image], labels: &[usize]) -> Result<f64> {
    Ok(accuracy_from(&predict_probs(model, images)?, labels))
}

/// Plain accuracy on dataset `indices` rendered at `resolution`.
pub fn accuracy(model: &Model<f32>, data: &SyntheticDomainDataset, indices: &[usize], resolution: usize) -> Result<f64> {
    let images = data.render_all(indices, resolution);
    let labels: Vec<usize> = indices.iter().map(|&i| data.label(i)).collect();
    accuracy_on(model, &images, &labels)
}

/// Mean softmax over the clean images plus `tta_epochs` augmented copies.
/// Copy `t` of image `i` uses the stream `(seed, Tta, t, i)`.
pub fn tta_predict(model: &Model<f32>, images: &[Image], tta_epochs: i64, augs: &AugmentPipeline, seed: u64) -> Result<Vec<Vec<f64>>> {
    if tta_epochs < 0 {
        return Err(Error::config(format!("tta_epochs must be nonnegative, got {tta_epochs}")));
    }
    let mut acc = predict_probs(model, images)?;
    for t in 0..tta_epochs as u64 {
        let augmented: Vec<Image> = images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let mut copy = img.clone();
                augs.apply(&mut copy, &mut stream(seed, Purpose::Tta, t, i as u64));
                copy
            })
            .collect();
        for (row, p) in acc.iter_mut().zip(predict_probs(model, &augmented)?) {
            row.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
    }
    let n = (tta_epochs + 1) as f64;
    if tta_epochs > 0 {
        acc.iter_mut().for_each(|row| row.iter_mut().for_each(|v| *v /= n));
    }
    Ok(acc)
}

/// Anything that labels dataset samples.
pub trait Classifier: Debug {
    fn predict(&self, data: &SyntheticDomainDataset, indices: &[usize]) -> Result<Vec<usize>>;
}

/// Produces a classifier from a train/val split.
pub trait DomainLearner {
    fn fit(&mut self, data: &SyntheticDomainDataset, split: &Split, seed: u64) -> Result<Box<dyn Classifier>>;
}

/// A model evaluated at a fixed resolution, optionally with TTA.
#[derive(Debug)]
pub struct ModelClassifier {
    pub model: Model<f32>,
    pub resolution: usize,
    pub tta_epochs: usize,
    pub augs: AugmentPipeline,
    pub seed: u64,
}

impl Classifier for ModelClassifier {
    fn predict(&self, data: &SyntheticDomainDataset, indices: &[usize]) -> Result<Vec<usize>> {
        let images = data.render_all(indices, self.resolution);
        let probs = tta_predict(&self.model, &images, self.tta_epochs as i64, &self.augs, self.seed)?;
        Ok(probs.iter().map(|p| argmax(p)).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LodoRow {
    pub held_out_domain: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LodoReport {
    pub rows: Vec<LodoRow>,
    pub average: f64,
}

/// For every domain: fit on the others (split `1 - val_fraction` /
/// `val_fraction`), then score on the held-out domain.
pub fn leave_one_domain_out_eval(
    learner: &mut dyn DomainLearner,
    data: &SyntheticDomainDataset,
    val_fraction: f64,
    seed: u64,
) -> Result<LodoReport> {
    let mut rows = Vec::with_capacity(data.config.num_domains);
    for d in 0..data.config.num_domains {
        let split = split_domains(data, &[d], val_fraction, seed)?;
        if split.test.is_empty() {
            return Err(Error::Dataset(format!("domain {d} has no samples")));
        }
        let clf = learner.fit(data, &split, seed)?;
        let pred = clf.predict(data, &split.test)?;
        let hits = pred.iter().zip(&split.test).filter(|(p, &i)| **p == data.label(i)).count();
        rows.push(LodoRow {
            held_out_domain: d,
            accuracy: hits as f64 / split.test.len() as f64,
        });
    }
    let average = rows.iter().map(|r| r.accuracy).sum::<f64>() / rows.len() as f64;
    Ok(LodoReport { rows, average })
}

/// `held_out_domain,accuracy` rows followed by an `average` row.
pub fn write_lodo_csv<W: std::io::Write>(mut w: W, report: &LodoReport) -> Result<()> {
    writeln!(w, "held_out_domain,accuracy")?;
    for r in &report.rows {
        writeln!(w, "{},{}", r.held_out_domain, r.accuracy)?;
    }
    writeln!(w, "average,{}", report.average)?;
    Ok(())
}

/// Trains the full stage plan from a fresh model and keeps the stage
/// checkpoint with the best validation accuracy.
#[derive(Clone, Debug)]
pub struct DfpLearner {
    pub spec: PyramidSpec,
    pub shakedrop: ShakeDropConfig,
    pub plans: Vec<StagePlan>,
    pub distill: DistillConfig,
    pub augment: AugmentSettings,
    /// TTA copies used at prediction time.
    pub tta_epochs: usize,
}

impl DomainLearner for DfpLearner {
    fn fit(&mut self, data: &SyntheticDomainDataset, split: &Split, seed: u64) -> Result<Box<dyn Classifier>> {
        let model = build_model::<f32>(&self.spec, &self.shakedrop, seed)?;
        let run = RunContext {
            data,
            split,
            seed,
            distill: self.distill.clone(),
            augment: self.augment.clone(),
            registries: Registries::default(),
        };
        let outcome = run_dfp(model, &self.plans, &run)?;
        let score = |r: &StageReport| if r.val_acc.is_nan() { f64::NEG_INFINITY } else { r.val_acc };
        let best = outcome
            .stages
            .into_iter()
            .reduce(|a, b| if score(&b) >= score(&a) { b } else { a })
            .expect("validated plans are non-empty");
        let plan = self.plans.iter().find(|p| p.stage_index == best.stage_index).expect("stage came from plans");
        let augs = AugmentPipeline::build(&plan.augmentations, &self.augment, &run.registries.augmentations)?;
        Ok(Box::new(ModelClassifier {
            model: best.checkpoint,
            resolution: best.resolution,
            tta_epochs: self.tta_epochs,
            augs,
            seed,
        }))
    }
}
