//! Stage training loop and the four-stage orchestrator.

use std::fmt::Debug;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::augment::{self, AugmentPipeline, AugmentRegistry, AugmentSettings};
use super::cutmix::{cutmix, one_hot};
use super::data::{to_batch, Image, Split, SyntheticDomainDataset};
use super::eval::accuracy_on;
use super::plan::{optimizer_registry, validate_plans, LossMode, OptimizerRegistry, StagePlan};
use crate::distill::{ce_train_step, mesa_train_step, DistillConfig, TeacherState};
use crate::engine::{Optimizer, Tensor};
use crate::error::{Error, Result};
use crate::model::{ForwardCtx, Mode, Model};
use crate::registry::Registry;
use crate::rng::{stream, Purpose};
use crate::sched::{self, SchedulerRegistry};

/// Consecutive non-finite epochs after which a stage is aborted.
pub const MAX_NONFINITE_EPOCHS: usize = 3;

/// The loss a stage optimizes.
pub trait StageObjective: Send + Debug {
    fn name(&self) -> &'static str;

    /// Called once before the first epoch of the stage.
    fn begin(&mut self, student: &Model<f32>) -> Result<()>;

    fn step(
        &mut self,
        student: &mut Model<f32>,
        images: &Tensor<f32>,
        targets: &Tensor<f32>,
        optimizer: &mut dyn Optimizer<f32>,
        lr: f64,
        ctx: &mut ForwardCtx,
    ) -> Result<f64>;

    fn teacher(&self) -> Option<&Model<f32>> {
        None
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CrossEntropy;

impl StageObjective for CrossEntropy {
    fn name(&self) -> &'static str {
        "ce"
    }

    fn begin(&mut self, _student: &Model<f32>) -> Result<()> {
        Ok(())
    }

    fn step(
        &mut self,
        student: &mut Model<f32>,
        images: &Tensor<f32>,
        targets: &Tensor<f32>,
        optimizer: &mut dyn Optimizer<f32>,
        lr: f64,
        ctx: &mut ForwardCtx,
    ) -> Result<f64> {
        ce_train_step(student, images, targets, optimizer, lr, ctx)
    }
}

/// Self-distillation against an EMA teacher initialized from the incoming
/// student. The teacher sees the same (mixed) batch as the student.
#[derive(Debug)]
pub struct Mesa {
    pub cfg: DistillConfig,
    teacher: Option<TeacherState<f32>>,
}

impl Mesa {
    pub fn new(cfg: DistillConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Mesa { cfg, teacher: None })
    }
}

impl StageObjective for Mesa {
    fn name(&self) -> &'static str {
        "mesa"
    }

    fn begin(&mut self, student: &Model<f32>) -> Result<()> {
        self.teacher = Some(TeacherState::from_student(student, self.cfg.ema_decay)?);
        Ok(())
    }

    fn step(
        &mut self,
        student: &mut Model<f32>,
        images: &Tensor<f32>,
        targets: &Tensor<f32>,
        optimizer: &mut dyn Optimizer<f32>,
        lr: f64,
        ctx: &mut ForwardCtx,
    ) -> Result<f64> {
        let teacher = self.teacher.as_mut().ok_or(Error::WrongMode {
            expected: "mesa objective used before begin()",
        })?;
        mesa_train_step(student, teacher, images, targets, &self.cfg, optimizer, lr, ctx)
    }

    fn teacher(&self) -> Option<&Model<f32>> {
        self.teacher.as_ref().map(|t| &t.model)
    }
}

pub type ObjectiveRegistry = Registry<DistillConfig, dyn StageObjective>;

/// Registry with `ce` and `mesa`.
pub fn objective_registry() -> ObjectiveRegistry {
    let mut r = ObjectiveRegistry::new("objective");
    r.register("ce", |_| Ok(Box::new(CrossEntropy) as Box<dyn StageObjective>));
    r.register("mesa", |cfg: &DistillConfig| Ok(Box::new(Mesa::new(cfg.clone())?) as Box<dyn StageObjective>));
    r
}

/// All strategy registries used by a run.
#[derive(Debug)]
pub struct Registries {
    pub schedulers: SchedulerRegistry,
    pub optimizers: OptimizerRegistry,
    pub objectives: ObjectiveRegistry,
    pub augmentations: AugmentRegistry,
}

impl Default for Registries {
    fn default() -> Self {
        Registries {
            schedulers: sched::registry(),
            optimizers: optimizer_registry(),
            objectives: objective_registry(),
            augmentations: augment::registry(),
        }
    }
}

/// Everything besides the model and the plans that a run needs.
#[derive(Debug)]
pub struct RunContext<'a> {
    pub data: &'a SyntheticDomainDataset,
    pub split: &'a Split,
    pub seed: u64,
    pub distill: DistillConfig,
    pub augment: AugmentSettings,
    pub registries: Registries,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageEnd {
    /// The scheduler asked to stop.
    Scheduler,
    /// The epoch cap was reached first.
    EpochCap,
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub stage_index: usize,
    pub loss_mode: LossMode,
    pub resolution: usize,
    pub epochs: usize,
    pub final_train_loss: f64,
    pub val_acc: f64,
    pub end: StageEnd,
    pub metrics: Vec<EpochMetrics>,
    /// Student parameters at the end of the stage, in eval mode.
    pub checkpoint: Model<f32>,
}

#[derive(Clone, Debug)]
pub struct DfpOutcome {
    pub model: Model<f32>,
    pub stages: Vec<StageReport>,
}

fn stage_key(stage: usize, epoch: usize) -> u64 {
    ((stage as u64) << 32) | epoch as u64
}

/// Trains `model` for one stage and returns its report. The scheduler,
/// optimizer and objective are built fresh, so the learning rate restarts
/// from warmup.
pub fn train_stage(model: &mut Model<f32>, plan: &StagePlan, run: &RunContext<'_>) -> Result<StageReport> {
    model.spec.check_resolution(plan.resolution)?;
    let regs = &run.registries;
    let mut scheduler = regs.schedulers.build(&plan.scheduler.kind, &plan.schedule_spec())?;
    let mut optimizer = regs.optimizers.build(&plan.optimizer.kind, &plan.optimizer)?;
    let mut objective = regs.objectives.build(plan.loss_mode.key(), &run.distill)?;
    let augs = AugmentPipeline::build(&plan.augmentations, &run.augment, &regs.augmentations)?;
    let classes = run.data.num_classes();

    if run.split.train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let base: Vec<Image> = run.data.render_all(&run.split.train, plan.resolution);
    let labels: Vec<usize> = run.split.train.iter().map(|&i| run.data.label(i)).collect();
    let val_images = run.data.render_all(&run.split.val, plan.resolution);
    let val_labels: Vec<usize> = run.split.val.iter().map(|&i| run.data.label(i)).collect();

    model.set_mode(Mode::Train)?;
    objective.begin(model)?;
    let mut metrics = Vec::new();
    let mut nonfinite = 0;
    let mut step = 0u64;
    let mut end = StageEnd::EpochCap;
    for epoch in 0..plan.max_epochs {
        let lr = scheduler.lr();
        let mut order: Vec<usize> = (0..base.len()).collect();
        order.shuffle(&mut stream(run.seed, Purpose::Shuffle, plan.stage_index as u64, epoch as u64));
        let (mut total, mut seen) = (0.0, 0usize);
        for (b, chunk) in order.chunks(plan.batch_size).enumerate() {
            let mut images: Vec<Image> = chunk.iter().map(|&i| base[i].clone()).collect();
            if !augs.is_empty() {
                for (img, &i) in images.iter_mut().zip(chunk) {
                    let mut rng = stream(run.seed, Purpose::Augment, stage_key(plan.stage_index, epoch), run.split.train[i] as u64);
                    augs.apply(img, &mut rng);
                }
            }
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let targets = match &plan.cutmix {
                Some(cfg) => {
                    let mut rng = stream(run.seed, Purpose::CutMix, stage_key(plan.stage_index, epoch), b as u64);
                    cutmix(&mut images, &batch_labels, classes, cfg, &mut rng)?.targets
                }
                None => one_hot(&batch_labels, classes)?,
            };
            let x = to_batch(&images)?;
            let mut ctx = ForwardCtx::new(run.seed, stage_key(plan.stage_index, 0) | step);
            let loss = objective.step(model, &x, &targets, optimizer.as_mut(), lr, &mut ctx)?;
            step += 1;
            total += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = total / seen as f64;

        model.set_mode(Mode::Eval)?;
        let val_acc = if val_images.is_empty() { f64::NAN } else { accuracy_on(model, &val_images, &val_labels)? };
        model.set_mode(Mode::Train)?;
        metrics.push(EpochMetrics {
            epoch,
            lr,
            train_loss,
            val_acc,
        });

        if !train_loss.is_finite() {
            nonfinite += 1;
            if nonfinite >= MAX_NONFINITE_EPOCHS {
                return Err(Error::Diverged {
                    stage: plan.stage_index,
                    epochs: nonfinite,
                });
            }
            continue;
        }
        nonfinite = 0;
        if scheduler.observe(train_loss)?.terminate {
            end = StageEnd::Scheduler;
            break;
        }
    }
    let last = metrics.last().copied().expect("max_epochs > 0");
    let mut checkpoint = model.clone();
    checkpoint.set_mode(Mode::Eval)?;
    Ok(StageReport {
        stage_index: plan.stage_index,
        loss_mode: plan.loss_mode,
        resolution: plan.resolution,
        epochs: metrics.len(),
        final_train_loss: last.train_loss,
        val_acc: last.val_acc,
        end,
        metrics,
        checkpoint,
    })
}

/// Runs the stages in order. Parameters flow from each stage into the next.
pub fn run_dfp(mut model: Model<f32>, plans: &[StagePlan], run: &RunContext<'_>) -> Result<DfpOutcome> {
    validate_plans(plans)?;
    for p in plans {
        model.spec.check_resolution(p.resolution)?;
    }
    let mut stages = Vec::with_capacity(plans.len());
    for plan in plans {
        stages.push(train_stage(&mut model, plan, run)?);
    }
    model.set_mode(Mode::Eval)?;
    Ok(DfpOutcome { model, stages })
}

/// Per-stage metrics CSV: `epoch,lr,train_loss,val_acc`.
pub fn write_metrics_csv<W: std::io::Write>(mut w: W, metrics: &[EpochMetrics]) -> Result<()> {
    writeln!(w, "epoch,lr,train_loss,val_acc")?;
    for m in metrics {
        writeln!(w, "{},{},{},{}", m.epoch, m.lr, m.train_loss, m.val_acc)?;
    }
    Ok(())
}
