//! Epoch-level learning-rate schedules.
//!
//! [`AlrsState`]/[`alrs_step`] implement the adaptive scheduler: linear
//! warmup to the target rate, then a multiplicative decay whenever the epoch
//! loss changes by less than both a relative (`slope_threshold`) and an
//! absolute (`diff_threshold`) amount. Training stops once the rate falls
//! below `min_lr`. [`CosineSchedule`] is the epoch-budgeted baseline.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;

/// When the post-warmup decay fires.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlateauRule {
    /// `|delta / L_n| < slope_threshold && |delta| < diff_threshold` with
    /// `delta = L_p - L_n`; small increases and small decreases both decay.
    #[default]
    Thresholds,
    /// Decay only when the epoch loss did not decrease (`L_n >= L_p`).
    NoDecrease,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlrsConfig {
    pub target_lr: f64,
    pub warmup_epochs: usize,
    pub decay_rate: f64,
    pub slope_threshold: f64,
    pub diff_threshold: f64,
    pub min_lr: f64,
    #[serde(default)]
    pub plateau_rule: PlateauRule,
}

/// Complete mutable state of the adaptive scheduler.
#[derive(Clone, Debug, PartialEq)]
pub struct AlrsState {
    /// Epoch whose learning rate is `current_lr`.
    pub epoch: usize,
    pub warmup_epochs: usize,
    pub current_lr: f64,
    pub target_lr: f64,
    pub prev_loss: f64,
    pub curr_loss: f64,
    /// Number of losses observed; no decay can fire before two exist.
    pub losses_seen: usize,
    pub decay_rate: f64,
    pub slope_threshold: f64,
    pub diff_threshold: f64,
    pub min_lr: f64,
    pub plateau_rule: PlateauRule,
}

/// Result of one [`alrs_step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlrsOutcome {
    pub lr: f64,
    pub decayed: bool,
    pub terminate: bool,
}

fn warmup_lr(target: f64, epoch: usize, warmup: usize) -> f64 {
    if epoch >= warmup {
        target
    } else {
        target * epoch as f64 / warmup as f64
    }
}

impl AlrsState {
    pub fn new(cfg: &AlrsConfig) -> Result<Self> {
        let ok = cfg.target_lr > 0.0
            && cfg.target_lr.is_finite()
            && cfg.decay_rate > 0.0
            && cfg.decay_rate < 1.0
            && cfg.slope_threshold > 0.0
            && cfg.diff_threshold > 0.0
            && cfg.min_lr > 0.0
            && cfg.min_lr < cfg.target_lr;
        if !ok {
            return Err(Error::config(format!(
                "alrs requires target_lr > min_lr > 0, 0 < decay_rate < 1 and positive thresholds, got {cfg:?}"
            )));
        }
        Ok(AlrsState {
            epoch: 0,
            warmup_epochs: cfg.warmup_epochs,
            current_lr: warmup_lr(cfg.target_lr, 0, cfg.warmup_epochs),
            target_lr: cfg.target_lr,
            prev_loss: f64::INFINITY,
            curr_loss: f64::INFINITY,
            losses_seen: 0,
            decay_rate: cfg.decay_rate,
            slope_threshold: cfg.slope_threshold,
            diff_threshold: cfg.diff_threshold,
            min_lr: cfg.min_lr,
            plateau_rule: cfg.plateau_rule,
        })
    }

    fn plateau(&self) -> bool {
        if self.losses_seen < 2 {
            return false;
        }
        let delta = self.prev_loss - self.curr_loss;
        match self.plateau_rule {
            PlateauRule::Thresholds => {
                (delta / self.curr_loss).abs() < self.slope_threshold && delta.abs() < self.diff_threshold
            }
            PlateauRule::NoDecrease => self.curr_loss >= self.prev_loss,
        }
    }
}

/// Feeds the loss of the epoch that just finished and returns the learning
/// rate for the next epoch.
///
/// Warmup epochs (`epoch <= warmup_epochs`) never terminate, so the zero rate
/// of epoch 0 does not end training. A non-finite loss is rejected and the
/// state is left untouched.
pub fn alrs_step(state: &mut AlrsState, epoch_loss: f64) -> Result<AlrsOutcome> {
    if !epoch_loss.is_finite() {
        return Err(Error::NonFiniteLoss(epoch_loss));
    }
    state.prev_loss = state.curr_loss;
    state.curr_loss = epoch_loss;
    state.losses_seen += 1;
    state.epoch += 1;

    let (lr, decayed) = if state.epoch <= state.warmup_epochs {
        (warmup_lr(state.target_lr, state.epoch, state.warmup_epochs), false)
    } else if state.plateau() {
        (state.decay_rate * state.current_lr, true)
    } else {
        (state.current_lr, false)
    };
    state.current_lr = lr;
    let terminate = state.epoch > state.warmup_epochs && lr < state.min_lr;
    Ok(AlrsOutcome { lr, decayed, terminate })
}

/// Half-cosine from `base_lr` at epoch 0 down to `min_lr` at `total_epochs`.
pub fn cosine_step(epoch: usize, total_epochs: usize, base_lr: f64, min_lr: f64) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::config("cosine schedule needs total_epochs > 0"));
    }
    if epoch > total_epochs {
        return Err(Error::config(format!("epoch {epoch} beyond cosine budget {total_epochs}")));
    }
    let progress = epoch as f64 / total_epochs as f64;
    Ok(min_lr + (base_lr - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// One scheduler decision, written as one CSV row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// Epoch that just finished.
    pub epoch: usize,
    /// Learning rate used during that epoch.
    pub lr: f64,
    pub loss: f64,
    /// Whether this observation decayed the rate for the next epoch.
    pub decayed: bool,
    pub terminate: bool,
}

pub trait LrScheduler: Send + std::fmt::Debug {
    fn name(&self) -> &'static str;

    /// Epoch counter, 0 at the start of a stage.
    fn epoch(&self) -> usize;

    /// Learning rate for the current epoch.
    fn lr(&self) -> f64;

    /// Records the finished epoch's mean loss and advances to the next epoch.
    fn observe(&mut self, epoch_loss: f64) -> Result<EpochRecord>;
}

#[derive(Clone, Debug)]
pub struct Alrs {
    pub state: AlrsState,
}

impl Alrs {
    pub fn new(cfg: &AlrsConfig) -> Result<Self> {
        Ok(Alrs {
            state: AlrsState::new(cfg)?,
        })
    }
}

impl LrScheduler for Alrs {
    fn name(&self) -> &'static str {
        "alrs"
    }

    fn epoch(&self) -> usize {
        self.state.epoch
    }

    fn lr(&self) -> f64 {
        self.state.current_lr
    }

    fn observe(&mut self, epoch_loss: f64) -> Result<EpochRecord> {
        let (epoch, lr) = (self.state.epoch, self.state.current_lr);
        let out = alrs_step(&mut self.state, epoch_loss)?;
        Ok(EpochRecord {
            epoch,
            lr,
            loss: epoch_loss,
            decayed: out.decayed,
            terminate: out.terminate,
        })
    }
}

#[derive(Clone, Debug)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_epochs: usize,
    epoch: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, min_lr: f64, total_epochs: usize) -> Result<Self> {
        cosine_step(0, total_epochs, base_lr, min_lr)?;
        Ok(CosineSchedule {
            base_lr,
            min_lr,
            total_epochs,
            epoch: 0,
        })
    }
}

impl LrScheduler for CosineSchedule {
    fn name(&self) -> &'static str {
        "cosine"
    }

    fn epoch(&self) -> usize {
        self.epoch
    }

    fn lr(&self) -> f64 {
        cosine_step(self.epoch.min(self.total_epochs), self.total_epochs, self.base_lr, self.min_lr)
            .unwrap_or(self.min_lr)
    }

    fn observe(&mut self, epoch_loss: f64) -> Result<EpochRecord> {
        if !epoch_loss.is_finite() {
            return Err(Error::NonFiniteLoss(epoch_loss));
        }
        let lr = self.lr();
        let epoch = self.epoch;
        self.epoch += 1;
        Ok(EpochRecord {
            epoch,
            lr,
            loss: epoch_loss,
            decayed: false,
            terminate: self.epoch >= self.total_epochs,
        })
    }
}

/// Scheduler section of a stage plan. Fields irrelevant to the chosen
/// `kind` are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSettings {
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    pub decay_rate: f64,
    #[serde(default = "default_threshold")]
    pub slope_threshold: f64,
    #[serde(default = "default_threshold")]
    pub diff_threshold: f64,
    pub min_lr: f64,
    #[serde(default)]
    pub plateau_rule: PlateauRule,
    /// Epoch budget, used by `cosine`.
    #[serde(default)]
    pub total_epochs: Option<usize>,
}

impl Default for SchedulerSettings {
    fn default() -> Self {
        SchedulerSettings {
            kind: default_kind(),
            warmup_epochs: default_warmup(),
            decay_rate: 0.9,
            slope_threshold: default_threshold(),
            diff_threshold: default_threshold(),
            min_lr: 1e-4,
            plateau_rule: PlateauRule::default(),
            total_epochs: None,
        }
    }
}

fn default_kind() -> String {
    "alrs".into()
}

fn default_warmup() -> usize {
    5
}

fn default_threshold() -> f64 {
    0.2
}

/// What a scheduler factory receives: the stage's target rate plus its
/// scheduler settings.
#[derive(Clone, Debug)]
pub struct ScheduleSpec {
    pub target_lr: f64,
    pub settings: SchedulerSettings,
}

impl ScheduleSpec {
    pub fn alrs_config(&self) -> AlrsConfig {
        AlrsConfig {
            target_lr: self.target_lr,
            warmup_epochs: self.settings.warmup_epochs,
            decay_rate: self.settings.decay_rate,
            slope_threshold: self.settings.slope_threshold,
            diff_threshold: self.settings.diff_threshold,
            min_lr: self.settings.min_lr,
            plateau_rule: self.settings.plateau_rule,
        }
    }
}

pub type SchedulerRegistry = Registry<ScheduleSpec, dyn LrScheduler>;

/// Built-in schedulers: `alrs`, `cosine`.
pub fn registry() -> SchedulerRegistry {
    let mut r = SchedulerRegistry::new("scheduler");
    r.register("alrs", |spec: &ScheduleSpec| {
        Ok(Box::new(Alrs::new(&spec.alrs_config())?) as Box<dyn LrScheduler>)
    });
    r.register("cosine", |spec: &ScheduleSpec| {
        let total = spec
            .settings
            .total_epochs
            .ok_or_else(|| Error::config("cosine scheduler requires total_epochs"))?;
        Ok(Box::new(CosineSchedule::new(spec.target_lr, spec.settings.min_lr, total)?) as Box<dyn LrScheduler>)
    });
    r
}

pub fn write_schedule_csv<W: Write>(mut w: W, records: &[EpochRecord]) -> Result<()> {
    writeln!(w, "epoch,lr,epoch_loss,decayed,terminate")?;
    for r in records {
        writeln!(w, "{},{},{},{},{}", r.epoch, r.lr, r.loss, r.decayed, r.terminate)?;
    }
    Ok(())
}
