//! Per-stage configuration of the four-stage schedule.

use serde::{Deserialize, Serialize};

use super::cutmix::CutMixConfig;
use crate::engine::{AdamW, Optimizer, Sgd};
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::sched::{PlateauRule, ScheduleSpec, SchedulerSettings};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    #[serde(alias = "CE")]
    Ce,
    #[serde(alias = "MESA")]
    Mesa,
}

impl LossMode {
    /// Objective registry key.
    pub fn key(self) -> &'static str {
        match self {
            LossMode::Ce => "ce",
            LossMode::Mesa => "mesa",
        }
    }

    /// Mode required at `stage_index` (1-based): CE, MESA, CE, MESA.
    pub fn for_stage(stage_index: usize) -> Self {
        if stage_index % 2 == 1 {
            LossMode::Ce
        } else {
            LossMode::Mesa
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Ce => "CE",
            LossMode::Mesa => "MESA",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub kind: String,
    pub weight_decay: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            kind: "sgd".into(),
            weight_decay: 5e-4,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerSpec {
    pub fn adamw() -> Self {
        OptimizerSpec {
            kind: "adamw".into(),
            ..Default::default()
        }
    }
}

pub type OptimizerRegistry = Registry<OptimizerSpec, dyn Optimizer<f32>>;

/// Registry with `sgd` and `adamw`.
pub fn optimizer_registry() -> OptimizerRegistry {
    let mut r = OptimizerRegistry::new("optimizer");
    r.register("sgd", |s: &OptimizerSpec| {
        Ok(Box::new(Sgd::new(s.weight_decay, s.momentum)) as Box<dyn Optimizer<f32>>)
    });
    r.register("adamw", |s: &OptimizerSpec| {
        Ok(Box::new(AdamW::new(s.weight_decay, s.beta1, s.beta2, s.eps)) as Box<dyn Optimizer<f32>>)
    });
    r
}

fn default_max_epochs() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stage_index: usize,
    pub resolution: usize,
    pub loss_mode: LossMode,
    /// Target (maximum) learning rate; every stage restarts from warmup.
    pub lr: f64,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub scheduler: SchedulerSettings,
    pub batch_size: usize,
    #[serde(default)]
    pub augmentations: Vec<String>,
    #[serde(default)]
    pub cutmix: Option<CutMixConfig>,
    #[serde(default)]
    pub tta_epochs: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
}

impl StagePlan {
    pub fn schedule_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            target_lr: self.lr,
            settings: self.scheduler.clone(),
        }
    }
}

fn default_augmentations() -> Vec<String> {
    ["autoaugment", "color_jitter", "random_crop"].iter().map(|s| s.to_string()).collect()
}

/// Desk-scale defaults: 16 px for stages 1-2, 32 px for stages 3-4, SGD
/// then AdamW, decay 0.9/0.8, thresholds 0.2.
pub fn default_stage_plans() -> Vec<StagePlan> {
    (1..=4)
        .map(|k| {
            let low = k <= 2;
            StagePlan {
                stage_index: k,
                resolution: if low { 16 } else { 32 },
                loss_mode: LossMode::for_stage(k),
                lr: if low { 0.1 } else { 0.01 },
                optimizer: if low { OptimizerSpec::default() } else { OptimizerSpec::adamw() },
                scheduler: SchedulerSettings {
                    decay_rate: if low { 0.9 } else { 0.8 },
                    min_lr: if low { 1e-4 } else { 1e-5 },
                    plateau_rule: PlateauRule::Thresholds,
                    ..Default::default()
                },
                batch_size: if low { 48 } else { 16 },
                augmentations: default_augmentations(),
                cutmix: Some(CutMixConfig::default()),
                tta_epochs: 16,
                max_epochs: default_max_epochs(),
            }
        })
        .collect()
}

/// Checks a (possibly partial) plan list: strictly increasing indices in
/// 1..=4, CE/MESA alternation, stages 1-2 sharing a resolution and stages
/// 3-4 sharing a strictly larger one.
pub fn validate_plans(plans: &[StagePlan]) -> Result<()> {
    if plans.is_empty() {
        return Err(Error::config("stages: at least one stage is required"));
    }
    let mut last = 0;
    for (pos, p) in plans.iter().enumerate() {
        let at = format!("stages[{pos}]");
        if !(1..=4).contains(&p.stage_index) || p.stage_index <= last {
            return Err(Error::config(format!(
                "{at}.stage_index: expected increasing values in 1..=4, got {}",
                p.stage_index
            )));
        }
        last = p.stage_index;
        let want = LossMode::for_stage(p.stage_index);
        if p.loss_mode != want {
            return Err(Error::config(format!(
                "{at}.loss_mode: stage {} must use {want}, got {}",
                p.stage_index, p.loss_mode
            )));
        }
        if p.resolution == 0 || p.batch_size == 0 || p.max_epochs == 0 {
            return Err(Error::config(format!("{at}: resolution, batch_size and max_epochs must be positive")));
        }
        if !(p.lr > 0.0 && p.lr.is_finite()) {
            return Err(Error::config(format!("{at}.lr must be positive, got {}", p.lr)));
        }
    }
    let res = |k: usize| plans.iter().find(|p| p.stage_index == k).map(|p| p.resolution);
    for (a, b) in [(1, 2), (3, 4)] {
        if let (Some(ra), Some(rb)) = (res(a), res(b)) {
            if ra != rb {
                return Err(Error::config(format!(
                    "stages {a} and {b} must share a resolution, got {ra} and {rb}"
                )));
            }
        }
    }
    let low = [res(1), res(2)].into_iter().flatten().max();
    let high = [res(3), res(4)].into_iter().flatten().min();
    if let (Some(l), Some(h)) = (low, high) {
        if h <= l {
            return Err(Error::config(format!(
                "stages 3-4 resolution {h} must exceed stages 1-2 resolution {l}"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let plans = default_stage_plans();
        validate_plans(&plans).unwrap();
        let modes: Vec<LossMode> = plans.iter().map(|p| p.loss_mode).collect();
        assert_eq!(modes, vec![LossMode::Ce, LossMode::Mesa, LossMode::Ce, LossMode::Mesa]);
    }

    #[test]
    fn all_ce_rejected() {
        let mut plans = default_stage_plans();
        plans.iter_mut().for_each(|p| p.loss_mode = LossMode::Ce);
        let err = validate_plans(&plans).unwrap_err().to_string();
        assert!(err.contains("stages[1].loss_mode"), "{err}");
    }

    #[test]
    fn resolution_rules() {
        let mut plans = default_stage_plans();
        plans[1].resolution = 8;
        assert!(validate_plans(&plans).is_err());
        let mut plans = default_stage_plans();
        plans[2].resolution = 16;
        plans[3].resolution = 16;
        assert!(validate_plans(&plans).is_err());
    }

    #[test]
    fn subsets_allowed_in_order_only() {
        let plans = default_stage_plans();
        validate_plans(&plans[..1]).unwrap();
        validate_plans(&plans[2..]).unwrap();
        assert!(validate_plans(&[plans[1].clone(), plans[0].clone()]).is_err());
        assert!(validate_plans(&[]).is_err());
    }

    #[test]
    fn optimizers_by_name() {
        let r = optimizer_registry();
        assert_eq!(r.build("sgd", &OptimizerSpec::default()).unwrap().name(), "sgd");
        assert_eq!(r.build("adamw", &OptimizerSpec::adamw()).unwrap().name(), "adamw");
        assert!(r.build("lamb", &OptimizerSpec::default()).is_err());
    }
}
