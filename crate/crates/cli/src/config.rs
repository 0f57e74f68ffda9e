//! Run configuration: one TOML file, unknown keys rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use flatland::distill::DistillConfig;
use flatland::landscape::Normalization;
use flatland::model::PyramidSpec;
use flatland::pipeline::plan::{default_stage_plans, validate_plans, StagePlan};
use flatland::pipeline::{AugmentSettings, SyntheticConfig};
use flatland::regularizers::{Granularity, ShakeDropConfig};

/// Environment variable that replaces `seed` when set.
pub const SEED_ENV: &str = "FLATLAND_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Domains kept out of training and used as the test split.
    pub held_out_domains: Vec<usize>,
    pub val_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            held_out_domains: vec![2],
            val_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub tta_epochs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { tta_epochs: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeConfig {
    pub normalization: Normalization,
    pub r: f64,
    pub steps_1d: usize,
    pub steps_2d: usize,
    /// Size of the fixed training batch every grid point is scored on.
    pub eval_samples: usize,
    pub radius_fraction: f64,
    pub svg: bool,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        LandscapeConfig {
            normalization: Normalization::Filter,
            r: 1.0,
            steps_1d: 41,
            steps_2d: 21,
            eval_samples: 256,
            radius_fraction: 1.0,
            svg: true,
        }
    }
}

/// Desk ShakeDrop: per-example draws.
pub fn desk_shakedrop() -> ShakeDropConfig {
    ShakeDropConfig {
        granularity: Granularity::PerExample,
        ..Default::default()
    }
}

/// Desk stage plans: the library defaults with minimum rates of 1e-3 and
/// 1e-4 for the low and high resolution stages.
pub fn desk_stage_plans() -> Vec<StagePlan> {
    let mut plans = default_stage_plans();
    for p in &mut plans {
        p.scheduler.min_lr = if p.stage_index <= 2 { 1e-3 } else { 1e-4 };
    }
    plans
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: SyntheticConfig,
    pub split: SplitConfig,
    pub model: PyramidSpec,
    pub shakedrop: ShakeDropConfig,
    pub distill: DistillConfig,
    pub augment: AugmentSettings,
    pub stages: Vec<StagePlan>,
    pub eval: EvalConfig,
    pub landscape: LandscapeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/desk"),
            dataset: SyntheticConfig::default(),
            split: SplitConfig::default(),
            model: PyramidSpec::default(),
            shakedrop: desk_shakedrop(),
            distill: DistillConfig::default(),
            augment: AugmentSettings::default(),
            stages: desk_stage_plans(),
            eval: EvalConfig::default(),
            landscape: LandscapeConfig::default(),
        }
    }
}

/// A parsed, validated configuration plus the digest of its source text.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub sha256: String,
    pub path: PathBuf,
}

pub fn parse(text: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::new(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        anyhow::anyhow!("config key `{path}`: {}", e.into_inner().message())
    })?;
    Ok(cfg)
}

pub fn validate(cfg: &RunConfig) -> Result<()> {
    cfg.dataset.validate().context("dataset")?;
    cfg.model.validate().context("model")?;
    cfg.shakedrop.validate().context("shakedrop")?;
    cfg.distill.validate().context("distill")?;
    validate_plans(&cfg.stages)?;
    if cfg.model.num_classes != cfg.dataset.num_classes {
        bail!(
            "model.num_classes: {} does not match dataset.num_classes {}",
            cfg.model.num_classes,
            cfg.dataset.num_classes
        );
    }
    for (i, p) in cfg.stages.iter().enumerate() {
        cfg.model
            .check_resolution(p.resolution)
            .with_context(|| format!("stages[{i}].resolution"))?;
    }
    if let Some(&d) = cfg.split.held_out_domains.iter().find(|&&d| d >= cfg.dataset.num_domains) {
        bail!("split.held_out_domains: domain {d} does not exist");
    }
    if cfg.split.held_out_domains.len() >= cfg.dataset.num_domains {
        bail!("split.held_out_domains: at least one domain must remain for training");
    }
    if !(0.0..1.0).contains(&cfg.split.val_fraction) {
        bail!("split.val_fraction: must lie in [0, 1)");
    }
    let l = &cfg.landscape;
    if !(l.r > 0.0) || l.steps_1d % 2 == 0 || l.steps_2d % 2 == 0 || l.eval_samples == 0 {
        bail!("landscape: r must be positive, steps odd and eval_samples positive");
    }
    Ok(())
}

/// Reads, parses and validates `path`, then applies `FLATLAND_SEED`.
pub fn load(path: &Path) -> Result<LoadedConfig> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let text = std::str::from_utf8(&bytes).context("config is not UTF-8")?;
    let mut config = parse(text)?;
    if let Ok(v) = std::env::var(SEED_ENV) {
        config.seed = v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer"))?;
    }
    validate(&config)?;
    Ok(LoadedConfig {
        config,
        sha256: hex::encode(Sha256::digest(&bytes)),
        path: path.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_valid_defaults() {
        let cfg = parse("").unwrap();
        validate(&cfg).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        assert_eq!(parse(&text).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let err = parse("[model]\ninput_resolution = 16\nwiden = 2.0\n").unwrap_err().to_string();
        assert!(err.contains("model"), "{err}");
        let err = parse("[shakedrop]\ngate_probability = 0.5\n").unwrap_err().to_string();
        assert!(err.contains("shakedrop"), "{err}");
    }

    #[test]
    fn all_ce_sequence_rejected() {
        let mut cfg = RunConfig::default();
        for s in &mut cfg.stages {
            s.loss_mode = flatland::pipeline::LossMode::Ce;
        }
        let text = toml::to_string(&cfg).unwrap();
        let err = validate(&parse(&text).unwrap()).unwrap_err().to_string();
        assert!(err.contains("stages[1].loss_mode"), "{err}");
    }

    #[test]
    fn bad_value_names_nested_path() {
        let err = parse("[[stages]]\nstage_index = 1\nresolution = 16\nloss_mode = \"ce\"\nlr = \"fast\"\nbatch_size = 8\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("stages[0].lr"), "{err}");
    }
}
