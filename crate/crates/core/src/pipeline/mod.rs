//! The four-stage distillation fine-tuning pipeline and its data plumbing.

pub mod augment;
pub mod cutmix;
pub mod data;
pub mod eval;
pub mod plan;
pub mod train;

pub use augment::{AugmentPipeline, AugmentSettings, Augmentation, ColorJitterConfig};
pub use cutmix::{cutmix, cutmix_with, CutMixConfig, CutMixOutcome};
pub use data::{generate_synthetic_domains, split_domains, to_batch, Image, Split, SyntheticConfig, SyntheticDomainDataset};
pub use eval::{
    accuracy, leave_one_domain_out_eval, predict_probs, tta_predict, write_lodo_csv, Classifier, DomainLearner, LodoReport, LodoRow,
    DfpLearner, ModelClassifier,
};
pub use plan::{default_stage_plans, validate_plans, LossMode, OptimizerSpec, StagePlan};
pub use train::{run_dfp, train_stage, write_metrics_csv, DfpOutcome, EpochMetrics, Registries, RunContext, StageEnd, StageObjective, StageReport};
