//! Desk-scale toolkit for studying flat minima: a small reverse-mode
//! engine, the ALRS scheduler, ShakeDrop, MESA self-distillation, a Wide
//! PyramidNet, the four-stage distillation fine-tuning pipeline and
//! loss-landscape probes.

pub mod distill;
pub mod engine;
pub mod error;
pub mod landscape;
pub mod model;
pub mod pipeline;
pub mod registry;
pub mod rng;
pub mod regularizers;
pub mod sched;

pub use error::{Error, Result};
