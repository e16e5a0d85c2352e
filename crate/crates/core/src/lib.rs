//! Core of the FEAR tracker family: a Siamese single-object tracker built from
//! a stride-16 feature extractor, a dual-template representation with a single
//! learnable mixing weight, a pixel-wise fusion block and anchor-free heads.
//!
//! The crate also ships the training objective, a synthetic data pipeline, the
//! inference engine and a virtual-clock efficiency benchmark (online 30 FPS
//! stream with frame skipping, offline warmup/count protocol) driven by a
//! simulated battery and thermal device model.

pub mod bench;
pub mod config;
pub mod datapipe;
pub mod error;
pub mod float;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod template_policy;
pub mod tracker;
pub mod trainer;

pub use error::{FearError, Result};
pub use float::Float;
pub use geometry::{BBox, CropTransform};
pub use model::{CostReport, FeatureMap, HeadOutputs, ModelConfig, Network};
pub use config::RunConfig;
pub use metrics::{evaluate, EvalMetrics};
pub use template_policy::{DualTemplateState, Embedding};
pub use tracker::{TrackSession, TrackerConfig, TrackerOutput};
