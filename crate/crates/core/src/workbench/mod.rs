//! Experiment configuration, pipeline orchestration, and artifact emission.

pub mod config;
pub mod pipeline;
pub mod render;
pub mod tables;

pub use config::{ConfigError, ExperimentConfig, MethodKind};
pub use pipeline::{run_pipeline, PipelineError, RunMetadata, Stage};
pub use render::render_heatmap;
