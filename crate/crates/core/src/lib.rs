//! Workbench for studying robustness and explainability of residual
//! classifiers on spectrogram images of synthetic device emissions.
//!
//! The pipeline runs end to end: synthesize emission recordings
//! ([`signalgen`]), turn them into normalized spectrogram images
//! ([`spectral`]), train deterministic or stochastic residual classifiers on
//! a from-scratch reverse-mode tensor engine ([`autodiff`], [`model`]),
//! probe the trained models with input-attribution methods
//! ([`attribution`]), measure classification robustness under Gaussian input
//! noise ([`eval`]), and orchestrate everything behind a config file and
//! content-addressed output directories ([`workbench`]).

pub mod attribution;
pub mod autodiff;
pub mod eval;
pub mod model;
pub mod seeds;
pub mod signalgen;
pub mod spectral;
pub mod workbench;

pub use attribution::AttributionMap;
pub use eval::EvalReport;
pub use model::{ResidualNet, ResidualNetConfig};
pub use signalgen::{DeviceProfile, TimeSeries};
pub use spectral::{ImageTensor, Spectrogram};
pub use workbench::ExperimentConfig;
