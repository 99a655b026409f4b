//! Residual video diffusion.
//!
//! A dense tensor type with reverse-mode autodiff, the DDPM forward and
//! reverse processes, the autoregressive residual transform, the two
//! conditional U-Nets, the training and generation loops, and the
//! pixel-marginal CRPS metric.

pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod residual;
pub mod tensor;
pub mod tensor_file;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use data::{Dataset, DatasetKind, SyntheticSpec};
pub use diffusion::{NoiseSchedule, VarianceMode};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, ExperimentResult};
pub use metrics::CrpsReport;
pub use nn::{BlockConfig, DiffusionModel, ParamStore, Profile, RvdNet};
pub use residual::{FlowMode, ResidualConfig};
pub use tensor::{Real, Tensor};
pub use tensor_file::{TensorFileError, TensorSet};
pub use train::{SampleConfig, TrainConfig, Trainer};
