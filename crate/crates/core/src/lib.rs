//! Invertible DDNM sampling for block-based image compressed sensing.
//!
//! The crate holds a small reverse-mode autodiff engine, the block sampling
//! operator, the learnable diffusion schedule, the noise estimator, the
//! wired T-step sampler, training and image metrics.

pub mod config;
pub mod cs;
pub mod data;
pub mod error;
pub mod estimator;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod train;

mod codec;

pub use config::{Precision, TrainConfig};
pub use cs::{Measurement, Physics, SamplingOperator};
pub use error::{Error, Result};
pub use estimator::{Estimator, EstimatorConfig};
pub use metrics::{psnr, ssim, EvalMode, EvalReport};
pub use rng::Rng;
pub use sampler::{Couplings, Framework, FrameworkConfig};
pub use schedule::{DiffusionSchedule, InitMode};
pub use tensor::{CacheMode, ParamSet, Real, Tape, Tensor};
pub use train::{Checkpoint, Model};
