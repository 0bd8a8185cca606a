pub mod error;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod sample;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use nn::{Denoiser, DenoiserConfig, NoisePredictor, ReceptiveField};
pub use scalar::{DType, Scalar};
pub use schedule::{NoiseSchedule, NoisySample, ScheduleParams};
pub use tensor::Tensor;
pub use train::{Checkpoint, TrainConfig};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Denoiser32 = Denoiser<f32>;
pub type Denoiser64 = Denoiser<f64>;
pub type Checkpoint32 = Checkpoint<f32>;
pub type Checkpoint64 = Checkpoint<f64>;
