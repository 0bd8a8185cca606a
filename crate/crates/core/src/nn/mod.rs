//! The noise prediction network and its receptive-field tools.

pub mod denoiser;
pub mod layers;
pub mod params;
pub mod receptive;

pub use denoiser::{plan, Denoiser, DenoiserConfig, NoisePredictor, PlanOp, Trace};
pub use params::{NamedArray, ParamId, ParamSet};
pub use receptive::{impulse_probe, probe_size_for, receptive_field, ReceptiveField};
