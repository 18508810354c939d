//! Joint restoration of sparse view sets with a multi-view conditional
//! diffusion model: data IO, degradations, multi-view geometry, the
//! network, diffusion training and sampling, and evaluation metrics.
//!
//! Network, diffusion and optimizer code is generic over [`scalar::Scalar`]
//! (`f32` or `f64`); the aliases below name the common instantiations.

pub mod config;
pub mod dataio;
pub mod degradations;
pub mod diffusion;
pub mod geometry;
pub mod metrics;
pub mod mv_unet;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use scalar::Scalar;

pub type MvUnetF32 = mv_unet::MvUnet<f32>;
pub type MvUnetF64 = mv_unet::MvUnet<f64>;
pub type LatentSetF32 = tensor::LatentSet<f32>;
pub type LatentSetF64 = tensor::LatentSet<f64>;
pub type TrainStateF32 = trainer::TrainState<f32>;
pub type TrainStateF64 = trainer::TrainState<f64>;
pub type AdamF32 = optim::Adam<f32>;
pub type AdamF64 = optim::Adam<f64>;
