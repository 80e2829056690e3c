//! Task-aware per-pixel inverse-operator image restoration.
//!
//! The numeric core is generic over [`Scalar`] (`f32`, `f64`); the `*32` and
//! `*64` aliases below name the common instantiations.

pub mod ablate;
pub mod activation;
pub mod bench;
pub mod checkpoint;
pub mod dataset;
pub mod degrade;
pub mod error;
pub mod eval;
pub mod fft;
pub mod image;
pub mod io;
pub mod kernel;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod net;
pub mod nn;
pub mod optim;
pub mod param;
pub mod procedural;
pub mod rng;
pub mod scalar;
pub mod tam;
pub mod tensor_io;
pub mod trainer;

pub use error::{Error, Result};
pub use image::Image;
pub use rng::Rng;
pub use scalar::Scalar;

pub type Image32 = Image<f32>;
pub type Image64 = Image<f64>;
pub type KernelField32 = kernel::KernelField<f32>;
pub type KernelField64 = kernel::KernelField<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
