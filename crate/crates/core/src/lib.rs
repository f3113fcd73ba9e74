//! RDP-Net change detection.
//!
//! A from-scratch reverse-mode tensor core ([`autodiff`]) carries a
//! region-division / ConvMixer / region-composition network ([`model`]),
//! trained with an edge-weighted hybrid loss ([`loss`]) under an easy-to-hard
//! curriculum ([`curriculum`], [`train`]). Supporting modules cover synthetic
//! and tiled datasets ([`data`]), evaluation ([`metrics`]) and run
//! configuration ([`config`]).
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! name the common instantiations.

pub mod autodiff;
pub mod config;
pub mod curriculum;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autodiff::{Conv2dSpec, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type RdpNet32 = model::RdpNet<f32>;
pub type RdpNet64 = model::RdpNet<f64>;
pub type ParamRegistry32 = nn::ParamRegistry<f32>;
pub type ParamRegistry64 = nn::ParamRegistry<f64>;
