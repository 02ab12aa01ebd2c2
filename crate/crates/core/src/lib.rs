//! Flexible-modal vision transformer with cross-modal blocks, built on a
//! small f64 reverse-mode autograd engine.
//!
//! Layers, bottom up: [`tensor`] and [`autograd`]; [`nn`] and
//! [`attention`]; [`model`]; [`train`]. [`metrics`] and [`data`] stand on
//! their own.

pub mod attention;
pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod modality;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use modality::Modality;
pub use tensor::Tensor;
