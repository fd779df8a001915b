//! Layer-wise Hebbian training with the Krotov-Hopfield rule.
//!
//! Rule-trainable layers (dense and convolutional) are trained one after the
//! other with a local, gradient-free update; a supervised head on top is then
//! trained with backprop while the Hebbian layers stay frozen.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod layers;
pub mod optim;
pub mod rules;
pub mod tensor;
pub mod viz;

pub use error::{HebbError, Result};
pub use tensor::{RngState, Tensor};
