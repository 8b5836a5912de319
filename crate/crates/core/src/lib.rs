//! Attention-augmented dense-gated ConvLSTM for tropical-cyclone rapid
//! intensification (RI) prediction from two-channel satellite frame sequences.
//!
//! The crate is `no_std` (with `alloc`) and holds everything that is pure
//! computation: a small reverse-mode autodiff tape, layers and the Adam
//! optimizer, the recurrent cells, both attention mechanisms, the assembled
//! model, a synthetic cyclone generator, and forecast-verification metrics.
//! File formats, configuration and the command-line driver live in the `ri`
//! crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod cells;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
