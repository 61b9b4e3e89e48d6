//! Shape attentive U-Net: a two-stream (texture + gated shape) segmentation
//! network with dual-attention decoders, trained end to end on a small
//! reverse-mode autodiff engine, and able to emit its internal attention maps.

pub mod autograd;
pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod gradcheck;
pub mod interpret;
pub mod nn;
pub mod objectives;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod test_util;

pub use error::{Error, Result};
