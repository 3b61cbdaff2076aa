//! Temporally sparse execution of feed-forward networks.
//!
//! A network layer that receives slowly changing input can transmit only the
//! change in its quantized activation. This crate implements the quantizers,
//! four equivalent executors (original, temporal-difference, rounding and
//! sigma-delta), the flop and energy model used to compare them, and a
//! gradient-based optimizer for the per-layer quantization scales.

pub mod cost;
pub mod data;
pub mod error;
pub mod experiment;
pub mod network;
pub mod quantize;
pub mod scale_opt;
pub mod tensor;

pub use error::{Error, Result};
