//! Hadamard-transform quantized backpropagation for linear layers.
//!
//! The forward pass stays in FP32. The activation gradient `g_x = g_y · w` is
//! computed from block-Hadamard-transformed INT4 operands, and the weight
//! gradient `g_w = g_yᵀ · x` from Hadamard low-rank reduced INT8 operands, with
//! activations stored pre-compressed between the passes.

pub mod abc;
pub mod backward;
pub mod cost;
pub mod counters;
pub mod error;
pub mod hadamard;
pub mod harness;
pub mod igemm;
pub mod linalg;
pub mod lqs;
pub mod quantizer;
pub mod selftest;

pub use error::{HotError, Result};
pub use linalg::{Matrix, Rng};
