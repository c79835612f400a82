//! 8-bit uniform linear quantization for neural networks.
//!
//! The crate covers the whole pipeline with no I/O and no `std` dependency:
//!
//! * [`quant`]: scalar and matrix quantization and recovery. Codes are
//!   `round(Q·x) − round(Q·v_min)` and recovery adds the same rounded offset
//!   back, so the quantize/recover pair is free of bias error.
//! * [`qgemm`]: products of two independently quantized matrices computed
//!   with exact 32-bit integer accumulation.
//! * [`nn`]: float and quantized forward passes for fully-connected and
//!   LSTM-with-projection layers. Layers consume and produce floats; inputs
//!   are quantized on the fly.
//! * [`train`]: BPTT, SGD, quantization-aware SGD and the learning-rate
//!   schedules used for projection layers.
//! * [`task`]: a synthetic frame-labelled sequence task and the
//!   match / mismatch / quant / quant-all evaluation protocol.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

mod error;
mod math;
mod matrix;

pub mod nn;
pub mod qgemm;
pub mod quant;
pub mod task;
pub mod train;

pub use error::{Error, Result};
pub use matrix::FloatMatrix;
pub use nn::{Model, Precision, QuantScope};
pub use quant::{QuantParams, QuantizedMatrix};
