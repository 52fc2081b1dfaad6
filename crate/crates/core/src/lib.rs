//! Desk-scale workbench for networks with input-channel-wise heterogeneous
//! precisions: training, packing, bit-exact simulated inference on a
//! configurable-MAC SIMD machine, and cost reporting.

pub mod cost;
pub mod error;
pub mod experiment;
pub mod kernels;
pub mod mac;
pub mod pack;
pub mod qformat;
pub mod selftest;
pub mod train;
pub mod vexec;

pub use error::{Error, Result};
