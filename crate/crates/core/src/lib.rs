//! Kernels and harness for an SSM-fused real-time object detector.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense NCHW tensors, the reverse-mode [`tensor::Tape`], and
//!   the finite-difference gradient checker.
//! - [`ssm`]: continuous-time SSM discretization, sequential and blocked
//!   selective scans, and the four-direction 2D cross-scan.
//! - [`blocks`]: ECAConv, ECACSP, VSS, SimVSS, FFN and the stem.
//! - [`model`]: N/S/M detector assembly, decoding, NMS, parameter and FLOP
//!   accounting, checkpoints.
//! - [`harness`]: run configuration, synthetic data, toy training, mAP
//!   evaluation, image I/O, letterboxing and scan benchmarks.

// `!(x > 0.0)` deliberately rejects NaN; kernels index several slices per loop.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod blocks;
pub mod error;
pub mod harness;
pub mod model;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Float, Tensor};
