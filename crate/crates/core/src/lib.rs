//! Interleaved window attention fused with depthwise convolution.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: a small `f64` tensor engine with reverse-mode gradients and
//!   a weight container format.
//! - [`interleave`]: the reshape-transpose-reshape permutation that groups
//!   tokens congruent modulo the window grid into one attention window.
//! - [`layers`]: window attention, interleaved window attention, depthwise
//!   convolution, downsampling, patch embedding and the MLP.
//! - [`block`]: the transformer block, its wiring variants, and the
//!   four-stage backbone with the T/S/B/L configurations.
//! - [`analysis`]: reachability verification of global information exchange
//!   and the analytic FLOPs/parameter model.
//! - [`causal1d`]: a causal 1D version of the mechanism.
//! - [`harness`]: synthetic training, resolution transfer, benchmarks and
//!   the aggregated verification report.

pub mod analysis;
pub mod block;
pub mod causal1d;
pub mod error;
pub mod harness;
pub mod interleave;
pub mod layers;
pub mod params;
pub mod tensor;

pub use block::{BlockConfig, ModelConfig, PositionMode, Structure};
pub use error::{Error, Result};
pub use interleave::{IndexMap, WindowLayout};
pub use params::{Bound, Init, ParamId, ParamSink, ParamStore, ShapeLedger};
pub use tensor::{Gradients, Tape, Tensor, Var};
