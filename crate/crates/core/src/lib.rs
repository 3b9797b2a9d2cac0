//! Memory-efficient Evoformer-style attention and a long-sequence training
//! memory planner.
//!
//! * [`tensor`] / [`format`]: dense tensors with emulated low-precision storage.
//! * [`attention`]: naive and tiled biased axial attention, forward and backward.
//! * [`memory`]: allocation ledger and analytic attention memory model.
//! * [`plan`]: per-device memory breakdown and max-sequence-length search.
//! * [`precision`]: bias-gradient accumulation error under each policy.

pub mod attention;
pub mod error;
pub mod format;
pub mod gradcheck;
pub mod memory;
pub mod plan;
pub mod precision;
pub mod tensor;

pub use error::{Error, Result};
pub use format::{round_to_format, NumericFormat, Rounded};
pub use tensor::{matmul, softmax_lastdim, Tensor};
