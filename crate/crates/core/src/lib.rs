//! TriMix: virtual-embedding mixup and self-consistency on top of Barlow Twins,
//! at desk scale, with a reverse-mode tape and independent reference checks.

// `!(x > 0.0)` is used on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Var::add/sub return Result, so the operator traits don't fit
#![allow(clippy::should_implement_trait)]

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod oracle;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
