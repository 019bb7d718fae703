//! Sparse + linear attention with a learnable block router: reference
//! operators, hand-written gradients, two-stage training of a toy diffusion
//! model, operation-count accounting and the `sla2` command line.

// Index loops mirror the block algebra; `!(x > 0.0)` also rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod accounting;
pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod error;
pub mod golden;
pub mod io;
pub mod numerics;
pub mod quant;
pub mod router;
pub mod rten;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
