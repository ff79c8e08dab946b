//! Desk-scale mixture-of-ternary-experts stack.
//!
//! The crate covers the full loop: quantizers, 2-bit weight packing with an
//! integer GEMM, a small pre-norm transformer with a routed expert layer,
//! up-cycling of a dense checkpoint into that layout, straight-through
//! training, a synthetic bimodal task, checkpoint IO, and routing analytics.
//!
//! Heavy inner loops go through [`parallel`], which uses rayon when the
//! `parallel` feature is enabled (the default) and plain loops otherwise.
//! Every parallel loop partitions output elements, so results are bit-equal
//! for any worker count, including the sequential fallback.

pub mod analytics;
pub mod checkpoint;
pub mod error;
pub mod packing;
pub mod parallel;
pub mod quant;
pub mod synthdata;
pub mod tensor;
pub mod train;
pub mod upcycle;

pub mod model;

pub use error::{Error, Result};
pub use tensor::{Matrix, Scalar};
