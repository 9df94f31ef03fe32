//! Scale recurrent neural networks: a shared base CNN applied to every level
//! of an image pyramid, with a recurrence over scales from coarse to fine.
//!
//! The crate bundles a small reverse-mode tensor engine, image operators,
//! the model heads (single scale, two scale ensembles, vanilla and half-GRU
//! recurrences), a momentum-SGD training harness and the `srnn` command line.

pub mod cli;
pub mod data;
pub mod error;
pub mod exec;
pub mod model;
pub mod numerics;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
pub use numerics::{Graph, Tensor, Var};
