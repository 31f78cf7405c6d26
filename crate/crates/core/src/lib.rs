//! Synergistic intrusion and insider-threat detection.
//!
//! Ingest flow datasets, optionally fuse them with synthetic user-behaviour
//! sessions, encode and rebalance, rank features with a random forest, and
//! classify with a densely connected network carrying per-block attention.

pub mod autodiff;
pub mod checkpoint;
pub mod digest;
pub mod error;
pub mod evaluate;
pub mod fixtures;
pub mod forest;
pub mod ingest;
pub mod model;
pub mod ops;
pub mod pipeline;
pub mod preprocess;
pub mod tensor;
pub mod train;
pub mod ueba;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{Real, Tensor};
