//! Face-representation CNN toolkit: tensors, layers, graph execution,
//! training, evaluation and dataset I/O.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
