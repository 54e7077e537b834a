//! Self-adaptive content queries (attention-pooled query initialization and
//! RoI-local enhancement) and query aggregation for DETR-style detectors,
//! built on a small reverse-mode tensor engine.

pub mod error;
pub mod harness;
pub mod matching;
pub mod model;
pub mod params;
pub mod qa;
pub mod sapm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Precision, Tape, Tensor, Var};
