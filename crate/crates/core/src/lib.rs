//! Online point tracking: a frame-by-frame tracker with a per-query FIFO
//! memory, trained end to end on synthetic sprite video.

pub mod error;
pub mod numerics;

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod engine;
pub mod eval;
pub mod heads;
pub mod loss;
pub mod memory;

pub use error::{Error, Result};
pub use numerics::{Graph, ParamStore, Tensor, Var};
