//! Dense tensors, a reverse-mode tape and the neural primitives built on it.

mod attention;
mod conv;
mod elementwise;
mod gradcheck;
mod graph;
mod linalg;
mod loss_ops;
pub mod nn;
mod sampling;
mod tensor;

pub use conv::ConvGeom;
pub use gradcheck::{grad_check, GRAD_CHECK_EPS};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};


#[cfg(test)]
mod tests;
