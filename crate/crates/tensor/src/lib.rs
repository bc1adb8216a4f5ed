//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Computation is recorded on a [`Graph`] tape; parameters live in a
//! [`ParamStore`] and are bound into a graph through a [`Session`], which
//! decides per parameter whether it is a gradient leaf or a constant.

pub mod container;
mod error;
pub mod gradcheck;
mod graph;
mod ops;
pub mod optim;
mod params;
mod scalar;
pub mod suite;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use ops::loss::focal_value;
pub use params::{ParamGrads, ParamId, ParamSet, ParamStore, Session};
pub use scalar::{DType, Scalar};
pub use tensor::{numel, Tensor};
