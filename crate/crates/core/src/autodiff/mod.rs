//! Reverse-mode differentiation over dense `f64` arrays, plus the named
//! parameter store the rest of the crate trains against.

mod gradcheck;
mod graph;
mod registry;
mod tensor;

pub use gradcheck::{grad_check, param_grad_check, REL_FLOOR};
pub use graph::{Attrs, Graph, OpKind, Var, LAYERNORM_EPS};
pub use registry::{CountFilter, Origin, ParamEntry, ParamId, ParameterRegistry};
pub use tensor::Tensor;

pub(crate) use graph::sigmoid_scalar;
