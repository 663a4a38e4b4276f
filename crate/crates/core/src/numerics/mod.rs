//! Dense tensors, reverse-mode differentiation and finite-difference checks.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, relative_error, ParamCheck, REL_FLOOR};
pub use graph::{gelu, logsumexp, sigmoid, softplus, softplus_inverse, Graph, Mask, Var};
pub use params::{ParamId, ParamKind, ParamStore, Parameter};
pub use tensor::{matmul, softmax_temp, Tensor};
