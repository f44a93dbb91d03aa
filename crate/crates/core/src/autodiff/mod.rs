//! Differentiable numeric core.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{compare_gradients, grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::{Axis, Graph, NodeGrads, Var};
pub use params::{sgd_step, Gradients, Param, ParamStore};
pub use tensor::Tensor;
