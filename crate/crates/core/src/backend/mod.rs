//! Differentiable tensor engine: tape, operations, parameters and the
//! finite-difference gradient harness.

pub mod gradcheck;
pub mod graph;
pub(crate) mod kernels;
pub mod ops;
pub mod param;

pub use gradcheck::{gradient_check, GradCheckReport, ParamCheck};
pub use graph::{Bound, Gradients, Graph, Var};
pub use ops::{concat_channels, elementwise, sum_all, Elementwise};
pub use param::{fan_in_uniform, ParamId, ParamStore, Parameter};
