//! Joint face completion and super-resolution with patch-graph convolutions.
//!
//! The differentiable core is generic over `f32`/`f64`; the `*32`/`*64`
//! aliases fix the scalar type.

pub mod backend;
pub mod blocks;
pub mod data;
pub mod degrade;
pub mod error;
pub mod metrics;
pub mod networks;
pub mod objectives;
pub mod patchgraph;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{DType, Element, Scalar};
pub use tensor::{Tensor, Tensor32, Tensor64};
