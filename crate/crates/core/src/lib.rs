//! Temporal transformer and temporal-sequence self-supervision for clip-level
//! action recognition, built on a small reverse-mode autodiff kernel.

mod binfmt;
pub mod attnmap;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod ett;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;
pub mod tss;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{Bindings, ParamStore, Parameter};
pub use tensor::Tensor;
