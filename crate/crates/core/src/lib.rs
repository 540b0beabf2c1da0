//! Deterministic single-process, multi-rank simulator of an MoE training
//! stack: expert-parallel MoE blocks, sharded optimizers, tensor/expert/
//! pipeline parallelism, data preprocessing and fault tolerance.

pub mod comm;
pub mod data;
pub mod error;
pub mod moe;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod reliability;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Float, IndexTensor, Tensor};
