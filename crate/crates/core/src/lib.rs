//! Structured bilinear attention: dense and structured score functions,
//! their cost models, μP scaling and an in-context regression benchmark.

pub mod allocation;
pub mod attention;
pub mod config;
pub mod cost;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod icl;
pub mod mask;
pub mod mup;
pub mod structured;
pub mod tape;
pub mod tensor;

pub use allocation::RankAllocation;
pub use error::{Error, Result};
pub use mask::MaskSpec;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
