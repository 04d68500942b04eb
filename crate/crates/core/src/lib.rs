pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod noise;
pub mod par;
pub mod tensor;
pub mod training;

pub use autodiff::{BinaryOp, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
