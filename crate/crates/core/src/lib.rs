//! Desk-scale byte-level language model research engine.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod ldrscm;
pub mod model;
pub mod mtpim;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod suite;
pub mod tensor;
pub mod transformerx;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use model::{LanguageModel, Model32, Model64, ModelConfig};
pub use params::{Param, ParamId, ParamStore};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
