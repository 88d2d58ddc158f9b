//! Low-rank adapter laboratory.
//!
//! A reverse-mode autodiff engine, LoRA-family adapters (vanilla, multi-adapter,
//! mixture-of-experts, multi-head and R-LoRA), two toy backbones, synthetic
//! multi-task suites, an AdamW trainer, head-similarity diagnostics and a
//! checkpoint format. Everything numeric is generic over [`Scalar`] (`f32`,
//! `f64`); the aliases below fix the precision.

pub mod adapters;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod rng;
pub mod scalar;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use adapters::{AdapterLayer, InitScheme, LoraConfig, ScaleDim, Variant};
pub use autodiff::{Graph, Var};
pub use backbone::{inject_adapters, AdaptedModel, Backbone, BackboneConfig, BackboneKind};
pub use error::{Error, Result};
pub use experiment::ExperimentConfig;
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::{Param, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Adapter32 = AdapterLayer<f32>;
pub type Adapter64 = AdapterLayer<f64>;
pub type Model32 = AdaptedModel<f32>;
pub type Model64 = AdaptedModel<f64>;
