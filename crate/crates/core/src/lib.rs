//! Tactile-conditioned vision-language-action policy testbed.
//!
//! The crate builds small from-scratch policy networks (dual-stream ViT
//! visual backbone + causal decoder emitting discretized action tokens),
//! fuses touch into them either by FiLM-conditioning intermediate visual
//! features on a pooled tactile embedding or by appending projected tactile
//! tokens, and trains them by behavior cloning on demonstrations from a
//! deterministic 2-D peg-insertion simulator with contact forces and a
//! synthetic gel-image tactile sensor.
//!
//! Numeric core (tensors, autodiff, the transformer layers, FiLM, LoRA) is
//! generic over the scalar type via [`Scalar`]; `f64` is the default and the
//! only precision used for gradient verification. Concrete aliases live at
//! the crate root ([`Tensor64`], [`Policy64`], ...).

pub mod actions;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod film;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod image;
pub mod lora;
pub mod nn;
pub mod optim;
pub mod params;
pub mod policy;
pub mod rng;
pub mod scalar;
pub mod sim;
pub mod tactile;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision aliases (default throughout the harness).
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph64 = graph::Graph<f64>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type Adam64 = optim::Adam<f64>;
pub type Policy64 = policy::Policy<f64>;

/// Single-precision aliases, for speed-over-headroom runs. Gradient checks
/// always run through the `f64` types.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph32 = graph::Graph<f32>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type Adam32 = optim::Adam<f32>;
pub type Policy32 = policy::Policy<f32>;
