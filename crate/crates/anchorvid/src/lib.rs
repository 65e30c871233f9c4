//! Anchor-conditioned video diffusion at desk scale.
//!
//! The crate trains a small diffusion transformer with a flow-matching
//! objective on procedurally generated character videos, conditions it on
//! reference "anchor" frames placed at far-away temporal positions, and runs
//! chunked autoregressive inference to roll out clips of arbitrary length.
//! Everything — tensors, differentiation, the model, the world simulator, the
//! anchor-extraction pipeline — lives here, with no external ML runtime.

pub mod config;
pub mod container;
pub mod error;
pub mod flow;
pub mod harness;
pub mod infer;
pub mod latent;
pub mod model;
pub mod pipeline;
pub mod rope;
pub mod sampler;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
