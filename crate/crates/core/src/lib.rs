//! Reference-based semantic image synthesis with cross-attention
//! conditioning, built on a from-scratch differentiable tensor engine.

pub mod adversarial;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diversity;
pub mod editing;
pub mod error;
pub mod generator;
pub mod mask;
pub mod mask_embedder;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod style_encoder;
pub mod tensor;
pub mod train;
pub mod verify;
