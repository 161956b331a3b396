//! Semantic-map-grounded diffusion for few-shot anomaly image synthesis.
//!
//! The crate covers the full desk-scale pipeline: a procedural defect corpus
//! in MVTec-style layout, integer semantic maps as the grounding signal,
//! learnable product/anomaly/mask tokens, a spatial conditioning module, a
//! frozen toy latent-diffusion backbone extended with zero-gated
//! self-attention (plus LoRA), mixed normal-anomalous finetuning,
//! normal-prior denoising initialization, mask synthesis by textual
//! inversion, and the downstream segmentation protocol with brute-force
//! verified metrics.

pub mod error;
pub mod fastmath;
pub mod par;
pub mod rng;

pub mod graph;
pub mod kernels;
pub mod nn;
pub mod tensor;

pub mod corpus;
pub mod semantic_map;
pub mod token_bank;

pub mod gsm;
pub mod scm;

pub mod diffusion;
pub mod trainer;

pub mod eval;

pub mod checkpoint;
pub mod config;

pub use error::{Error, Result};
pub use tensor::Tensor;
