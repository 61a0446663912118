//! Closed-loop synthetic training data for toy vision worlds.
//!
//! A small conditional denoising diffusion generator renders 16x16 images
//! from continuous prompt embeddings. Prompts are optimized so generated
//! image-label pairs maximize a task model's loss (adversarial prompts)
//! while staying close to a target distribution under a joint image/text
//! embedder (guided adversarial prompts). Models finetuned on the generated
//! data are evaluated on held-out distribution shifts.

pub mod autodiff;
pub mod config;
pub mod dataio;
pub mod error;
pub mod generator;
pub mod guidance;
pub mod manifest;
pub mod pipeline;
pub mod promptopt;
pub mod rng;
pub mod taskmodels;
pub mod toyworlds;

pub use error::{Error, Result};
