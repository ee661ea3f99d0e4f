//! petrify: a self-contained, desk-scale subject-driven text-to-3D sandbox.
//!
//! The crate wires a toy conditional denoising diffusion model to a
//! differentiable radiance field through score distillation, runs a staged
//! personalization pipeline against a procedural ground-truth world, and
//! measures the results with a retriever-based evaluation harness.

pub mod autodiff;
pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod nerf;
pub mod rng;

pub use error::{Error, Result};
