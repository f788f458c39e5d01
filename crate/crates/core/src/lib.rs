//! Toy-scale, self-contained latent video diffusion with identity and
//! motion-intensity conditioning.
//!
//! The crate provides the full pipeline end to end on synthetic data:
//! a minimal dense-tensor substrate, deterministic stub encoders, the
//! identity/motion conditioning blocks, an optical-flow motion-intensity
//! pipeline, region-weighted training losses with hand-derived gradients,
//! a small conditional denoiser with DDIM sampling and classifier-free
//! guidance, and the dataset curation pipeline (filtering, intensity
//! annotation, balanced resampling, static-image expansion).

pub mod conditioning;
pub mod encoders;
pub mod error;
pub mod flow;
pub mod numerics;
pub mod nvt1;
pub mod seeded;
pub mod synth;

pub use error::{Error, Result};
