//! Sparse-view neural SDF surface reconstruction.
//!
//! Optimizes a signed-distance field from a handful of posed images using
//! volume-rendering-based feature consistency, uncertainty-guided depth
//! priors, and color warping losses, then extracts and evaluates a triangle
//! mesh. Everything runs on CPU; synthetic analytic scenes make the whole
//! pipeline testable without external pretrained assets.

pub mod cli;
pub mod features;
pub mod field;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod mesh;
pub mod pipeline;
pub mod rendering;
pub mod synth;
