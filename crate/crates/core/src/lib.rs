//! Core math and data layer for the multi-view video + 4D motion pipeline.
//!
//! Everything in this crate is deterministic and framework-free: pinhole
//! geometry, the point-track <-> pseudo-video codec, rectified-flow
//! primitives, the procedural scene generator, and the motion metric suite.
//! Geometry and codec math run in f64; image and latent payloads are f32.

pub mod dataset;
pub mod flowmatch;
pub mod geometry;
pub mod metrics;
pub mod pointset;
pub mod rng;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod trackcodec;

pub use scalar::Scalar;
pub use tensor::Tensor;
