//! Differentiable kernels and the two denoisers: the multi-view joint latent
//! model and the conditional point aligner. Everything runs on a tape-based
//! reverse-mode autodiff core that is generic over f32 (training) and f64
//! (finite-difference gradient checking).

pub mod checkpoint;
pub mod dpa;
pub mod embedding;
pub mod gradcheck;
pub mod latent;
pub mod linalg;
pub mod mjd;
pub mod params;
pub mod tape;
