//! Affine image registration by maximizing a neural estimate of mutual
//! information, with transforms parameterized by the matrix exponential of
//! the Aff(2) generators and optimized jointly over a Gaussian pyramid.

pub mod autodiff;
pub mod gradcheck;
pub mod imageio;
pub mod lie_affine;
pub mod metrics;
pub mod mine;
pub mod pyramid;
pub mod registration;
pub mod sampler;
pub mod synth;
pub mod warp;
