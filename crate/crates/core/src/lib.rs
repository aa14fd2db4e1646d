//! Core library for a small, CPU-scale diffusion lab: synthetic shape-corpus
//! generation, a from-scratch autodiff stack, a conditional denoiser with
//! decoupled text/image cross-attention, push–pull concept erasure on top of
//! it, and the evaluation battery (attack-success analogue, feature-space
//! Fréchet distance, alignment probes) used to compare erasure variants.

pub mod checkpoint;
pub mod datagen;
pub mod encoder;
pub mod erasure;
pub mod eval;
pub mod generative;
pub mod nn;
pub mod numerics;
pub mod optim;
pub mod report;
pub mod rng;

pub use numerics::{NumericsError, Tensor};
