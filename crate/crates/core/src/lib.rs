//! Patch-based high-resolution diffusion sampling guided by a
//! low-resolution reference.
//!
//! The sampler tiles the target latent into overlapping windows, denoises
//! each window independently and averages overlaps after every step. Two
//! kinds of guidance steer each window:
//!
//! * structural: the low-frequency spectrum of the predicted clean window is
//!   replaced by that of the matching window of the upsampled reference
//!   ([`spectral::swap_low_frequency`]);
//! * fine-grained: a per-window caption and image prompt enter the denoiser
//!   through decoupled cross-attention ([`attention::attend`]).

pub mod attention;
pub mod conditioning;
pub mod denoiser;
pub mod error;
pub mod grid;
pub mod io;
pub mod matrix;
pub mod noise;
pub mod pipeline;
pub mod schedule;
pub mod selftest;
pub mod spectral;
pub mod tiler;

pub use error::{Error, Result};
pub use grid::LatentGrid;
