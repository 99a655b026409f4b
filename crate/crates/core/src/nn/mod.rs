//! Network building blocks and the two conditional U-Nets.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]; values live outside the
//! architecture so the same network runs on `f32` weights for training and
//! on an `f64` copy for gradient checks.

mod blocks;
mod config;
mod params;
mod unet;

pub use blocks::{positional_encoding, Conv, ConvGru, ConvTranspose, GroupNorm, Linear, LinearAttention, ResBlock, LEAKY_SLOPE};
pub use config::{BlockConfig, Profile, GN_EPS};
pub use params::{Builder, Graph, ParamId, ParamStore};
pub use unet::{Denoiser, DiffusionModel, RecurrentState, RvdNet, StateVars, Transform};
