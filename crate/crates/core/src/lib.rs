//! Successive cross-attention segmentation decoder.
//!
//! A four-level feature pyramid is squeezed to a common coarse grid, refined by
//! chained cross-attention blocks (each level's output becomes the key/value
//! source for the next level's query), and the resulting semantics re-weight
//! the full-resolution features before a light segmentation head.
//!
//! The crate also carries everything needed to check that claim at desk
//! scale: a small reverse-mode autodiff core ([`tensor`]), the layers
//! ([`nn`]), a convolutional stand-in encoder ([`encoder`]), an analytic
//! parameter/MAC counter ([`cost`]) and a synthetic training harness
//! ([`train`]).

pub mod config;
pub mod cost;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
