//! Actor-conditioned attention for multi-actor video action detection.
//!
//! The crate is organized around a small dense-tensor engine with
//! reverse-mode autodiff ([`tensor`], [`tape`]), the actor-conditioning
//! attention ops and their comparison variants ([`acam`]), a toy 3D-CNN
//! backbone with checkpointing ([`backbone`], [`checkpoint`]), a synthetic
//! contextual-action benchmark ([`synthdata`]), training and evaluation
//! machinery ([`training`], [`evaluation`]), and a streaming inference
//! pipeline ([`pipeline`]).

pub mod acam;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod imageio;
pub mod kernels;
pub mod pipeline;
pub mod rng;
pub mod synthdata;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorKind, Result};
pub use tensor::Tensor;
