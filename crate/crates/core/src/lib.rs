//! Multi-stream local feature hierarchy network (LFHN).
//!
//! A root convolution block (11x11 conv, ReLU, 3x3/2 max pool, cross-channel
//! LRN) feeds parallel streams of 1x1 convolutions whose outputs are
//! concatenated along the channel axis, mixed by another 1x1 convolution and
//! classified by two fully connected layers under a softmax loss.
//!
//! Around the network the crate provides a seeded SGD training loop, a
//! finite-difference gradient checker, a synthetic Lambertian
//! pose/illumination corpus generator with a PGM/PPM loader, and a rank-1
//! per-pose evaluation harness.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
