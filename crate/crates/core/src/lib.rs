//! Mask-classification change detection for co-registered bitemporal
//! image tiles.
//!
//! The pipeline: a Siamese hierarchical window-attention encoder produces
//! four levels of concatenated bitemporal features; a cross-level change
//! representation perceiver encodes levels 2-4 with deformable multi-head
//! self-attention and fuses level 1 residually into per-pixel embeddings;
//! a masked-attention transformer decoder evolves learnable object queries
//! into per-segment embeddings; a mask-classification head turns those
//! into (class, mask) pairs which are bipartite-matched to ground truth
//! for training and summed into a change map at inference.
//!
//! Everything runs on a from-scratch f64 reverse-mode autodiff substrate
//! ([`graph`]) so that gradients are exactly checkable against finite
//! differences.

pub mod clcrp;
pub mod data;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod head;
pub mod hungarian;
pub mod loss;
pub mod metrics;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
