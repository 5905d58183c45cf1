//! Region-proxy vision transformer for semantic segmentation.
//!
//! A ViT encoder with one learnable token per class feeds two heads: a
//! pixel-to-region association map built from early-layer tokens, and
//! class logits per region read from aggregated class-token attention.
//! Their per-pixel mixture is the segmentation logits map.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod hra;
pub mod mca;
pub mod metrics;
pub mod model;
pub mod netpbm;
pub mod graph;
pub mod encoder;
pub mod ops;
pub mod params;
pub mod render;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Scalar, Tensor};
