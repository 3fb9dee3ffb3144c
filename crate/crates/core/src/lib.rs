//! Skeleton-based isolated sign recognition.
//!
//! The pipeline reduces whole-body keypoints to a 27-node hand-centric
//! graph, derives joint, bone and motion streams, classifies each stream
//! with a decoupled spatio-temporal graph convolution network, classifies
//! pooled keypoint heatmaps with a separable convolution network, and fuses
//! per-modality logits either with fixed weights or with a small learned
//! ensemble network.

pub mod error;
pub mod numeric;

pub use error::{Result, SlrError};
pub mod fusion;
pub mod graph;
pub mod io;
pub mod keypoints;
pub mod nn;
pub mod slgcn;
pub mod sstcn;
pub mod streams;
pub mod train;
