//! Edge-aware graph reasoning for segmentation, at desk scale.
//!
//! The crate provides a small dense-tensor engine with reverse-mode
//! autodiff and exact MAC accounting, an edge-aware graph reasoning block
//! (edge-weighted pixel-to-vertex projection, graph convolution over a
//! learned adjacency, reprojection with a residual), the dense non-local
//! attention baseline it is measured against, a toy encoder/decoder
//! parsing network with boundary-attention loss, a synthetic face-like
//! dataset generator, segmentation metrics, and the binary formats and
//! training harness behind the `eagr` CLI.

// index loops are the dominant idiom in the numeric kernels here
#![allow(clippy::needless_range_loop)]

pub mod bench;
pub mod checkpoint;
pub mod config;
pub(crate) mod cursor;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod net;
pub mod nonlocal;
pub mod pnm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::tape::{Tape, TensorId};
pub use tensor::Tensor;
