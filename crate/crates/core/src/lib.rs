//! Dual-encoder contrastive vision-language model whose image encoder
//! aggregates patches into arbitrary-shaped regions via learnable centers,
//! plus the open-vocabulary segmentation inference path built on top of it.
//!
//! The crate is organized around a small dense-tensor engine with
//! reverse-mode automatic differentiation ([`tensor`]), the text/image
//! encoder stacks ([`encoder`]), the patch grouping module ([`group`]),
//! unsupervised graph-based superpixels ([`superpixel`]), the three training
//! objectives ([`losses`]), segmentation inference and mIoU evaluation
//! ([`infer`]), and a training/evaluation harness ([`train`], [`data`],
//! [`checkpoint`]).
//!
//! Hot loops (matrix products, per-image evaluation, superpixel caching) run
//! on rayon when the default `parallel` feature is enabled and fall back to
//! sequential iteration otherwise; results are bit-identical either way.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod group;
pub mod image_io;
pub mod infer;
pub mod losses;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod superpixel;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Graph, NodeId, Tensor};
