//! Multi-scale gated factor network for person re-identification.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`optim`], [`gradcheck`]: a small dense tensor engine with
//!   reverse-mode differentiation, the Adam optimizer and a finite-difference
//!   checker.
//! - [`backbone`]: one scale branch built from blocks of gated factor modules,
//!   the factor signature, and the two-projection fusion head.
//! - [`consensus`]: several branches at different input resolutions joined by
//!   a concatenation-based consensus classifier.
//! - [`augment`], [`dataset`]: training-time image transforms, a synthetic
//!   multi-camera person generator and a directory loader.
//! - [`trainer`], [`checkpoint`], [`eval`]: the multi-loss training loop,
//!   binary checkpoints, and single-query CMC / mAP evaluation.

pub mod augment;
pub mod backbone;
pub mod checkpoint;
pub mod consensus;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod layers;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use optim::{AdamConfig, Parameter};
pub use rng::Rng;
pub use tensor::{no_grad, Element, Tensor};
