//! Numerical core for query-based video semantic segmentation with
//! temporally stable predictions.
//!
//! The crate is `no_std` and only needs `alloc`. It covers:
//!
//! - [`numerics`]: matrix product, row softmax, layer norm, bilinear resize.
//! - [`features`]: deterministic synthetic backbone tokens and grayscale conversion.
//! - [`queries`]: stability-query attention, pixel modulation and branch fusion.
//! - [`sampling`]: random-stride training clips and sequential inference partitions.
//! - [`decoder`]: spatio-temporal memory, stacked query decoding, multi-scale fusion
//!   and the query-driven segmentation head.
//! - [`mtc`]: the masked temporal consistency loss, its analytic subgradient and a
//!   finite-difference checker.
//! - [`metrics`]: confusion matrices, mIoU and video consistency (dense and approximate).
//! - [`labels`]: alignment of dataset taxonomies onto the shared 15-class space.
//!
//! File formats, the command line and anything touching the filesystem live in the
//! `stableseg` companion crate.
#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod decoder;
pub mod error;
pub mod features;
pub mod labels;
pub mod metrics;
pub mod mtc;
pub mod numerics;
pub mod queries;
pub mod sampling;

pub use error::{Error, Result};

/// Label value marking unlabeled or invalid pixels.
pub const IGNORE: u8 = 255;
