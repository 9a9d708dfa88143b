//! Core algorithms for weakly supervised lesion segmentation from image-level
//! labels.
//!
//! The pipeline implemented here learns a metric embedding with a spatial
//! attention head, extracts the attention maps as saliency, thresholds them
//! into proxy masks, trains a U-Net on those proxies, and scores everything
//! with Dice against held-out ground truth. A Grad-CAM baseline over a plain
//! classifier is included for comparison.
//!
//! This crate is `no_std` + `alloc` compatible: it contains the tensor math,
//! the networks with their hand-written backward passes, the margin-loss
//! trainers (plain and divide-and-conquer), clustering, saliency extraction,
//! segmentation training and metrics. Everything that touches the filesystem
//! (manifests, PNGs, checkpoints, the CLI) lives in the companion
//! `weakseg-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod dataio;
pub mod error;
pub mod manifold;
pub mod metrics;
pub mod nets;
pub mod rng;
pub mod saliency;
pub mod segtrain;
pub mod synthetic;
pub mod tensor;

pub use error::{CoreError, CoreResult};
pub use tensor::{Scalar, Tensor};
