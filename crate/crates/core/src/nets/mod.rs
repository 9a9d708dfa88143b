//! Network building blocks and the three model assemblies used by the
//! pipeline: the attention-gated embedding net, the classifier baseline and
//! the segmentation U-Net.

use core::sync::atomic::AtomicUsize;

pub mod adam;
pub mod attention;
pub mod backbone;
pub mod classifier;
pub mod embed;
pub mod layers;
pub mod unet;

pub use adam::{Adam, AdamConfig};
pub use attention::{AttentionHead, ATTENTION_EPS};
pub use backbone::{Backbone, BackbonePreset};
pub use classifier::{softmax_ce_logits, ClassifierConfig, ClassifierNet};
pub use embed::{ManifoldNet, ManifoldNetConfig};
pub use layers::Param;
pub use unet::{UNet, UNetConfig};

/// Counts training-mode forward passes through [`ManifoldNet`]. Lets tests
/// assert that inference-only stages (attention extraction, saliency) never
/// touch the training path.
pub static TRAIN_FORWARD_PASSES: AtomicUsize = AtomicUsize::new(0);
