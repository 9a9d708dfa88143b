//! Image-level classifier used as the saliency baseline: trunk features,
//! global average pooling, one linear layer to class scores.

use rand::Rng;

use crate::error::{ensure, CoreResult};
use crate::nets::backbone::{Backbone, BackboneCache, BackbonePreset};
use crate::nets::layers::{gap, gap_backward, scoped, Linear, LinearCache, Param};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct ClassifierConfig {
    pub preset: BackbonePreset,
    pub classes: usize,
}

pub struct ClassifierNet<T> {
    pub backbone: Backbone<T>,
    pub head: Linear<T>,
    pub classes: usize,
}

pub struct ClassifierCache<T> {
    backbone: BackboneCache<T>,
    feat_shape: alloc::vec::Vec<usize>,
    head: LinearCache<T>,
}

impl<T: Scalar> ClassifierNet<T> {
    pub fn new<R: Rng>(cfg: &ClassifierConfig, rng: &mut R) -> Self {
        let backbone = Backbone::new(cfg.preset, rng);
        let head = Linear::new(backbone.out_channels(), cfg.classes, rng);
        ClassifierNet {
            backbone,
            head,
            classes: cfg.classes,
        }
    }

    /// Logits `[b, classes]`.
    pub fn forward(&self, x: &Tensor<T>) -> CoreResult<Tensor<T>> {
        Ok(self.forward_with_features(x)?.0)
    }

    /// Logits plus the trunk feature maps the saliency pass needs.
    pub fn forward_with_features(&self, x: &Tensor<T>) -> CoreResult<(Tensor<T>, Tensor<T>)> {
        let f = self.backbone.forward(x)?;
        let p = gap(&f)?;
        let logits = self.head.forward(&p)?;
        Ok((logits, f))
    }

    /// Gradient of the class-`class` logit w.r.t. the trunk features, obtained
    /// by running the head backward with a one-hot output gradient.
    pub fn feature_grad(&self, features: &Tensor<T>, class: usize) -> CoreResult<Tensor<T>> {
        ensure!(
            class < self.classes,
            InvalidConfig,
            "class index {class} out of range (classes = {})",
            self.classes
        );
        let b = features.shape()[0];
        let mut d_logits = Tensor::zeros(&[b, self.classes]);
        for bi in 0..b {
            d_logits.data_mut()[bi * self.classes + class] = T::one();
        }
        // head backward without touching stored gradients
        let mut head = self.head.clone();
        let p = gap(features)?;
        let (_, cache) = head.forward_train(&p)?;
        let dp = head.backward(&d_logits, &cache)?;
        Ok(gap_backward(&dp, features.shape()))
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> CoreResult<(Tensor<T>, ClassifierCache<T>)> {
        let (f, backbone) = self.backbone.forward_train(x)?;
        let feat_shape = f.shape().to_vec();
        let p = gap(&f)?;
        let (logits, head) = self.head.forward_train(&p)?;
        Ok((
            logits,
            ClassifierCache {
                backbone,
                feat_shape,
                head,
            },
        ))
    }

    pub fn backward(&mut self, d_logits: &Tensor<T>, cache: &ClassifierCache<T>) -> CoreResult<()> {
        let dp = self.head.backward(d_logits, &cache.head)?;
        let df = gap_backward(&dp, &cache.feat_shape);
        self.backbone.backward(&df, &cache.backbone)?;
        Ok(())
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.backbone.visit_params(&scoped(prefix, "backbone"), f);
        self.head.visit_params(&scoped(prefix, "head"), f);
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.backbone.visit_buffers(&scoped(prefix, "backbone"), f);
    }

    pub fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }
}

/// Mean cross-entropy over a batch of logits with integer targets
/// (0-based class indices). Returns the loss and the logits gradient.
pub fn softmax_ce_logits<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
) -> CoreResult<(T, Tensor<T>)> {
    let s = logits.shape();
    ensure!(
        s.len() == 2 && s[0] == targets.len(),
        ShapeMismatch,
        "logits {s:?} do not match {} targets",
        targets.len()
    );
    let (b, c) = (s[0], s[1]);
    for &t in targets {
        ensure!(t < c, InvalidData, "target class {t} out of range {c}");
    }
    let mut grad = Tensor::zeros(&[b, c]);
    let mut loss = T::zero();
    let inv_b = T::from_f64(1.0 / b as f64);
    for (bi, row) in logits.data().chunks_exact(c).enumerate() {
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let mut z = T::zero();
        for &v in row {
            z += (v - mx).exp();
        }
        let log_z = z.ln() + mx;
        loss += (log_z - row[targets[bi]]) * inv_b;
        let g = &mut grad.data_mut()[bi * c..(bi + 1) * c];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            g[j] = (p - if j == targets[bi] { T::one() } else { T::zero() }) * inv_b;
        }
    }
    Ok((loss, grad))
}
