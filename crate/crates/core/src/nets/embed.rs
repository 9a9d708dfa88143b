//! The embedding network trained with the margin loss: trunk features are
//! gated by the attention map, pooled, projected to the embedding dimension
//! and L2-normalized onto the unit sphere.

use core::sync::atomic::Ordering;

use rand::Rng;

use crate::error::CoreResult;
use crate::nets::attention::{AttentionCache, AttentionHead};
use crate::nets::backbone::{Backbone, BackboneCache, BackbonePreset};
use crate::nets::layers::{
    gap, gap_backward, gate, gate_backward, l2_normalize_rows, l2_normalize_rows_backward,
    scoped, Linear, LinearCache, NormCache, Param,
};
use crate::nets::TRAIN_FORWARD_PASSES;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct ManifoldNetConfig {
    pub preset: BackbonePreset,
    pub embed_dim: usize,
    pub attention_zero_init: bool,
}

impl Default for ManifoldNetConfig {
    fn default() -> Self {
        ManifoldNetConfig {
            preset: BackbonePreset::Tiny,
            embed_dim: 128,
            attention_zero_init: true,
        }
    }
}

pub struct ManifoldNet<T> {
    pub backbone: Backbone<T>,
    pub attention: AttentionHead<T>,
    pub head: Linear<T>,
    pub embed_dim: usize,
}

pub struct ManifoldCache<T> {
    backbone: BackboneCache<T>,
    features: Tensor<T>,
    attention: AttentionCache<T>,
    a: Tensor<T>,
    gated_shape: alloc::vec::Vec<usize>,
    head: LinearCache<T>,
    norm: NormCache<T>,
}

impl<T: Scalar> ManifoldNet<T> {
    pub fn new<R: Rng>(cfg: &ManifoldNetConfig, rng: &mut R) -> Self {
        let backbone = Backbone::new(cfg.preset, rng);
        let attention = AttentionHead::new(backbone.out_channels(), cfg.attention_zero_init, rng);
        let head = Linear::new(backbone.out_channels(), cfg.embed_dim, rng);
        ManifoldNet {
            backbone,
            attention,
            head,
            embed_dim: cfg.embed_dim,
        }
    }

    /// Inference pass. Returns unit-norm embeddings `[b, d]` and the
    /// attention map `[b, 1, h/stride, w/stride]`.
    pub fn forward(&self, x: &Tensor<T>) -> CoreResult<(Tensor<T>, Tensor<T>)> {
        let f = self.backbone.forward(x)?;
        let a = self.attention.forward(&f)?;
        let g = gate(&f, &a)?;
        let p = gap(&g)?;
        let z = self.head.forward(&p)?;
        let (e, _) = l2_normalize_rows(&z);
        Ok((e, a))
    }

    /// Training pass with cached intermediates for `backward`.
    pub fn forward_train(
        &mut self,
        x: &Tensor<T>,
    ) -> CoreResult<(Tensor<T>, Tensor<T>, ManifoldCache<T>)> {
        TRAIN_FORWARD_PASSES.fetch_add(1, Ordering::Relaxed);
        let (f, backbone) = self.backbone.forward_train(x)?;
        let (a, attention) = self.attention.forward_train(&f)?;
        let g = gate(&f, &a)?;
        let gated_shape = g.shape().to_vec();
        let p = gap(&g)?;
        let (z, head) = self.head.forward_train(&p)?;
        let (e, norm) = l2_normalize_rows(&z);
        Ok((
            e.clone(),
            a.clone(),
            ManifoldCache {
                backbone,
                features: f,
                attention,
                a,
                gated_shape,
                head,
                norm,
            },
        ))
    }

    /// Backpropagate a gradient w.r.t. the normalized embeddings.
    pub fn backward(&mut self, d_embed: &Tensor<T>, cache: &ManifoldCache<T>) -> CoreResult<()> {
        let dz = l2_normalize_rows_backward(d_embed, &cache.norm);
        let dp = self.head.backward(&dz, &cache.head)?;
        let dg = gap_backward(&dp, &cache.gated_shape);
        let (df_gate, da) = gate_backward(&dg, &cache.features, &cache.a)?;
        let mut df = self.attention.backward(&da, &cache.attention)?;
        df.add_assign(&df_gate);
        self.backbone.backward(&df, &cache.backbone)?;
        Ok(())
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.backbone.visit_params(&scoped(prefix, "backbone"), f);
        self.attention.visit_params(&scoped(prefix, "attention"), f);
        self.head.visit_params(&scoped(prefix, "head"), f);
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.backbone.visit_buffers(&scoped(prefix, "backbone"), f);
    }

    pub fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }
}
