//! Feature extractor trunks.
//!
//! Two families: `tiny`, a four-block plain conv net meant for CPU-scale
//! experiments, and stride-16 three-stage bottleneck ResNet trunks for the
//! full-size configuration. Both map `[b, 3, h, w]` to `[b, out_channels,
//! h/stride, w/stride]` and reject inputs whose sides the stride does not
//! divide.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{ensure, CoreError, CoreResult};
use crate::nets::layers::{
    dims4, relu, relu_backward, scoped, BatchNorm2d, BnCache, Conv2d, ConvCache, MaxPool2d,
    Param, PoolCache,
};
use crate::tensor::{Scalar, Tensor};

/// Named trunk configurations selectable from run configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackbonePreset {
    Tiny,
    Resnet50ThreeStage,
    Resnet101ThreeStage,
}

impl BackbonePreset {
    pub fn from_name(name: &str) -> CoreResult<Self> {
        match name {
            "tiny" => Ok(BackbonePreset::Tiny),
            "paper_resnet50_3blocks" => Ok(BackbonePreset::Resnet50ThreeStage),
            "paper_resnet101_3blocks" => Ok(BackbonePreset::Resnet101ThreeStage),
            other => Err(CoreError::InvalidConfig(alloc::format!(
                "unknown backbone '{other}' (expected tiny, paper_resnet50_3blocks or paper_resnet101_3blocks)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BackbonePreset::Tiny => "tiny",
            BackbonePreset::Resnet50ThreeStage => "paper_resnet50_3blocks",
            BackbonePreset::Resnet101ThreeStage => "paper_resnet101_3blocks",
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            BackbonePreset::Tiny => 8,
            _ => 16,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            BackbonePreset::Tiny => 64,
            _ => 1024,
        }
    }
}

// ---------------------------------------------------------------------------
// Tiny trunk
// ---------------------------------------------------------------------------

const TINY_CHANNELS: [usize; 4] = [32, 64, 64, 64];
const TINY_STRIDES: [usize; 4] = [2, 2, 2, 1];

#[derive(Clone, Debug)]
pub struct TinyBackbone<T> {
    blocks: Vec<Conv2d<T>>,
}

pub struct TinyCache<T> {
    convs: Vec<ConvCache<T>>,
    relu_out: Vec<Tensor<T>>,
}

impl<T: Scalar> TinyBackbone<T> {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        let mut blocks = Vec::new();
        let mut in_c = 3;
        for (c, s) in TINY_CHANNELS.iter().zip(TINY_STRIDES) {
            blocks.push(Conv2d::new(in_c, *c, 3, s, 1, rng));
            in_c = *c;
        }
        TinyBackbone { blocks }
    }

    pub fn forward(&self, x: &Tensor<T>) -> CoreResult<Tensor<T>> {
        let mut h = x.clone();
        for conv in &self.blocks {
            h = relu(&conv.forward(&h)?);
        }
        Ok(h)
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> CoreResult<(Tensor<T>, TinyCache<T>)> {
        let mut convs = Vec::new();
        let mut relu_out = Vec::new();
        let mut h = x.clone();
        for conv in &self.blocks {
            let (y, c) = conv.forward_train(&h)?;
            h = relu(&y);
            convs.push(c);
            relu_out.push(h.clone());
        }
        Ok((h.clone(), TinyCache { convs, relu_out }))
    }

    pub fn backward(&mut self, dy: &Tensor<T>, cache: &TinyCache<T>) -> CoreResult<Tensor<T>> {
        let mut g = dy.clone();
        for i in (0..self.blocks.len()).rev() {
            g = relu_backward(&g, &cache.relu_out[i]);
            g = self.blocks[i].backward(&g, &cache.convs[i])?;
        }
        Ok(g)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&scoped(prefix, &alloc::format!("block{i}")), f);
        }
    }
}

// ---------------------------------------------------------------------------
// ResNet trunk
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct ConvBn<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
}

struct ConvBnCache<T> {
    conv: ConvCache<T>,
    bn: BnCache<T>,
}

impl<T: Scalar> ConvBn<T> {
    fn new<R: Rng>(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        ConvBn {
            conv: Conv2d::new(in_c, out_c, k, stride, pad, rng),
            bn: BatchNorm2d::new(out_c),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> CoreResult<Tensor<T>> {
        self.bn.forward(&self.conv.forward(x)?)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> CoreResult<(Tensor<T>, ConvBnCache<T>)> {
        let (y, conv) = self.conv.forward_train(x)?;
        let (z, bn) = self.bn.forward_train(&y)?;
        Ok((z, ConvBnCache { conv, bn }))
    }

    fn backward(&mut self, dy: &Tensor<T>, cache: &ConvBnCache<T>) -> CoreResult<Tensor<T>> {
        let d = self.bn.backward(dy, &cache.bn)?;
        self.conv.backward(&d, &cache.conv)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_params(&scoped(prefix, "conv"), f);
        self.bn.visit_params(&scoped(prefix, "bn"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.bn.visit_buffers(&scoped(prefix, "bn"), f);
    }
}

#[derive(Clone, Debug)]
struct Bottleneck<T> {
    c1: ConvBn<T>,
    c2: ConvBn<T>,
    c3: ConvBn<T>,
    down: Option<ConvBn<T>>,
}

struct BottleneckCache<T> {
    c1: ConvBnCache<T>,
    c2: ConvBnCache<T>,
    c3: ConvBnCache<T>,
    down: Option<ConvBnCache<T>>,
    r1: Tensor<T>,
    r2: Tensor<T>,
    out: Tensor<T>,
}

impl<T: Scalar> Bottleneck<T> {
    fn new<R: Rng>(in_c: usize, mid_c: usize, out_c: usize, stride: usize, rng: &mut R) -> Self {
        let down = if stride != 1 || in_c != out_c {
            Some(ConvBn::new(in_c, out_c, 1, stride, 0, rng))
        } else {
            None
        };
        Bottleneck {
            c1: ConvBn::new(in_c, mid_c, 1, 1, 0, rng),
            c2: ConvBn::new(mid_c, mid_c, 3, stride, 1, rng),
            c3: ConvBn::new(mid_c, out_c, 1, 1, 0, rng),
            down,
        }
    }

    fn forward(&self, x: &Tensor<T>) -> CoreResult<Tensor<T>> {
        let h = relu(&self.c1.forward(x)?);
        let h = relu(&self.c2.forward(&h)?);
        let mut h = self.c3.forward(&h)?;
        let idn = match &self.down {
            Some(d) => d.forward(x)?,
            None => x.clone(),
        };
        h.add_assign(&idn);
        Ok(relu(&h))
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> CoreResult<(Tensor<T>, BottleneckCache<T>)> {
        let (y1, c1) = self.c1.forward_train(x)?;
        let r1 = relu(&y1);
        let (y2, c2) = self.c2.forward_train(&r1)?;
        let r2 = relu(&y2);
        let (mut y3, c3) = self.c3.forward_train(&r2)?;
        let mut down = None;
        let idn = match &mut self.down {
            Some(d) => {
                let (i, dc) = d.forward_train(x)?;
                down = Some(dc);
                i
            }
            None => x.clone(),
        };
        y3.add_assign(&idn);
        let out = relu(&y3);
        Ok((
            out.clone(),
            BottleneckCache {
                c1,
                c2,
                c3,
                down,
                r1,
                r2,
                out,
            },
        ))
    }

    fn backward(&mut self, dy: &Tensor<T>, cache: &BottleneckCache<T>) -> CoreResult<Tensor<T>> {
        let ds = relu_backward(dy, &cache.out);
        let dr2 = self.c3.backward(&ds, &cache.c3)?;
        let dy2 = relu_backward(&dr2, &cache.r2);
        let dr1 = self.c2.backward(&dy2, &cache.c2)?;
        let dy1 = relu_backward(&dr1, &cache.r1);
        let mut dx = self.c1.backward(&dy1, &cache.c1)?;
        let d_idn = match (&mut self.down, &cache.down) {
            (Some(d), Some(dc)) => d.backward(&ds, dc)?,
            _ => ds,
        };
        dx.add_assign(&d_idn);
        Ok(dx)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.c1.visit_params(&scoped(prefix, "c1"), f);
        self.c2.visit_params(&scoped(prefix, "c2"), f);
        self.c3.visit_params(&scoped(prefix, "c3"), f);
        if let Some(d) = &mut self.down {
            d.visit_params(&scoped(prefix, "down"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.c1.visit_buffers(&scoped(prefix, "c1"), f);
        self.c2.visit_buffers(&scoped(prefix, "c2"), f);
        self.c3.visit_buffers(&scoped(prefix, "c3"), f);
        if let Some(d) = &mut self.down {
            d.visit_buffers(&scoped(prefix, "down"), f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct ResNetTrunk<T> {
    stem: ConvBn<T>,
    pool: MaxPool2d,
    stages: Vec<Vec<Bottleneck<T>>>,
}

pub struct ResNetCache<T> {
    stem: ConvBnCache<T>,
    stem_relu: Tensor<T>,
    pool: PoolCache,
    blocks: Vec<BottleneckCache<T>>,
}

impl<T: Scalar> ResNetTrunk<T> {
    /// First three stages of a bottleneck ResNet; `stage3_blocks` is 6 for the
    /// 50-layer variant and 23 for the 101-layer one.
    pub fn new<R: Rng>(stage3_blocks: usize, rng: &mut R) -> Self {
        let plan: [(usize, usize, usize, usize); 3] = [
            // (blocks, mid, out, first-block stride)
            (3, 64, 256, 1),
            (4, 128, 512, 2),
            (stage3_blocks, 256, 1024, 2),
        ];
        let mut in_c = 64;
        let mut stages = Vec::new();
        for (count, mid, out, stride) in plan {
            let mut blocks = Vec::new();
            for i in 0..count {
                let s = if i == 0 { stride } else { 1 };
                blocks.push(Bottleneck::new(in_c, mid, out, s, rng));
                in_c = out;
            }
            stages.push(blocks);
        }
        ResNetTrunk {
            stem: ConvBn::new(3, 64, 7, 2, 3, rng),
            pool: MaxPool2d::new(3, 2, 1),
            stages,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> CoreResult<Tensor<T>> {
        let mut h = self.pool.forward(&relu(&self.stem.forward(x)?))?;
        for stage in &self.stages {
            for block in stage {
                h = block.forward(&h)?;
            }
        }
        Ok(h)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> CoreResult<(Tensor<T>, ResNetCache<T>)> {
        let (y, stem) = self.stem.forward_train(x)?;
        let stem_relu = relu(&y);
        let (mut h, pool) = self.pool.forward_train(&stem_relu)?;
        let mut blocks = Vec::new();
        for stage in &mut self.stages {
            for block in stage {
                let (y, c) = block.forward_train(&h)?;
                h = y;
                blocks.push(c);
            }
        }
        Ok((
            h,
            ResNetCache {
                stem,
                stem_relu,
                pool,
                blocks,
            },
        ))
    }

    pub fn backward(&mut self, dy: &Tensor<T>, cache: &ResNetCache<T>) -> CoreResult<Tensor<T>> {
        let mut g = dy.clone();
        let mut idx = cache.blocks.len();
        for stage in self.stages.iter_mut().rev() {
            for block in stage.iter_mut().rev() {
                idx -= 1;
                g = block.backward(&g, &cache.blocks[idx])?;
            }
        }
        let g = self.pool.backward(&g, &cache.pool);
        let g = relu_backward(&g, &cache.stem_relu);
        self.stem.backward(&g, &cache.stem)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.visit_params(&scoped(prefix, "stem"), f);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                block.visit_params(&scoped(prefix, &alloc::format!("s{si}b{bi}")), f);
            }
        }
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.stem.visit_buffers(&scoped(prefix, "stem"), f);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                block.visit_buffers(&scoped(prefix, &alloc::format!("s{si}b{bi}")), f);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Unified trunk
// ---------------------------------------------------------------------------

pub struct Backbone<T> {
    pub preset: BackbonePreset,
    kind: BackboneKind<T>,
}

enum BackboneKind<T> {
    Tiny(TinyBackbone<T>),
    ResNet(ResNetTrunk<T>),
}

pub enum BackboneCache<T> {
    Tiny(TinyCache<T>),
    ResNet(ResNetCache<T>),
}

impl<T: Scalar> Backbone<T> {
    pub fn new<R: Rng>(preset: BackbonePreset, rng: &mut R) -> Self {
        let kind = match preset {
            BackbonePreset::Tiny => BackboneKind::Tiny(TinyBackbone::new(rng)),
            BackbonePreset::Resnet50ThreeStage => BackboneKind::ResNet(ResNetTrunk::new(6, rng)),
            BackbonePreset::Resnet101ThreeStage => BackboneKind::ResNet(ResNetTrunk::new(23, rng)),
        };
        Backbone { preset, kind }
    }

    pub fn stride(&self) -> usize {
        self.preset.stride()
    }

    pub fn out_channels(&self) -> usize {
        self.preset.out_channels()
    }

    fn check_input(&self, x: &Tensor<T>) -> CoreResult<()> {
        let (_, c, h, w) = dims4(x)?;
        ensure!(c == 3, ShapeMismatch, "backbone expects 3 input channels, got {c}");
        let s = self.stride();
        ensure!(
            h % s == 0 && w % s == 0 && h > 0 && w > 0,
            ShapeMismatch,
            "input {h}x{w} is not divisible by the backbone stride {s}"
        );
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> CoreResult<Tensor<T>> {
        self.check_input(x)?;
        match &self.kind {
            BackboneKind::Tiny(t) => t.forward(x),
            BackboneKind::ResNet(r) => r.forward(x),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> CoreResult<(Tensor<T>, BackboneCache<T>)> {
        self.check_input(x)?;
        match &mut self.kind {
            BackboneKind::Tiny(t) => {
                let (y, c) = t.forward_train(x)?;
                Ok((y, BackboneCache::Tiny(c)))
            }
            BackboneKind::ResNet(r) => {
                let (y, c) = r.forward_train(x)?;
                Ok((y, BackboneCache::ResNet(c)))
            }
        }
    }

    pub fn backward(&mut self, dy: &Tensor<T>, cache: &BackboneCache<T>) -> CoreResult<Tensor<T>> {
        match (&mut self.kind, cache) {
            (BackboneKind::Tiny(t), BackboneCache::Tiny(c)) => t.backward(dy, c),
            (BackboneKind::ResNet(r), BackboneCache::ResNet(c)) => r.backward(dy, c),
            _ => Err(CoreError::InvalidData(String::from(
                "backbone cache does not match backbone kind",
            ))),
        }
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match &mut self.kind {
            BackboneKind::Tiny(t) => t.visit_params(prefix, f),
            BackboneKind::ResNet(r) => r.visit_params(prefix, f),
        }
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        match &mut self.kind {
            BackboneKind::Tiny(_) => {}
            BackboneKind::ResNet(r) => r.visit_buffers(prefix, f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn tiny_shape_and_stride() {
        let mut rng = derive_rng(21, "tiny-shape", 0);
        let bb = Backbone::<f32>::new(BackbonePreset::Tiny, &mut rng);
        let x = Tensor::randn(&[2, 3, 64, 48], 1.0, &mut rng);
        let y = bb.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 64, 8, 6]);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let mut rng = derive_rng(21, "tiny-reject", 0);
        let bb = Backbone::<f32>::new(BackbonePreset::Tiny, &mut rng);
        let x = Tensor::randn(&[1, 3, 60, 64], 1.0, &mut rng);
        assert!(bb.forward(&x).is_err());
    }

    #[test]
    fn resnet50_shape_on_small_input() {
        let mut rng = derive_rng(22, "resnet-shape", 0);
        let bb = Backbone::<f32>::new(BackbonePreset::Resnet50ThreeStage, &mut rng);
        let x = Tensor::randn(&[1, 3, 32, 32], 1.0, &mut rng);
        let y = bb.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1024, 2, 2]);
    }

    #[test]
    fn tiny_backward_matches_finite_differences() {
        let mut rng = derive_rng(23, "tiny-fd", 0);
        let bb = Backbone::<f64>::new(BackbonePreset::Tiny, &mut rng);
        let x = Tensor::randn(&[1, 3, 8, 8], 1.0, &mut rng);
        let obj = |bb: &Backbone<f64>, xt: &Tensor<f64>| -> f64 {
            let y = bb.forward(xt).unwrap();
            y.data().iter().enumerate().map(|(i, v)| ((i % 5) as f64 - 2.0) * v).sum()
        };
        let mut bb2 = Backbone::<f64>::new(BackbonePreset::Tiny, &mut derive_rng(23, "tiny-fd", 0));
        let (y, cache) = bb2.forward_train(&x).unwrap();
        let mut dy = Tensor::zeros(y.shape());
        for (i, v) in dy.data_mut().iter_mut().enumerate() {
            *v = (i % 5) as f64 - 2.0;
        }
        let dx = bb2.backward(&dy, &cache).unwrap();
        let h = 1e-6;
        for i in (0..x.numel()).step_by(17) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (obj(&bb, &xp) - obj(&bb, &xm)) / (2.0 * h);
            let an = dx.data()[i];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            assert!((fd - an).abs() / denom < 1e-4, "index {i}: {an} vs {fd}");
        }
    }
}
