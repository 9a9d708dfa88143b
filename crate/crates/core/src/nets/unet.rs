//! Encoder-decoder segmentation net: double-conv blocks, 2x2 max-pool
//! downsampling, bilinear 2x upsampling with skip concatenation, and a 1x1
//! projection to per-class score maps.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{ensure, CoreResult};
use crate::nets::backbone::BackbonePreset;
use crate::nets::layers::{
    dims4, relu, relu_backward, scoped, upsample2x, upsample2x_backward, Conv2d, ConvCache,
    MaxPool2d, Param, PoolCache,
};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub classes: usize,
    pub depth: usize,
    pub init_filters: usize,
}

impl UNetConfig {
    /// Full-size configuration: depth 4, 32 initial filters.
    pub fn full(classes: usize) -> Self {
        UNetConfig {
            in_channels: 3,
            classes,
            depth: 4,
            init_filters: 32,
        }
    }

    /// CPU-scale configuration paired with the tiny trunk.
    pub fn desk(classes: usize) -> Self {
        UNetConfig {
            in_channels: 3,
            classes,
            depth: 3,
            init_filters: 8,
        }
    }

    pub fn for_preset(preset: BackbonePreset, classes: usize) -> Self {
        match preset {
            BackbonePreset::Tiny => UNetConfig::desk(classes),
            _ => UNetConfig::full(classes),
        }
    }
}

#[derive(Clone, Debug)]
struct DoubleConv<T> {
    a: Conv2d<T>,
    b: Conv2d<T>,
}

struct DoubleConvCache<T> {
    ca: ConvCache<T>,
    ra: Tensor<T>,
    cb: ConvCache<T>,
    rb: Tensor<T>,
}

impl<T: Scalar> DoubleConv<T> {
    fn new<R: Rng>(in_c: usize, out_c: usize, rng: &mut R) -> Self {
        DoubleConv {
            a: Conv2d::new(in_c, out_c, 3, 1, 1, rng),
            b: Conv2d::new(out_c, out_c, 3, 1, 1, rng),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> CoreResult<Tensor<T>> {
        let h = relu(&self.a.forward(x)?);
        Ok(relu(&self.b.forward(&h)?))
    }

    fn forward_train(&self, x: &Tensor<T>) -> CoreResult<(Tensor<T>, DoubleConvCache<T>)> {
        let (ya, ca) = self.a.forward_train(x)?;
        let ra = relu(&ya);
        let (yb, cb) = self.b.forward_train(&ra)?;
        let rb = relu(&yb);
        Ok((rb.clone(), DoubleConvCache { ca, ra, cb, rb }))
    }

    fn backward(&mut self, dy: &Tensor<T>, cache: &DoubleConvCache<T>) -> CoreResult<Tensor<T>> {
        let dyb = relu_backward(dy, &cache.rb);
        let dra = self.b.backward(&dyb, &cache.cb)?;
        let dya = relu_backward(&dra, &cache.ra);
        self.a.backward(&dya, &cache.ca)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.a.visit_params(&scoped(prefix, "a"), f);
        self.b.visit_params(&scoped(prefix, "b"), f);
    }
}

fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> CoreResult<Tensor<T>> {
    let (ba, ca, h, w) = dims4(a)?;
    let (bb, cb, hb, wb) = dims4(b)?;
    ensure!(
        ba == bb && h == hb && w == wb,
        ShapeMismatch,
        "concat operands {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let mut y = Tensor::zeros(&[ba, ca + cb, h, w]);
    let sp = h * w;
    let yd = y.data_mut();
    for bi in 0..ba {
        let dst = bi * (ca + cb) * sp;
        yd[dst..dst + ca * sp].copy_from_slice(&a.data()[bi * ca * sp..(bi + 1) * ca * sp]);
        yd[dst + ca * sp..dst + (ca + cb) * sp]
            .copy_from_slice(&b.data()[bi * cb * sp..(bi + 1) * cb * sp]);
    }
    Ok(y)
}

fn split_channels<T: Scalar>(dy: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let (b, c, h, w) = (dy.shape()[0], dy.shape()[1], dy.shape()[2], dy.shape()[3]);
    let cb = c - ca;
    let sp = h * w;
    let mut da = Tensor::zeros(&[b, ca, h, w]);
    let mut db = Tensor::zeros(&[b, cb, h, w]);
    for bi in 0..b {
        let src = bi * c * sp;
        da.data_mut()[bi * ca * sp..(bi + 1) * ca * sp]
            .copy_from_slice(&dy.data()[src..src + ca * sp]);
        db.data_mut()[bi * cb * sp..(bi + 1) * cb * sp]
            .copy_from_slice(&dy.data()[src + ca * sp..src + c * sp]);
    }
    (da, db)
}

pub struct UNet<T> {
    enc: Vec<DoubleConv<T>>,
    bottleneck: DoubleConv<T>,
    dec: Vec<DoubleConv<T>>, // deepest level first
    final_conv: Conv2d<T>,
    pool: MaxPool2d,
    pub cfg: UNetConfig,
}

pub struct UNetCache<T> {
    enc: Vec<DoubleConvCache<T>>,
    pools: Vec<PoolCache>,
    bottleneck: DoubleConvCache<T>,
    dec: Vec<DoubleConvCache<T>>,
    up_in_shapes: Vec<Vec<usize>>,
    final_cache: ConvCache<T>,
}

impl<T: Scalar> UNet<T> {
    pub fn new<R: Rng>(cfg: UNetConfig, rng: &mut R) -> Self {
        let f = cfg.init_filters;
        let mut enc = Vec::new();
        let mut in_c = cfg.in_channels;
        for lvl in 0..cfg.depth {
            let out_c = f << lvl;
            enc.push(DoubleConv::new(in_c, out_c, rng));
            in_c = out_c;
        }
        let bottleneck = DoubleConv::new(in_c, f << cfg.depth, rng);
        let mut dec = Vec::new();
        for lvl in (0..cfg.depth).rev() {
            let up_c = f << (lvl + 1);
            let skip_c = f << lvl;
            dec.push(DoubleConv::new(up_c + skip_c, skip_c, rng));
        }
        let final_conv = Conv2d::new(f, cfg.classes, 1, 1, 0, rng);
        UNet {
            enc,
            bottleneck,
            dec,
            final_conv,
            pool: MaxPool2d::new(2, 2, 0),
            cfg,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> CoreResult<()> {
        let (_, c, h, w) = dims4(x)?;
        ensure!(
            c == self.cfg.in_channels,
            ShapeMismatch,
            "unet expects {} channels, got {c}",
            self.cfg.in_channels
        );
        let div = 1usize << self.cfg.depth;
        ensure!(
            h % div == 0 && w % div == 0 && h > 0 && w > 0,
            ShapeMismatch,
            "input {h}x{w} is not divisible by 2^depth = {div}"
        );
        Ok(())
    }

    /// Per-class score maps `[b, classes, h, w]`.
    pub fn forward(&self, x: &Tensor<T>) -> CoreResult<Tensor<T>> {
        self.check_input(x)?;
        let mut skips = Vec::new();
        let mut h = x.clone();
        for block in &self.enc {
            let s = block.forward(&h)?;
            h = self.pool.forward(&s)?;
            skips.push(s);
        }
        h = self.bottleneck.forward(&h)?;
        for (block, skip) in self.dec.iter().zip(skips.iter().rev()) {
            let up = upsample2x(&h)?;
            h = block.forward(&concat_channels(&up, skip)?)?;
        }
        self.final_conv.forward(&h)
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> CoreResult<(Tensor<T>, UNetCache<T>)> {
        self.check_input(x)?;
        let mut enc_caches = Vec::new();
        let mut pools = Vec::new();
        let mut skips = Vec::new();
        let mut h = x.clone();
        for block in &self.enc {
            let (s, c) = block.forward_train(&h)?;
            let (p, pc) = self.pool.forward_train(&s)?;
            h = p;
            enc_caches.push(c);
            pools.push(pc);
            skips.push(s);
        }
        let (mut h, bottleneck) = self.bottleneck.forward_train(&h)?;
        let mut dec_caches = Vec::new();
        let mut up_in_shapes = Vec::new();
        for (block, skip) in self.dec.iter().zip(skips.iter().rev()) {
            up_in_shapes.push(h.shape().to_vec());
            let up = upsample2x(&h)?;
            let (y, c) = block.forward_train(&concat_channels(&up, skip)?)?;
            h = y;
            dec_caches.push(c);
        }
        let (logits, final_cache) = self.final_conv.forward_train(&h)?;
        Ok((
            logits,
            UNetCache {
                enc: enc_caches,
                pools,
                bottleneck,
                dec: dec_caches,
                up_in_shapes,
                final_cache,
            },
        ))
    }

    pub fn backward(&mut self, d_logits: &Tensor<T>, cache: &UNetCache<T>) -> CoreResult<()> {
        let mut g = self.final_conv.backward(d_logits, &cache.final_cache)?;
        // skip gradients indexed by encoder level
        let depth = self.cfg.depth;
        let mut skip_grads: Vec<Option<Tensor<T>>> = Vec::new();
        skip_grads.resize_with(depth, || None);
        for (j, block) in self.dec.iter_mut().enumerate().rev() {
            let dcat = block.backward(&g, &cache.dec[j])?;
            let up_c = cache.up_in_shapes[j][1];
            let (dup, dskip) = split_channels(&dcat, up_c);
            skip_grads[depth - 1 - j] = Some(dskip);
            g = upsample2x_backward(&dup, &cache.up_in_shapes[j]);
        }
        g = self.bottleneck.backward(&g, &cache.bottleneck)?;
        for i in (0..depth).rev() {
            let mut ds = self.pool.backward(&g, &cache.pools[i]);
            if let Some(sg) = &skip_grads[i] {
                ds.add_assign(sg);
            }
            g = self.enc[i].backward(&ds, &cache.enc[i])?;
        }
        Ok(())
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.enc.iter_mut().enumerate() {
            b.visit_params(&scoped(prefix, &alloc::format!("enc{i}")), f);
        }
        self.bottleneck
            .visit_params(&scoped(prefix, "bottleneck"), f);
        for (i, b) in self.dec.iter_mut().enumerate() {
            b.visit_params(&scoped(prefix, &alloc::format!("dec{i}")), f);
        }
        self.final_conv.visit_params(&scoped(prefix, "final"), f);
    }

    pub fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }
}
