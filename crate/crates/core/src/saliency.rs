//! Pixel-level saliency: attention-map extraction, GradCAM for the
//! classifier baseline, bilinear upsampling to image resolution, and
//! thresholding into binary proxy masks.

use alloc::vec::Vec;

// resolves float math on concrete f64 when building without std
#[allow(unused_imports)]
use num_traits::Float;
use crate::error::{ensure, CoreResult};
use crate::metrics::Mask;
use crate::nets::classifier::ClassifierNet;
use crate::nets::embed::ManifoldNet;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradcamNormalize {
    Max,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetClass {
    Predicted,
    TrueLabel,
}

#[derive(Clone, Copy, Debug)]
pub struct ExtractConfig {
    /// Binarization threshold, strictly inside (0, 1).
    pub t: f64,
    pub gradcam_normalize: GradcamNormalize,
    pub target_class: TargetClass,
    /// Threshold the low-resolution map before upsampling instead of after
    /// (ablation flag; default thresholds at full resolution).
    pub threshold_before_upsample: bool,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            t: 0.5,
            gradcam_normalize: GradcamNormalize::Max,
            target_class: TargetClass::TrueLabel,
            threshold_before_upsample: false,
        }
    }
}

impl ExtractConfig {
    pub fn validate(&self) -> CoreResult<()> {
        ensure!(
            self.t > 0.0 && self.t < 1.0,
            InvalidConfig,
            "threshold T must lie strictly inside (0, 1), got {}",
            self.t
        );
        Ok(())
    }
}

/// Bilinear resize of a single-channel map (half-pixel-centre convention,
/// edge-clamped). Constant maps stay constant.
pub fn upsample_bilinear<T: Scalar>(
    map: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> CoreResult<Tensor<T>> {
    let s = map.shape();
    ensure!(s.len() == 2, ShapeMismatch, "expected a 2-d map, got {s:?}");
    ensure!(out_h > 0 && out_w > 0, InvalidConfig, "target size must be positive");
    let (h, w) = (s[0], s[1]);
    let taps = |n: usize, out_n: usize| -> Vec<(usize, usize, f64)> {
        let scale = n as f64 / out_n as f64;
        (0..out_n)
            .map(|i| {
                let src = (i as f64 + 0.5) * scale - 0.5;
                let s0 = src.floor();
                let frac = if src < 0.0 { 0.0 } else { src - s0 };
                let i0 = (s0.max(0.0) as usize).min(n - 1);
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, frac)
            })
            .collect()
    };
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut out = Tensor::zeros(&[out_h, out_w]);
    let md = map.data();
    let od = out.data_mut();
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let fy = T::from_f64(fy);
            let fx = T::from_f64(fx);
            let v00 = md[y0 * w + x0];
            let v01 = md[y0 * w + x1];
            let v10 = md[y1 * w + x0];
            let v11 = md[y1 * w + x1];
            let top = v00 + (v01 - v00) * fx;
            let bot = v10 + (v11 - v10) * fx;
            od[oy * out_w + ox] = top + (bot - top) * fy;
        }
    }
    Ok(out)
}

/// Binarize a saliency map: pixel is foreground iff its value is strictly
/// greater than `t`. Values must lie in [0, 1] and `t` strictly inside (0, 1).
pub fn threshold_map<T: Scalar>(map: &Tensor<T>, t: f64) -> CoreResult<Mask> {
    let s = map.shape();
    ensure!(s.len() == 2, ShapeMismatch, "expected a 2-d map, got {s:?}");
    ensure!(
        t > 0.0 && t < 1.0,
        InvalidConfig,
        "threshold T must lie strictly inside (0, 1), got {t}"
    );
    let tv = T::from_f64(t);
    let mut data = Vec::with_capacity(map.numel());
    for &v in map.data() {
        ensure!(
            v >= T::zero() && v <= T::one(),
            InvalidData,
            "saliency value {v} outside [0, 1]"
        );
        data.push(if v > tv { 1u8 } else { 0u8 });
    }
    Mask::new(s[0], s[1], data)
}

/// Attention map for one `[3, h, w]` image at full image resolution, using
/// only the inference pass (the attention head emits the map directly; no
/// backward graph is built).
pub fn extract_attention<T: Scalar>(
    net: &ManifoldNet<T>,
    image: &Tensor<T>,
) -> CoreResult<Tensor<T>> {
    let s = image.shape();
    ensure!(
        s.len() == 3 && s[0] == 3,
        ShapeMismatch,
        "expected a [3, h, w] image, got {s:?}"
    );
    let (h, w) = (s[1], s[2]);
    let x = image.clone().reshape(&[1, 3, h, w])?;
    let (_e, a) = net.forward(&x)?;
    let (ah, aw) = (a.shape()[2], a.shape()[3]);
    let low = Tensor::from_vec(&[ah, aw], a.data().to_vec())?;
    upsample_bilinear(&low, h, w)
}

/// The GradCAM combination: per-channel weights are the spatial means of the
/// feature gradients, the map is the rectified weighted sum of the feature
/// maps. `features` and `grads` are `[c, m, n]`.
pub fn gradcam_from_parts<T: Scalar>(
    features: &Tensor<T>,
    grads: &Tensor<T>,
) -> CoreResult<Tensor<T>> {
    let s = features.shape();
    ensure!(
        s.len() == 3,
        ShapeMismatch,
        "expected [c, m, n] features, got {s:?}"
    );
    ensure!(
        grads.shape() == s,
        ShapeMismatch,
        "feature/gradient shapes differ: {:?} vs {s:?}",
        grads.shape()
    );
    ensure!(
        grads.is_finite(),
        NonFinite,
        "gradcam called with non-finite gradients"
    );
    let (c, m, n) = (s[0], s[1], s[2]);
    let sp = m * n;
    let inv = T::from_f64(1.0 / sp as f64);
    let mut map = Tensor::zeros(&[m, n]);
    for ch in 0..c {
        let g = &grads.data()[ch * sp..(ch + 1) * sp];
        let mut alpha = T::zero();
        for v in g {
            alpha += *v;
        }
        alpha *= inv;
        let f = &features.data()[ch * sp..(ch + 1) * sp];
        let md = map.data_mut();
        for (o, &fv) in md.iter_mut().zip(f) {
            *o += alpha * fv;
        }
    }
    for v in map.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    Ok(map)
}

/// Divide by the maximum; an all-zero map stays all-zero.
pub fn max_normalize<T: Scalar>(map: &mut Tensor<T>) {
    let mut mx = T::zero();
    for &v in map.data() {
        if v > mx {
            mx = v;
        }
    }
    if mx > T::zero() {
        for v in map.data_mut() {
            *v /= mx;
        }
    }
}

/// GradCAM saliency for one `[3, h, w]` image at image resolution.
/// `label` is the 1-based class used when the config targets the true label.
pub fn gradcam<T: Scalar>(
    net: &ClassifierNet<T>,
    image: &Tensor<T>,
    label: usize,
    cfg: &ExtractConfig,
) -> CoreResult<Tensor<T>> {
    cfg.validate()?;
    let s = image.shape();
    ensure!(
        s.len() == 3 && s[0] == 3,
        ShapeMismatch,
        "expected a [3, h, w] image, got {s:?}"
    );
    let (h, w) = (s[1], s[2]);
    let x = image.clone().reshape(&[1, 3, h, w])?;
    let (logits, features) = net.forward_with_features(&x)?;
    let class = match cfg.target_class {
        TargetClass::TrueLabel => {
            ensure!(
                label >= 1 && label <= net.classes,
                InvalidData,
                "label {label} outside 1..={}",
                net.classes
            );
            label - 1
        }
        TargetClass::Predicted => {
            let row = logits.data();
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        }
    };
    let grads = net.feature_grad(&features, class)?;
    let (c, m, n) = (features.shape()[1], features.shape()[2], features.shape()[3]);
    let feats3 = Tensor::from_vec(&[c, m, n], features.data().to_vec())?;
    let grads3 = Tensor::from_vec(&[c, m, n], grads.data().to_vec())?;
    let mut low = gradcam_from_parts(&feats3, &grads3)?;
    if cfg.gradcam_normalize == GradcamNormalize::Max {
        max_normalize(&mut low);
    }
    upsample_bilinear(&low, h, w)
}

/// Saliency map -> proxy mask under the configured threshold policy.
pub fn proxy_mask_from_map<T: Scalar>(
    low_map: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    cfg: &ExtractConfig,
) -> CoreResult<Mask> {
    cfg.validate()?;
    if cfg.threshold_before_upsample {
        let low = threshold_map(low_map, cfg.t)?;
        // nearest-equivalent upsample of a binary mask: interpolate the
        // {0,1} field bilinearly, then re-binarize at the same threshold
        let as_real = Tensor::from_vec(
            &[low.height(), low.width()],
            low.data().iter().map(|&v| T::from_f64(v as f64)).collect(),
        )?;
        threshold_map(&upsample_bilinear(&as_real, out_h, out_w)?, cfg.t)
    } else {
        threshold_map(&upsample_bilinear(low_map, out_h, out_w)?, cfg.t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::backbone::BackbonePreset;
    use crate::nets::embed::ManifoldNetConfig;
    use crate::rng::derive_rng;
    use core::sync::atomic::Ordering;
    use rand::Rng;

    #[test]
    fn threshold_matches_per_pixel_oracle_on_random_maps() {
        let mut rng = derive_rng(111, "thresh", 0);
        for round in 0..100 {
            let (h, w) = (rng.gen_range(1..12usize), rng.gen_range(1..12usize));
            let mut vals = Vec::with_capacity(h * w);
            for _ in 0..h * w {
                // mix exact landmark values in with random ones
                let v: f64 = match rng.gen_range(0..5u8) {
                    0 => 0.5,
                    1 => 0.0,
                    2 => 1.0,
                    _ => rng.gen::<f64>(),
                };
                vals.push(v);
            }
            let map = Tensor::from_vec(&[h, w], vals.clone()).unwrap();
            let t = match round % 3 {
                0 => 0.5,
                1 => 0.25,
                _ => rng.gen::<f64>() * 0.8 + 0.1,
            };
            let mask = threshold_map(&map, t).unwrap();
            for (i, &v) in vals.iter().enumerate() {
                let expect = if v > t { 1u8 } else { 0u8 };
                assert_eq!(mask.data()[i], expect, "round {round}, value {v}, T {t}");
            }
        }
    }

    #[test]
    fn threshold_strictness_and_validation() {
        let map = Tensor::from_vec(&[1, 2], vec![0.4f64, 0.6]).unwrap();
        let mask = threshold_map(&map, 0.5).unwrap();
        assert_eq!(mask.data(), &[0, 1]);
        // exactly T stays background
        let exact = Tensor::from_vec(&[1, 1], vec![0.5f64]).unwrap();
        assert_eq!(threshold_map(&exact, 0.5).unwrap().data(), &[0]);
        // all-zero map stays empty for any valid T
        let zero = Tensor::<f64>::zeros(&[3, 3]);
        for t in [0.1, 0.5, 0.9] {
            assert_eq!(threshold_map(&zero, t).unwrap().count_ones(), 0);
        }
        assert!(threshold_map(&map, 0.0).is_err());
        assert!(threshold_map(&map, 1.0).is_err());
        let bad = Tensor::from_vec(&[1, 1], vec![1.5f64]).unwrap();
        assert!(threshold_map(&bad, 0.5).is_err());
    }

    #[test]
    fn threshold_idempotent_on_binary_maps() {
        let map = Tensor::from_vec(&[2, 2], vec![0.0f64, 1.0, 1.0, 0.0]).unwrap();
        let m1 = threshold_map(&map, 0.5).unwrap();
        let back = Tensor::from_vec(
            &[2, 2],
            m1.data().iter().map(|&v| v as f64).collect(),
        )
        .unwrap();
        let m2 = threshold_map(&back, 0.5).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn upsample_constants_and_shape() {
        let c = Tensor::<f32>::full(&[14, 14], 0.5);
        let up = upsample_bilinear(&c, 224, 224).unwrap();
        assert_eq!(up.shape(), &[224, 224]);
        assert!(up.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn upsample_identity_when_sizes_match() {
        let mut rng = derive_rng(112, "ups-id", 0);
        let m = Tensor::<f64>::randn(&[5, 7], 1.0, &mut rng);
        let up = upsample_bilinear(&m, 5, 7).unwrap();
        for (a, b) in up.data().iter().zip(m.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradcam_hand_example() {
        // A1 = [[1,0],[0,0]], A2 = [[0,2],[0,0]], mean grads (+1, -1)
        let features =
            Tensor::from_vec(&[2, 2, 2], vec![1.0f64, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0])
                .unwrap();
        let grads = Tensor::from_vec(
            &[2, 2, 2],
            vec![1.0f64, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0],
        )
        .unwrap();
        let map = gradcam_from_parts(&features, &grads).unwrap();
        // weighted sum: 1*A1 + (-1)*A2 = [[1,-2],[0,0]] -> relu [[1,0],[0,0]]
        assert_eq!(map.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gradcam_zero_gradient_gives_zero_map() {
        let features = Tensor::from_vec(&[1, 2, 2], vec![3.0f64, 1.0, 4.0, 1.0]).unwrap();
        let grads = Tensor::zeros(&[1, 2, 2]);
        let mut map = gradcam_from_parts(&features, &grads).unwrap();
        assert!(map.data().iter().all(|&v| v == 0.0));
        max_normalize(&mut map);
        assert!(map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradcam_nonnegative_and_normalized_range() {
        let mut rng = derive_rng(113, "gc", 0);
        for _ in 0..50 {
            let f = Tensor::<f64>::randn(&[3, 4, 4], 1.0, &mut rng);
            let g = Tensor::<f64>::randn(&[3, 4, 4], 1.0, &mut rng);
            let mut map = gradcam_from_parts(&f, &g).unwrap();
            assert!(map.data().iter().all(|&v| v >= 0.0));
            let had_positive = map.data().iter().any(|&v| v > 0.0);
            max_normalize(&mut map);
            assert!(map.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            if had_positive {
                let mx = map.data().iter().cloned().fold(0.0f64, f64::max);
                assert!((mx - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn extraction_uses_only_the_inference_path() {
        let cfg = ManifoldNetConfig {
            preset: BackbonePreset::Tiny,
            embed_dim: 16,
            attention_zero_init: true,
        };
        let net = ManifoldNet::<f32>::new(&cfg, &mut derive_rng(114, "attn-ex", 0));
        let mut rng = derive_rng(114, "attn-ex", 1);
        let img = Tensor::randn(&[3, 32, 32], 0.3, &mut rng).map(|v: f32| v.clamp(0.0, 1.0));
        let before = crate::nets::TRAIN_FORWARD_PASSES.load(Ordering::SeqCst);
        let a = extract_attention(&net, &img).unwrap();
        let after = crate::nets::TRAIN_FORWARD_PASSES.load(Ordering::SeqCst);
        assert_eq!(before, after, "extraction must not run the training path");
        assert_eq!(a.shape(), &[32, 32]);
        // zero-initialized head -> constant 0.5 map, and the upsampled map
        // keeps that constant
        assert!(a.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn extraction_matches_forward_attention() {
        let cfg = ManifoldNetConfig {
            preset: BackbonePreset::Tiny,
            embed_dim: 16,
            attention_zero_init: false,
        };
        let net = ManifoldNet::<f64>::new(&cfg, &mut derive_rng(115, "attn-src", 0));
        let mut rng = derive_rng(115, "attn-src", 1);
        let img = Tensor::randn(&[3, 16, 16], 0.3, &mut rng);
        let x = img.clone().reshape(&[1, 3, 16, 16]).unwrap();
        let (_, a_forward) = net.forward(&x).unwrap();
        let a_low = Tensor::from_vec(&[2, 2], a_forward.data().to_vec()).unwrap();
        let extracted = extract_attention(&net, &img).unwrap();
        let up = upsample_bilinear(&a_low, 16, 16).unwrap();
        assert_eq!(extracted.data(), up.data());
    }
}
