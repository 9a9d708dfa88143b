//! Segmentation stage: train the U-Net on (image, proxy-mask) pairs with
//! pixel-wise cross-entropy and produce binary predictions.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

// resolves float math on concrete f64 when building without std
#[allow(unused_imports)]
use num_traits::Float;
use crate::error::{ensure, CoreError, CoreResult};
use crate::metrics::Mask;
use crate::nets::adam::{Adam, AdamConfig};
use crate::nets::unet::UNet;
use crate::rng::derive_rng;
use crate::tensor::{Scalar, Tensor};

/// Floor applied inside the log so a confidently wrong pixel cannot produce
/// an infinite loss.
pub const CE_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig {
            epochs: 100,
            batch_size: 16,
            lr: 1e-4,
            seed: 0,
        }
    }
}

impl SegTrainConfig {
    pub fn desk() -> Self {
        SegTrainConfig {
            epochs: 30,
            ..SegTrainConfig::default()
        }
    }

    pub fn validate(&self) -> CoreResult<()> {
        ensure!(self.batch_size >= 1, InvalidConfig, "batch size must be >= 1");
        ensure!(
            self.lr.is_finite() && self.lr >= 0.0,
            InvalidConfig,
            "learning rate must be finite and nonnegative, got {}",
            self.lr
        );
        Ok(())
    }
}

/// Supplies aligned (image, target-mask) pairs for segmentation training.
pub trait SegSampleStore<T: Scalar> {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn id(&self, index: usize) -> &str;

    /// `[3, h, w]` image.
    fn image(&self, index: usize) -> CoreResult<Tensor<T>>;

    /// Target mask matching the image's spatial size.
    fn mask(&self, index: usize) -> CoreResult<Mask>;
}

pub struct InMemorySegStore<T> {
    ids: Vec<String>,
    images: Vec<Tensor<T>>,
    masks: Vec<Mask>,
}

impl<T: Scalar> InMemorySegStore<T> {
    pub fn new(ids: Vec<String>, images: Vec<Tensor<T>>, masks: Vec<Mask>) -> CoreResult<Self> {
        ensure!(
            ids.len() == images.len() && ids.len() == masks.len(),
            InvalidData,
            "ids/images/masks lengths differ: {}/{}/{}",
            ids.len(),
            images.len(),
            masks.len()
        );
        for (img, mask) in images.iter().zip(&masks) {
            let s = img.shape();
            ensure!(
                s.len() == 3 && s[0] == 3,
                ShapeMismatch,
                "expected [3, h, w] images, got {s:?}"
            );
            ensure!(
                s[1] == mask.height() && s[2] == mask.width(),
                ShapeMismatch,
                "image {}x{} does not match mask {}x{}",
                s[1],
                s[2],
                mask.height(),
                mask.width()
            );
        }
        Ok(InMemorySegStore { ids, images, masks })
    }
}

impl<T: Scalar> SegSampleStore<T> for InMemorySegStore<T> {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    fn image(&self, index: usize) -> CoreResult<Tensor<T>> {
        Ok(self.images[index].clone())
    }

    fn mask(&self, index: usize) -> CoreResult<Mask> {
        Ok(self.masks[index].clone())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SegEpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SegTrainRun {
    pub records: Vec<SegEpochRecord>,
    /// Set when the final epoch's mean loss exceeds the first one.
    pub loss_increased: bool,
}

/// Per-pixel softmax over the class channel of `[b, p, h, w]` scores.
pub fn softmax_channels<T: Scalar>(scores: &Tensor<T>) -> CoreResult<Tensor<T>> {
    let s = scores.shape();
    ensure!(
        s.len() == 4 && s[1] >= 2,
        ShapeMismatch,
        "expected [b, p, h, w] scores with p >= 2, got {s:?}"
    );
    ensure!(scores.is_finite(), NonFinite, "non-finite scores in softmax");
    let (b, p, h, w) = (s[0], s[1], s[2], s[3]);
    let sp = h * w;
    let mut out = Tensor::zeros(s);
    let sd = scores.data();
    let od = out.data_mut();
    for bi in 0..b {
        let base = bi * p * sp;
        for px in 0..sp {
            let mut mx = sd[base + px];
            for c in 1..p {
                let v = sd[base + c * sp + px];
                if v > mx {
                    mx = v;
                }
            }
            let mut total = T::zero();
            for c in 0..p {
                let e = (sd[base + c * sp + px] - mx).exp();
                od[base + c * sp + px] = e;
                total += e;
            }
            for c in 0..p {
                od[base + c * sp + px] /= total;
            }
        }
    }
    Ok(out)
}

/// Mean over pixels of the negative log-probability of the target class.
/// `probs` is `[p, h, w]` on the per-pixel simplex; the log argument is
/// clamped at [`CE_CLAMP`].
pub fn pixel_ce_loss<T: Scalar>(probs: &Tensor<T>, target: &Mask) -> CoreResult<f64> {
    let s = probs.shape();
    ensure!(
        s.len() == 3 && s[0] >= 2,
        ShapeMismatch,
        "expected [p, h, w] probs with p >= 2, got {s:?}"
    );
    ensure!(
        s[1] == target.height() && s[2] == target.width(),
        ShapeMismatch,
        "probs {}x{} do not match target {}x{}",
        s[1],
        s[2],
        target.height(),
        target.width()
    );
    let (p, h, w) = (s[0], s[1], s[2]);
    let sp = h * w;
    let pd = probs.data();
    let tol = 1e-5;
    for px in 0..sp {
        let mut total = 0.0f64;
        for c in 0..p {
            let v = pd[c * sp + px].to_f64();
            ensure!(
                (0.0..=1.0 + tol).contains(&v),
                InvalidData,
                "probability {v} outside [0, 1]"
            );
            total += v;
        }
        ensure!(
            (total - 1.0).abs() <= tol,
            InvalidData,
            "per-pixel probabilities sum to {total}, expected 1"
        );
    }
    let mut loss = 0.0f64;
    for (px, &t) in target.data().iter().enumerate() {
        let pt = pd[t as usize * sp + px].to_f64();
        loss -= pt.max(CE_CLAMP).ln();
    }
    Ok(loss / sp as f64)
}

/// Fused softmax + cross-entropy on raw `[b, p, h, w]` scores against one
/// mask per batch item. Returns the mean loss over every pixel in the batch
/// and its gradient with respect to the scores:
/// `(probs - onehot(target)) / num_pixels`.
pub fn pixel_ce_with_grad<T: Scalar>(
    scores: &Tensor<T>,
    targets: &[Mask],
) -> CoreResult<(f64, Tensor<T>)> {
    let s = scores.shape();
    ensure!(
        s.len() == 4 && s[1] >= 2,
        ShapeMismatch,
        "expected [b, p, h, w] scores with p >= 2, got {s:?}"
    );
    ensure!(
        targets.len() == s[0],
        ShapeMismatch,
        "{} targets for a batch of {}",
        targets.len(),
        s[0]
    );
    let (b, p, h, w) = (s[0], s[1], s[2], s[3]);
    for t in targets {
        ensure!(
            t.height() == h && t.width() == w,
            ShapeMismatch,
            "target {}x{} does not match scores {h}x{w}",
            t.height(),
            t.width()
        );
        for &v in t.data() {
            ensure!(
                (v as usize) < p,
                InvalidData,
                "target class {v} outside 0..{p}"
            );
        }
    }
    let sp = h * w;
    let num_pixels = b * sp;
    let mut grad = softmax_channels(scores)?;
    let gd = grad.data_mut();
    let mut loss = 0.0f64;
    let inv = T::from_f64(1.0 / num_pixels as f64);
    for (bi, t) in targets.iter().enumerate() {
        let base = bi * p * sp;
        for (px, &cls) in t.data().iter().enumerate() {
            let at = base + cls as usize * sp + px;
            loss -= gd[at].to_f64().max(CE_CLAMP).ln();
            gd[at] -= T::one();
        }
    }
    for v in gd.iter_mut() {
        *v *= inv;
    }
    let loss = loss / num_pixels as f64;
    ensure!(loss.is_finite(), NonFinite, "non-finite cross-entropy loss");
    Ok((loss, grad))
}

#[derive(Clone, Debug)]
pub struct SegPrediction<T> {
    pub image_id: String,
    /// `[p, h, w]`, per-pixel simplex.
    pub probs: Tensor<T>,
    /// Argmax over classes; the foreground class wins exact ties (relevant
    /// only at cold start, where every channel scores the same).
    pub mask: Mask,
}

/// Run the network on one `[3, h, w]` image and binarize the output.
pub fn predict<T: Scalar>(
    net: &UNet<T>,
    image_id: &str,
    image: &Tensor<T>,
) -> CoreResult<SegPrediction<T>> {
    let s = image.shape();
    ensure!(
        s.len() == 3 && s[0] == 3,
        ShapeMismatch,
        "expected a [3, h, w] image, got {s:?}"
    );
    let (h, w) = (s[1], s[2]);
    let x = image.clone().reshape(&[1, 3, h, w])?;
    let scores = net.forward(&x)?;
    let probs4 = softmax_channels(&scores)?;
    let p = probs4.shape()[1];
    let probs = Tensor::from_vec(&[p, h, w], probs4.data().to_vec())?;
    let sp = h * w;
    let pd = probs.data();
    let mut mask = Vec::with_capacity(sp);
    for px in 0..sp {
        let mut best = 0usize;
        for c in 1..p {
            if pd[c * sp + px] >= pd[best * sp + px] {
                best = c;
            }
        }
        mask.push(if best == 0 { 0u8 } else { 1u8 });
    }
    Ok(SegPrediction {
        image_id: String::from(image_id),
        probs,
        mask: Mask::new(h, w, mask)?,
    })
}

fn stack_batch<T: Scalar, S: SegSampleStore<T> + ?Sized>(
    store: &S,
    indices: &[usize],
) -> CoreResult<(Tensor<T>, Vec<Mask>)> {
    let first = store.image(indices[0])?;
    let s = first.shape().to_vec();
    let mut data = Vec::with_capacity(indices.len() * first.numel());
    let mut masks = Vec::with_capacity(indices.len());
    data.extend_from_slice(first.data());
    masks.push(store.mask(indices[0])?);
    for &i in &indices[1..] {
        let img = store.image(i)?;
        ensure!(
            img.shape() == &s[..],
            ShapeMismatch,
            "image shapes differ within a batch: {:?} vs {:?}",
            img.shape(),
            s
        );
        data.extend_from_slice(img.data());
        masks.push(store.mask(i)?);
    }
    let x = Tensor::from_vec(&[indices.len(), s[0], s[1], s[2]], data)?;
    Ok((x, masks))
}

/// Train `net` in place on the store's (image, mask) pairs. Epochs visit the
/// whole set in a freshly shuffled order; the last batch may be short.
pub fn train_unet<T: Scalar, S: SegSampleStore<T> + ?Sized>(
    net: &mut UNet<T>,
    store: &S,
    cfg: &SegTrainConfig,
) -> CoreResult<SegTrainRun> {
    cfg.validate()?;
    ensure!(!store.is_empty(), InvalidData, "empty segmentation store");
    let n = store.len();
    let mut run = SegTrainRun::default();
    if cfg.epochs == 0 {
        return Ok(run);
    }
    let mut rng = derive_rng(cfg.seed, "seg-batch", 0);
    let mut opt: Adam<T> = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        for i in 0..n.saturating_sub(1) {
            let j = i + rng.gen_range(0..n - i);
            order.swap(i, j);
        }
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, masks) = stack_batch(store, chunk)?;
            let (scores, cache) = net.forward_train(&x)?;
            let (loss, dscores) = pixel_ce_with_grad(&scores, &masks).map_err(|e| match e {
                CoreError::NonFinite(_) => CoreError::NonFinite(alloc::format!(
                    "training diverged: non-finite loss at epoch {epoch}, batch {batches}"
                )),
                other => other,
            })?;
            net.zero_grad();
            net.backward(&dscores, &cache)?;
            opt.step(|f| net.visit_params("", f));
            total += loss;
            batches += 1;
        }
        run.records.push(SegEpochRecord {
            epoch,
            mean_loss: total / batches as f64,
        });
    }
    if let (Some(first), Some(last)) = (run.records.first(), run.records.last()) {
        run.loss_increased = last.mean_loss > first.mean_loss;
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice;
    use crate::nets::unet::UNetConfig;
    use alloc::format;
    use alloc::string::ToString;

    fn probs_from(p: usize, h: usize, w: usize, vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[p, h, w], vals.to_vec()).unwrap()
    }

    #[test]
    fn ce_is_zero_for_perfect_onehot() {
        // target: [[0,1],[1,0]]
        let target = Mask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let probs = probs_from(
            2,
            2,
            2,
            &[
                1.0, 0.0, 0.0, 1.0, // class 0 plane
                0.0, 1.0, 1.0, 0.0, // class 1 plane
            ],
        );
        assert_eq!(pixel_ce_loss(&probs, &target).unwrap(), 0.0);
    }

    #[test]
    fn ce_uniform_two_class_is_ln_two() {
        let target = Mask::new(2, 3, vec![0, 1, 0, 1, 0, 1]).unwrap();
        let probs = Tensor::full(&[2, 2, 3], 0.5f64);
        let loss = pixel_ce_loss(&probs, &target).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12, "got {loss}");
    }

    #[test]
    fn ce_single_pixel_point_one_is_minus_ln_point_one() {
        let target = Mask::new(1, 1, vec![1]).unwrap();
        let probs = probs_from(2, 1, 1, &[0.9, 0.1]);
        let loss = pixel_ce_loss(&probs, &target).unwrap();
        assert!((loss - -(0.1f64.ln())).abs() < 1e-12, "got {loss}");
        assert!((loss - 2.302585092994046).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_off_simplex_probs() {
        let target = Mask::new(1, 1, vec![0]).unwrap();
        let probs = probs_from(2, 1, 1, &[0.9, 0.3]);
        assert!(pixel_ce_loss(&probs, &target).is_err());
        let neg = probs_from(2, 1, 1, &[1.2, -0.2]);
        assert!(pixel_ce_loss(&neg, &target).is_err());
    }

    #[test]
    fn fused_ce_matches_probs_path_and_clamp_bounds_loss() {
        let mut rng = derive_rng(310, "ce", 0);
        let scores = Tensor::<f64>::randn(&[2, 2, 4, 4], 2.0, &mut rng);
        let masks = vec![
            Mask::new(4, 4, (0..16).map(|i| (i % 2) as u8).collect()).unwrap(),
            Mask::new(4, 4, (0..16).map(|i| ((i / 3) % 2) as u8).collect()).unwrap(),
        ];
        let (loss, _) = pixel_ce_with_grad(&scores, &masks).unwrap();
        let probs = softmax_channels(&scores).unwrap();
        let mut by_hand = 0.0;
        for (bi, m) in masks.iter().enumerate() {
            let one = Tensor::from_vec(
                &[2, 4, 4],
                probs.data()[bi * 32..(bi + 1) * 32].to_vec(),
            )
            .unwrap();
            by_hand += pixel_ce_loss(&one, m).unwrap();
        }
        by_hand /= 2.0;
        assert!((loss - by_hand).abs() < 1e-12);

        // hugely confident wrong scores stay finite thanks to the clamp
        let bad = Tensor::from_vec(&[1, 2, 1, 1], vec![500.0f64, -500.0]).unwrap();
        let target = [Mask::new(1, 1, vec![1]).unwrap()];
        let (loss, _) = pixel_ce_with_grad(&bad, &target).unwrap();
        assert!(loss.is_finite());
        assert!((loss - -(CE_CLAMP.ln())).abs() < 1e-6);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = derive_rng(311, "ce-fd", 0);
        let scores = Tensor::<f64>::randn(&[2, 2, 3, 3], 1.0, &mut rng);
        let masks = vec![
            Mask::new(3, 3, vec![0, 1, 0, 1, 0, 1, 0, 1, 0]).unwrap(),
            Mask::new(3, 3, vec![1, 1, 1, 0, 0, 0, 1, 0, 1]).unwrap(),
        ];
        let (_, grad) = pixel_ce_with_grad(&scores, &masks).unwrap();
        let eps = 1e-6;
        for i in 0..scores.numel() {
            let mut plus = scores.clone();
            plus.data_mut()[i] += eps;
            let mut minus = scores.clone();
            minus.data_mut()[i] -= eps;
            let (lp, _) = pixel_ce_with_grad(&plus, &masks).unwrap();
            let (lm, _) = pixel_ce_with_grad(&minus, &masks).unwrap();
            let fd = (lp - lm) / (2.0 * eps);
            let an = grad.data()[i];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                ((fd - an) / denom).abs() <= 1e-4,
                "entry {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn ce_gradient_equals_probs_minus_onehot_over_pixels() {
        let scores = Tensor::from_vec(&[1, 2, 1, 2], vec![0.3f64, -0.7, 1.1, 0.2]).unwrap();
        let masks = [Mask::new(1, 2, vec![1, 0]).unwrap()];
        let (_, grad) = pixel_ce_with_grad(&scores, &masks).unwrap();
        let probs = softmax_channels(&scores).unwrap();
        let sp = 2;
        for px in 0..sp {
            for c in 0..2 {
                let onehot = if masks[0].data()[px] as usize == c { 1.0 } else { 0.0 };
                let expect = (probs.data()[c * sp + px] - onehot) / sp as f64;
                assert!((grad.data()[c * sp + px] - expect).abs() < 1e-15);
            }
        }
    }

    fn zero_final_layer<T: Scalar>(net: &mut UNet<T>) {
        net.visit_params("", &mut |name, p| {
            if name.starts_with("final.") {
                p.value.fill(T::zero());
            }
        });
    }

    #[test]
    fn cold_start_predicts_all_foreground_by_tie_rule() {
        let mut rng = derive_rng(312, "cold", 0);
        let mut net = UNet::<f32>::new(UNetConfig::desk(2), &mut rng);
        zero_final_layer(&mut net);
        let img = Tensor::randn(&[3, 16, 16], 0.5, &mut derive_rng(312, "cold", 1));
        let pred = predict(&net, "x", &img).unwrap();
        // zeroed 1x1 head -> both channels score 0 -> uniform probs
        assert!(pred
            .probs
            .data()
            .iter()
            .all(|&v| (v - 0.5).abs() < 1e-6));
        assert_eq!(pred.mask.count_ones(), 16 * 16);
    }

    #[test]
    fn prediction_is_simplex_binary_and_matches_argmax() {
        let mut rng = derive_rng(313, "pred", 0);
        let net = UNet::<f32>::new(UNetConfig::desk(2), &mut rng);
        let img = Tensor::randn(&[3, 16, 16], 0.5, &mut rng);
        let pred = predict(&net, "y", &img).unwrap();
        let sp = 16 * 16;
        let pd = pred.probs.data();
        for px in 0..sp {
            let total: f32 = (0..2).map(|c| pd[c * sp + px]).sum();
            assert!((total - 1.0).abs() < 1e-5);
            let expect = if pd[sp + px] >= pd[px] { 1 } else { 0 };
            assert_eq!(pred.mask.data()[px], expect);
        }
        assert_eq!(pred.image_id, "y");
    }

    /// Eight images with a bright rectangle on a dark background; the mask is
    /// the rectangle.
    fn overfit_store() -> InMemorySegStore<f32> {
        let mut ids = Vec::new();
        let mut images = Vec::new();
        let mut masks = Vec::new();
        let mut rng = derive_rng(314, "overfit-data", 0);
        for i in 0..8usize {
            let (h, w) = (16usize, 16usize);
            let y0 = 1 + (i * 3) % 7;
            let x0 = 1 + (i * 5) % 7;
            let (rh, rw) = (4 + i % 4, 4 + (i + 2) % 4);
            let mut img = Tensor::<f32>::randn(&[3, h, w], 0.05, &mut rng).map(|v| v + 0.1);
            let mut mask = vec![0u8; h * w];
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    mask[y * w + x] = 1;
                    for c in 0..3 {
                        img.data_mut()[c * h * w + y * w + x] += 0.8;
                    }
                }
            }
            ids.push(format!("ov{i}"));
            images.push(img);
            masks.push(Mask::new(h, w, mask).unwrap());
        }
        InMemorySegStore::new(ids, images, masks).unwrap()
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let mut rng = derive_rng(315, "noop", 0);
        let mut net = UNet::<f32>::new(UNetConfig::desk(2), &mut rng);
        let mut fresh = UNet::<f32>::new(UNetConfig::desk(2), &mut derive_rng(315, "noop", 0));
        let store = overfit_store();
        let cfg = SegTrainConfig {
            epochs: 0,
            ..SegTrainConfig::default()
        };
        let run = train_unet(&mut net, &store, &cfg).unwrap();
        assert!(run.records.is_empty());
        let mut same = true;
        net.visit_params("", &mut |name, p| {
            let mine = p.value.data().to_vec();
            fresh.visit_params("", &mut |n2, p2| {
                if n2 == name && p2.value.data() != &mine[..] {
                    same = false;
                }
            });
        });
        assert!(same, "weights changed despite epochs=0");
    }

    #[test]
    fn training_log_is_deterministic() {
        let store = overfit_store();
        let cfg = SegTrainConfig {
            epochs: 3,
            batch_size: 4,
            lr: 1e-3,
            seed: 9,
        };
        let mut a = UNet::<f32>::new(UNetConfig::desk(2), &mut derive_rng(316, "det", 0));
        let mut b = UNet::<f32>::new(UNetConfig::desk(2), &mut derive_rng(316, "det", 0));
        let ra = train_unet(&mut a, &store, &cfg).unwrap();
        let rb = train_unet(&mut b, &store, &cfg).unwrap();
        assert_eq!(ra.records, rb.records);
    }

    #[test]
    fn overfit_reaches_high_training_dice() {
        let store = overfit_store();
        let cfg = SegTrainConfig {
            epochs: 120,
            batch_size: 8,
            lr: 3e-3,
            seed: 4,
        };
        let mut net = UNet::<f32>::new(UNetConfig::desk(2), &mut derive_rng(317, "ov", 0));
        let run = train_unet(&mut net, &store, &cfg).unwrap();
        assert_eq!(run.records.len(), cfg.epochs);
        assert!(!run.loss_increased);
        assert!(
            run.records.last().unwrap().mean_loss < run.records[0].mean_loss / 4.0,
            "loss barely moved: {} -> {}",
            run.records[0].mean_loss,
            run.records.last().unwrap().mean_loss
        );
        let mut total = 0.0;
        for i in 0..store.len() {
            let pred = predict(&net, store.id(i), &store.image(i).unwrap()).unwrap();
            total += dice(&pred.mask, &store.mask(i).unwrap()).unwrap();
        }
        let mean = total / store.len() as f64;
        assert!(mean >= 0.95, "mean training dice {mean}");
    }

    #[test]
    fn empty_store_is_rejected() {
        let store = InMemorySegStore::<f32>::new(Vec::new(), Vec::new(), Vec::new()).unwrap();
        let mut net = UNet::<f32>::new(UNetConfig::desk(2), &mut derive_rng(318, "empty", 0));
        assert!(train_unet(&mut net, &store, &SegTrainConfig::default()).is_err());
    }

    #[test]
    fn store_rejects_mismatched_mask_shape() {
        let img = Tensor::<f32>::zeros(&[3, 8, 8]);
        let mask = Mask::zeros(8, 9);
        assert!(InMemorySegStore::new(vec!["a".to_string()], vec![img], vec![mask]).is_err());
    }

    #[test]
    fn epoch_record_serializes_to_plain_json() {
        let rec = SegEpochRecord {
            epoch: 3,
            mean_loss: 0.25,
        };
        let json = serde_json::to_string(&rec).unwrap();
        assert_eq!(json, r#"{"epoch":3,"mean_loss":0.25}"#);
    }
}
