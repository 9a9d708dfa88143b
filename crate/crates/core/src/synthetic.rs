//! Deterministic synthetic dataset: one class-specific shape per image with a
//! class-specific stripe texture on a gray-noise background, plus the exact
//! foreground mask. The masks exist for evaluation only; training code gets a
//! store without them.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

// resolves sin/cos/sqrt on f64 when building without std
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::dataio::InMemoryStore;
use crate::error::{ensure, CoreResult};
use crate::metrics::Mask;
use crate::rng::{derive_rng, normal_f64};
use crate::tensor::{Scalar, Tensor};

pub const MIN_CLASSES: usize = 2;
pub const MAX_CLASSES: usize = 8;
pub const MIN_IMAGE_SIZE: usize = 32;
/// Foreground area fraction is drawn uniformly from this band, which keeps
/// rasterized masks within 5-30% of the pixels.
pub const AREA_FRACTION: (f64, f64) = (0.08, 0.25);

#[derive(Clone, Copy, Debug)]
pub struct SyntheticConfig {
    pub n_per_class: usize,
    pub classes: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> CoreResult<()> {
        ensure!(
            (MIN_CLASSES..=MAX_CLASSES).contains(&self.classes),
            InvalidConfig,
            "unsupported C: {} (supported: {MIN_CLASSES}..={MAX_CLASSES})",
            self.classes
        );
        ensure!(
            self.image_size >= MIN_IMAGE_SIZE,
            InvalidConfig,
            "image size {} too small to place shapes (minimum {MIN_IMAGE_SIZE})",
            self.image_size
        );
        ensure!(self.n_per_class > 0, InvalidConfig, "n_per_class must be > 0");
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSample<T> {
    pub id: String,
    /// 1-based class label.
    pub label: usize,
    /// `[3, s, s]`, values in [0, 1].
    pub image: Tensor<T>,
    /// Exact foreground support of the shape.
    pub mask: Mask,
}

/// One shape per class, all parameterized to hit an exact analytic area `a`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Disk,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
    Ellipse,
    Hexagon,
}

const SHAPES: [Shape; 8] = [
    Shape::Disk,
    Shape::Square,
    Shape::Triangle,
    Shape::Diamond,
    Shape::Cross,
    Shape::Ring,
    Shape::Ellipse,
    Shape::Hexagon,
];

const PALETTE: [[f64; 3]; 8] = [
    [0.85, 0.25, 0.25],
    [0.20, 0.55, 0.85],
    [0.25, 0.70, 0.30],
    [0.85, 0.65, 0.20],
    [0.60, 0.30, 0.75],
    [0.20, 0.70, 0.70],
    [0.85, 0.40, 0.65],
    [0.55, 0.55, 0.20],
];

impl Shape {
    /// Largest distance from the center the shape can reach, for area `a`.
    fn extent(self, a: f64) -> f64 {
        let pi = core::f64::consts::PI;
        match self {
            Shape::Disk => (a / pi).sqrt(),
            Shape::Square => a.sqrt() / 2.0,
            Shape::Triangle | Shape::Diamond => (a / 2.0).sqrt(),
            Shape::Cross => (9.0 * a / 5.0).sqrt() / 2.0,
            Shape::Ring => (4.0 * a / (3.0 * pi)).sqrt(),
            Shape::Ellipse => 1.5 * (a / (1.5 * pi)).sqrt(),
            Shape::Hexagon => (2.0 * a / (3.0 * 3.0f64.sqrt())).sqrt(),
        }
    }

    /// Point-in-shape test for the pixel center (dx, dy) relative to the
    /// shape center, with the same area parameterization as [`extent`].
    fn contains(self, a: f64, dx: f64, dy: f64) -> bool {
        let pi = core::f64::consts::PI;
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            Shape::Disk => {
                let r = (a / pi).sqrt();
                dx * dx + dy * dy <= r * r
            }
            Shape::Square => {
                let half = a.sqrt() / 2.0;
                ax <= half && ay <= half
            }
            Shape::Triangle => {
                // upright isoceles, apex at the top, base = height = sqrt(2a)
                let h = (2.0 * a).sqrt();
                if dy < -h / 2.0 || dy > h / 2.0 {
                    return false;
                }
                let from_apex = dy + h / 2.0;
                ax <= (from_apex / h) * (h / 2.0)
            }
            Shape::Diamond => {
                let r = (a / 2.0).sqrt();
                ax + ay <= r
            }
            Shape::Cross => {
                let l = (9.0 * a / 5.0).sqrt();
                let t = l / 3.0;
                (ax <= l / 2.0 && ay <= t / 2.0) || (ax <= t / 2.0 && ay <= l / 2.0)
            }
            Shape::Ring => {
                let r = (4.0 * a / (3.0 * pi)).sqrt();
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (r / 2.0) * (r / 2.0)
            }
            Shape::Ellipse => {
                let b = (a / (1.5 * pi)).sqrt();
                let major = 1.5 * b;
                let u = dx / major;
                let v = dy / b;
                u * u + v * v <= 1.0
            }
            Shape::Hexagon => {
                // flat-top regular hexagon with circumradius r
                let r = (2.0 * a / (3.0 * 3.0f64.sqrt())).sqrt();
                let s3 = 3.0f64.sqrt();
                ax <= r && ay <= s3 * r / 2.0 && s3 * ax + ay <= s3 * r
            }
        }
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn render<T: Scalar>(
    label: usize,
    size: usize,
    seed: u64,
    global_index: u64,
) -> CoreResult<(Tensor<T>, Mask)> {
    let mut rng = derive_rng(seed, "synth", global_index);
    let s = size as f64;
    let shape = SHAPES[label - 1];
    let frac = rng.gen_range(AREA_FRACTION.0..AREA_FRACTION.1);
    let area = frac * s * s;
    let ext = shape.extent(area);
    ensure!(
        2.0 * (ext + 1.0) < s,
        InvalidConfig,
        "image size {size} too small to place shapes"
    );
    let cx = rng.gen_range(ext + 1.0..s - ext - 1.0);
    let cy = rng.gen_range(ext + 1.0..s - ext - 1.0);

    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            mask.push(u8::from(shape.contains(area, dx, dy)));
        }
    }

    // class-specific stripe texture inside the shape, gray noise outside
    let theta = (label - 1) as f64 * core::f64::consts::PI / 8.0;
    let period = 3.0 + 0.7 * (label - 1) as f64;
    let (dir_x, dir_y) = (theta.cos(), theta.sin());
    let color = PALETTE[label - 1];
    let sp = size * size;
    let mut image = Tensor::zeros(&[3, size, size]);
    let data = image.data_mut();
    for y in 0..size {
        for x in 0..size {
            let px = y * size + x;
            let gray = clamp01(0.5 + 0.08 * normal_f64(&mut rng));
            if mask[px] == 1 {
                let phase = (x as f64 * dir_x + y as f64 * dir_y) / period;
                let stripe = 0.5 + 0.5 * (2.0 * core::f64::consts::PI * phase).sin();
                let gain = 0.55 + 0.4 * stripe;
                let jitter = 0.03 * normal_f64(&mut rng);
                for c in 0..3 {
                    data[c * sp + px] = T::from_f64(clamp01(color[c] * gain + jitter));
                }
            } else {
                for c in 0..3 {
                    data[c * sp + px] = T::from_f64(gray);
                }
            }
        }
    }
    Ok((image, Mask::new(size, size, mask)?))
}

/// Generate the full class-major sample list. Pure function of the config:
/// identical configs produce bit-identical images and masks.
pub fn generate_synthetic<T: Scalar>(
    cfg: &SyntheticConfig,
) -> CoreResult<Vec<SyntheticSample<T>>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.classes * cfg.n_per_class);
    for label in 1..=cfg.classes {
        for i in 0..cfg.n_per_class {
            let global = ((label - 1) * cfg.n_per_class + i) as u64;
            let (image, mask) = render(label, cfg.image_size, cfg.seed, global)?;
            out.push(SyntheticSample {
                id: format!("synth-c{label}-{i:04}"),
                label,
                image,
                mask,
            });
        }
    }
    Ok(out)
}

/// Split generated samples into the training-visible store and the
/// evaluation-only ground-truth map. Training code never sees the masks.
pub fn split_samples<T: Scalar>(
    samples: Vec<SyntheticSample<T>>,
) -> CoreResult<(InMemoryStore<T>, BTreeMap<String, Mask>)> {
    let mut ids = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut images = Vec::with_capacity(samples.len());
    let mut gt = BTreeMap::new();
    for s in samples {
        ids.push(s.id.clone());
        labels.push(s.label);
        images.push(s.image);
        gt.insert(s.id, s.mask);
    }
    let store = InMemoryStore::new(ids, labels, images)?;
    Ok((store, gt))
}
