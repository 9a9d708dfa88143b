//! Image and mask IO. Images load as CHW float tensors in [0, 1] and are
//! bilinearly resized to the working resolution. Masks are 8-bit PNGs with
//! values {0, 255}; saliency maps are 16-bit grayscale PNGs.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use weakseg_core::metrics::Mask;
use weakseg_core::saliency::upsample_bilinear;
use weakseg_core::tensor::Tensor;

/// Decode an RGB image, scale to [0, 1] and resize to `out_h` x `out_w`.
pub fn load_image(path: &Path, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .with_context(|| format!("cannot decode image {}", path.display()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                data[c * h * w + y * w + x] = px.0[c] as f32 / 255.0;
            }
        }
    }
    let native = Tensor::from_vec(&[3, h, w], data)?;
    resize_chw(&native, out_h, out_w)
}

/// Bilinear channel-wise resize of a [c, h, w] tensor.
pub fn resize_chw(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let shape = image.shape();
    if shape.len() != 3 {
        bail!("resize expects [c, h, w], got {shape:?}");
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h == out_h && w == out_w {
        return Ok(image.clone());
    }
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    for ch in 0..c {
        let plane = Tensor::from_vec(
            &[h, w],
            image.data()[ch * h * w..(ch + 1) * h * w].to_vec(),
        )?;
        let resized = upsample_bilinear(&plane, out_h, out_w)?;
        out.data_mut()[ch * out_h * out_w..(ch + 1) * out_h * out_w]
            .copy_from_slice(resized.data());
    }
    Ok(out)
}

/// Write a [3, h, w] tensor as an 8-bit RGB PNG, clamping to [0, 1].
pub fn save_image_rgb(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        bail!("save_image_rgb expects [3, h, w], got {shape:?}");
    }
    let (h, w) = (shape[1], shape[2]);
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = image.data()[c * h * w + y * w + x].clamp(0.0, 1.0);
                px[c] = (v * 255.0).round() as u8;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    ensure_parent(path)?;
    img.save(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Write a binary mask as an 8-bit gray PNG with values {0, 255}.
pub fn save_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = (mask.height(), mask.width());
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = if mask.data()[y * w + x] != 0 { 255u8 } else { 0u8 };
            img.put_pixel(x as u32, y as u32, Luma([v]));
        }
    }
    ensure_parent(path)?;
    img.save(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn load_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .with_context(|| format!("cannot decode mask {}", path.display()))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = match img.get_pixel(x as u32, y as u32).0[0] {
                0 => 0,
                255 => 1,
                other => bail!(
                    "mask {} has non-binary value {other} at ({x}, {y})",
                    path.display()
                ),
            };
        }
    }
    Ok(Mask::new(h, w, data)?)
}

/// Write a [h, w] map with values in [0, 1] as a 16-bit gray PNG.
pub fn save_saliency_png(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let shape = map.shape();
    if shape.len() != 2 {
        bail!("saliency map must be [h, w], got {shape:?}");
    }
    let (h, w) = (shape[0], shape[1]);
    let mut img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = map.data()[y * w + x];
            if !(0.0..=1.0).contains(&v) {
                bail!("saliency value {v} outside [0, 1] at ({x}, {y})");
            }
            img.put_pixel(x as u32, y as u32, Luma([(v * 65535.0).round() as u16]));
        }
    }
    ensure_parent(path)?;
    img.save(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn load_saliency_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .with_context(|| format!("cannot decode saliency {}", path.display()))?
        .to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = img.get_pixel(x as u32, y as u32).0[0] as f32 / 65535.0;
        }
    }
    Ok(Tensor::from_vec(&[h, w], data)?)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_white_resizes_to_all_ones() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("white.png");
        let img = RgbImage::from_pixel(10, 10, image::Rgb([255, 255, 255]));
        img.save(&p).unwrap();
        let t = load_image(&p, 224, 224).unwrap();
        assert_eq!(t.shape(), &[3, 224, 224]);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identity_resize_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ramp.png");
        let mut img = RgbImage::new(8, 8);
        for y in 0..8u32 {
            for x in 0..8u32 {
                let v = (y * 8 + x) as u8;
                img.put_pixel(x, y, image::Rgb([v, 2 * v, 255 - v]));
            }
        }
        img.save(&p).unwrap();
        let t = load_image(&p, 8, 8).unwrap();
        for y in 0..8usize {
            for x in 0..8usize {
                let v = (y * 8 + x) as f32;
                assert_eq!(t.data()[y * 8 + x], v / 255.0);
                assert_eq!(t.data()[64 + y * 8 + x], 2.0 * v / 255.0);
                assert_eq!(t.data()[128 + y * 8 + x], (255.0 - v) / 255.0);
            }
        }
    }

    #[test]
    fn gray_ramp_spans_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gray.png");
        let mut img = GrayImage::new(16, 1);
        for x in 0..16u32 {
            img.put_pixel(x, 0, Luma([(x * 17) as u8]));
        }
        img.save(&p).unwrap();
        let t = load_image(&p, 1, 16).unwrap();
        let lo = t.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = t.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn mask_png_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let mask = Mask::new(3, 4, vec![0, 1, 1, 0, 1, 0, 0, 1, 1, 1, 0, 0]).unwrap();
        save_mask_png(&p, &mask).unwrap();
        let back = load_mask_png(&p).unwrap();
        assert_eq!(back.data(), mask.data());
        assert_eq!((back.height(), back.width()), (3, 4));
    }

    #[test]
    fn non_binary_mask_pixels_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        let img = GrayImage::from_pixel(2, 2, Luma([7]));
        img.save(&p).unwrap();
        assert!(load_mask_png(&p).is_err());
    }

    #[test]
    fn saliency_round_trip_is_bit_exact_at_16_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.png");
        let vals: Vec<f32> = (0..12).map(|i| (i as f32 * 5951.0).round() / 65535.0).collect();
        let map = Tensor::from_vec(&[3, 4], vals.clone()).unwrap();
        save_saliency_png(&p, &map).unwrap();
        let back = load_saliency_png(&p).unwrap();
        assert_eq!(back.data(), map.data());
        let bad = Tensor::from_vec(&[1, 1], vec![1.5f32]).unwrap();
        assert!(save_saliency_png(&dir.path().join("x.png"), &bad).is_err());
    }
}
