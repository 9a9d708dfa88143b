//! Qualitative inspection panels: input | saliency heatmap | binary mask,
//! side by side in one PNG per image.

use std::path::Path;

use anyhow::{bail, Result};
use weakseg_core::metrics::Mask;
use weakseg_core::tensor::Tensor;

use crate::imageio::save_image_rgb;

const GAP: usize = 2;

/// Blue (cold) through gray to red (hot).
fn heat(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    [v, 0.5 * (1.0 - (2.0 * v - 1.0).abs()), 1.0 - v]
}

/// Compose one `input | heatmap | mask` panel.
pub fn overlay_panel(image: &Tensor<f32>, map: &Tensor<f32>, mask: &Mask) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        bail!("overlay expects a [3, h, w] image, got {s:?}");
    }
    let (h, w) = (s[1], s[2]);
    if map.shape() != [h, w] {
        bail!("saliency map {:?} does not match image {h}x{w}", map.shape());
    }
    if mask.height() != h || mask.width() != w {
        bail!(
            "mask {}x{} does not match image {h}x{w}",
            mask.height(),
            mask.width()
        );
    }
    let pw = 3 * w + 2 * GAP;
    let mut panel = Tensor::from_vec(&[3, h, pw], vec![1.0f32; 3 * h * pw])?;
    let mut put = |c: usize, y: usize, x: usize, v: f32| panel.data_mut()[c * h * pw + y * pw + x] = v;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                put(c, y, x, image.data()[c * h * w + y * w + x]);
            }
            let hm = heat(map.data()[y * w + x]);
            for c in 0..3 {
                put(c, y, w + GAP + x, hm[c]);
            }
            let mv = mask.data()[y * w + x] as f32;
            for c in 0..3 {
                put(c, y, 2 * (w + GAP) + x, mv);
            }
        }
    }
    Ok(panel)
}

/// Write one panel per aligned (id, image, map, mask) item into `out_dir`.
pub fn emit_overlays(
    items: &[(String, Tensor<f32>, Tensor<f32>, Mask)],
    out_dir: &Path,
) -> Result<usize> {
    for (id, image, map, mask) in items {
        let panel = overlay_panel(image, map, mask)?;
        save_image_rgb(&out_dir.join(format!("{id}.png")), &panel)?;
    }
    Ok(items.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, v: f32) -> (String, Tensor<f32>, Tensor<f32>, Mask) {
        let image = Tensor::from_vec(&[3, 4, 4], vec![0.2f32; 48]).unwrap();
        let map = Tensor::from_vec(&[4, 4], vec![v; 16]).unwrap();
        let mask = Mask::new(4, 4, vec![0u8; 16]).unwrap();
        (id.into(), image, map, mask)
    }

    #[test]
    fn three_items_give_three_panels() {
        let dir = tempfile::tempdir().unwrap();
        let items = vec![item("a", 0.1), item("b", 0.5), item("c", 0.9)];
        assert_eq!(emit_overlays(&items, dir.path()).unwrap(), 3);
        for id in ["a", "b", "c"] {
            assert!(dir.path().join(format!("{id}.png")).is_file());
        }
    }

    #[test]
    fn constant_half_map_renders_uniform_mid_heat() {
        let (_, image, map, mask) = item("x", 0.5);
        let panel = overlay_panel(&image, &map, &mask).unwrap();
        let (h, pw) = (4usize, 3 * 4 + 2 * GAP);
        let first = (0..3)
            .map(|c| panel.data()[c * h * pw + 4 + GAP])
            .collect::<Vec<_>>();
        assert_eq!(first, vec![0.5, 0.5, 0.5]);
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    assert_eq!(panel.data()[c * h * pw + y * pw + 4 + GAP + x], first[c]);
                }
            }
        }
    }

    #[test]
    fn rerun_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let items = vec![item("a", 0.3)];
        emit_overlays(&items, dir.path()).unwrap();
        let once = std::fs::read(dir.path().join("a.png")).unwrap();
        emit_overlays(&items, dir.path()).unwrap();
        assert_eq!(once, std::fs::read(dir.path().join("a.png")).unwrap());
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let (_, image, _, mask) = item("x", 0.5);
        let small = Tensor::from_vec(&[2, 2], vec![0.5f32; 4]).unwrap();
        assert!(overlay_panel(&image, &small, &mask).is_err());
    }
}
