//! File-backed sample stores. Images and masks stay on disk and are decoded
//! on demand, so nothing at paper scale has to fit in memory; decoding is a
//! pure function of the file bytes, keeping epochs deterministic.

use std::path::{Path, PathBuf};

use anyhow::Result;
use weakseg_core::dataio::SampleStore;
use weakseg_core::error::{CoreError, CoreResult};
use weakseg_core::metrics::Mask;
use weakseg_core::segtrain::SegSampleStore;
use weakseg_core::tensor::Tensor;

use crate::imageio::{load_image, load_mask_png};
use crate::manifest::{DatasetManifest, ProxyEntry};

fn io_err(e: anyhow::Error) -> CoreError {
    CoreError::InvalidData(format!("{e:#}"))
}

/// Classification samples: `id,path,label` rows resolved against a root.
pub struct FileStore {
    ids: Vec<String>,
    labels: Vec<usize>,
    paths: Vec<PathBuf>,
    image_size: usize,
}

impl FileStore {
    pub fn from_manifest(manifest: &DatasetManifest, root: &Path, image_size: usize) -> Self {
        FileStore {
            ids: manifest.entries.iter().map(|e| e.id.clone()).collect(),
            labels: manifest.entries.iter().map(|e| e.label).collect(),
            paths: manifest.entries.iter().map(|e| root.join(&e.path)).collect(),
            image_size,
        }
    }
}

impl SampleStore<f32> for FileStore {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    fn image(&self, index: usize) -> CoreResult<Tensor<f32>> {
        load_image(&self.paths[index], self.image_size, self.image_size).map_err(io_err)
    }
}

/// Proxy-supervised segmentation pairs: images under the data root, masks
/// under the emitting stage's directory.
pub struct FileSegStore {
    ids: Vec<String>,
    image_paths: Vec<PathBuf>,
    mask_paths: Vec<PathBuf>,
    image_size: usize,
}

impl FileSegStore {
    pub fn new(
        entries: &[ProxyEntry],
        data_root: &Path,
        mask_root: &Path,
        image_size: usize,
    ) -> Result<Self> {
        Ok(FileSegStore {
            ids: entries.iter().map(|e| e.id.clone()).collect(),
            image_paths: entries.iter().map(|e| data_root.join(&e.image)).collect(),
            mask_paths: entries.iter().map(|e| mask_root.join(&e.mask)).collect(),
            image_size,
        })
    }
}

impl SegSampleStore<f32> for FileSegStore {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    fn image(&self, index: usize) -> CoreResult<Tensor<f32>> {
        load_image(&self.image_paths[index], self.image_size, self.image_size).map_err(io_err)
    }

    fn mask(&self, index: usize) -> CoreResult<Mask> {
        let mask = load_mask_png(&self.mask_paths[index]).map_err(io_err)?;
        if mask.height() != self.image_size || mask.width() != self.image_size {
            return Err(CoreError::ShapeMismatch(format!(
                "mask {} is {}x{}, expected {}x{}",
                self.mask_paths[index].display(),
                mask.height(),
                mask.width(),
                self.image_size,
                self.image_size
            )));
        }
        Ok(mask)
    }
}
