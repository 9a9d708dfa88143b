//! Network checkpoints: a magic line, one JSON header describing every
//! array, then raw little-endian f32 data in header order. Loading rebuilds
//! the architecture from the header metadata and fills arrays by name, so a
//! checkpoint is valid only for the exact architecture that wrote it.

use std::fs;
use std::io::Read;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use weakseg_core::nets::backbone::BackbonePreset;
use weakseg_core::nets::{
    ClassifierConfig, ClassifierNet, ManifoldNet, ManifoldNetConfig, UNet, UNetConfig,
};
use weakseg_core::rng::derive_rng;
use weakseg_core::tensor::Tensor;

const MAGIC: &[u8] = b"WSEGCKPT1\n";

#[derive(Serialize, Deserialize)]
struct ArraySpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    params: Vec<ArraySpec>,
    buffers: Vec<ArraySpec>,
}

type Arrays = Vec<(String, Tensor<f32>)>;

fn write_file(path: &Path, header: &Header, params: &Arrays, buffers: &Arrays) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(serde_json::to_string(header)?.as_bytes());
    out.push(b'\n');
    for (_, t) in params.iter().chain(buffers) {
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<(Header, Arrays, Arrays)> {
    let mut file = fs::File::open(path)
        .with_context(|| format!("cannot open checkpoint {}", path.display()))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if !bytes.starts_with(MAGIC) {
        bail!("{} is not a checkpoint (bad magic)", path.display());
    }
    let rest = &bytes[MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| anyhow!("{}: truncated header", path.display()))?;
    let header: Header = serde_json::from_slice(&rest[..nl])
        .with_context(|| format!("{}: bad header", path.display()))?;
    let mut cursor = &rest[nl + 1..];
    let mut take = |spec: &ArraySpec| -> Result<(String, Tensor<f32>)> {
        let numel: usize = spec.shape.iter().product();
        let want = numel * 4;
        if cursor.len() < want {
            bail!("{}: truncated data for array {}", path.display(), spec.name);
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in cursor[..want].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        cursor = &cursor[want..];
        Ok((spec.name.clone(), Tensor::from_vec(&spec.shape, data)?))
    };
    let mut params = Vec::new();
    for spec in &header.params {
        params.push(take(spec)?);
    }
    let mut buffers = Vec::new();
    for spec in &header.buffers {
        buffers.push(take(spec)?);
    }
    if !cursor.is_empty() {
        bail!("{}: {} trailing bytes", path.display(), cursor.len());
    }
    Ok((header, params, buffers))
}

fn specs(arrays: &Arrays) -> Vec<ArraySpec> {
    arrays
        .iter()
        .map(|(name, t)| ArraySpec {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect()
}

/// Copy `arrays` into a freshly built net through its visitor, by name.
/// Every array must land exactly once and nothing may be left over. The
/// core visitors are infallible, so the first mismatch is stashed and
/// surfaced after the walk.
fn fill(
    arrays: Arrays,
    what: &str,
    visit: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor<f32>)),
) -> Result<()> {
    let mut by_name: std::collections::BTreeMap<String, Tensor<f32>> =
        arrays.into_iter().collect();
    let mut err: Option<anyhow::Error> = None;
    visit(&mut |name, slot| {
        if err.is_some() {
            return;
        }
        match by_name.remove(name) {
            None => err = Some(anyhow!("checkpoint is missing {what} {name}")),
            Some(t) if t.shape() != slot.shape() => {
                err = Some(anyhow!(
                    "{what} {name}: checkpoint shape {:?} != model shape {:?}",
                    t.shape(),
                    slot.shape()
                ));
            }
            Some(t) => *slot = t,
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = by_name.keys().next() {
        bail!("checkpoint has extra {what} {name}");
    }
    Ok(())
}

pub fn save_manifold(path: &Path, net: &mut ManifoldNet<f32>) -> Result<()> {
    let mut params = Vec::new();
    net.visit_params("", &mut |name, p| params.push((name.to_string(), p.value.clone())));
    let mut buffers = Vec::new();
    net.visit_buffers("", &mut |name, t| buffers.push((name.to_string(), t.clone())));
    let header = Header {
        kind: "manifold".into(),
        meta: serde_json::json!({
            "backbone": net.backbone.preset.name(),
            "embed_dim": net.embed_dim,
        }),
        params: specs(&params),
        buffers: specs(&buffers),
    };
    write_file(path, &header, &params, &buffers)
}

pub fn load_manifold(path: &Path) -> Result<ManifoldNet<f32>> {
    let (header, params, buffers) = read_file(path)?;
    if header.kind != "manifold" {
        bail!("{}: expected a manifold checkpoint, found {}", path.display(), header.kind);
    }
    let preset = BackbonePreset::from_name(meta_str(&header, "backbone")?)
        .map_err(|e| anyhow!("{}: {e}", path.display()))?;
    let cfg = ManifoldNetConfig {
        preset,
        embed_dim: meta_usize(&header, "embed_dim")?,
        attention_zero_init: false,
    };
    let mut net = ManifoldNet::new(&cfg, &mut derive_rng(0, "ckpt-load", 0));
    fill(params, "param", |f| {
        net.visit_params("", &mut |name, p| f(name, &mut p.value))
    })?;
    fill(buffers, "buffer", |f| {
        net.visit_buffers("", &mut |name, t| f(name, t))
    })?;
    Ok(net)
}

pub fn save_classifier(path: &Path, net: &mut ClassifierNet<f32>) -> Result<()> {
    let mut params = Vec::new();
    net.visit_params("", &mut |name, p| params.push((name.to_string(), p.value.clone())));
    let mut buffers = Vec::new();
    net.visit_buffers("", &mut |name, t| buffers.push((name.to_string(), t.clone())));
    let header = Header {
        kind: "classifier".into(),
        meta: serde_json::json!({
            "backbone": net.backbone.preset.name(),
            "classes": net.classes,
        }),
        params: specs(&params),
        buffers: specs(&buffers),
    };
    write_file(path, &header, &params, &buffers)
}

pub fn load_classifier(path: &Path) -> Result<ClassifierNet<f32>> {
    let (header, params, buffers) = read_file(path)?;
    if header.kind != "classifier" {
        bail!("{}: expected a classifier checkpoint, found {}", path.display(), header.kind);
    }
    let cfg = ClassifierConfig {
        preset: BackbonePreset::from_name(meta_str(&header, "backbone")?)
            .map_err(|e| anyhow!("{}: {e}", path.display()))?,
        classes: meta_usize(&header, "classes")?,
    };
    let mut net = ClassifierNet::new(&cfg, &mut derive_rng(0, "ckpt-load", 1));
    fill(params, "param", |f| {
        net.visit_params("", &mut |name, p| f(name, &mut p.value))
    })?;
    fill(buffers, "buffer", |f| {
        net.visit_buffers("", &mut |name, t| f(name, t))
    })?;
    Ok(net)
}

pub fn save_unet(path: &Path, net: &mut UNet<f32>) -> Result<()> {
    let mut params = Vec::new();
    net.visit_params("", &mut |name, p| params.push((name.to_string(), p.value.clone())));
    let header = Header {
        kind: "unet".into(),
        meta: serde_json::json!({
            "in_channels": net.cfg.in_channels,
            "classes": net.cfg.classes,
            "depth": net.cfg.depth,
            "init_filters": net.cfg.init_filters,
        }),
        params: specs(&params),
        buffers: Vec::new(),
    };
    write_file(path, &header, &params, &Vec::new())
}

pub fn load_unet(path: &Path) -> Result<UNet<f32>> {
    let (header, params, _buffers) = read_file(path)?;
    if header.kind != "unet" {
        bail!("{}: expected a unet checkpoint, found {}", path.display(), header.kind);
    }
    let cfg = UNetConfig {
        in_channels: meta_usize(&header, "in_channels")?,
        classes: meta_usize(&header, "classes")?,
        depth: meta_usize(&header, "depth")?,
        init_filters: meta_usize(&header, "init_filters")?,
    };
    let mut net = UNet::new(cfg, &mut derive_rng(0, "ckpt-load", 2));
    fill(params, "param", |f| {
        net.visit_params("", &mut |name, p| f(name, &mut p.value))
    })?;
    Ok(net)
}

fn meta_str<'h>(header: &'h Header, key: &str) -> Result<&'h str> {
    header.meta[key]
        .as_str()
        .ok_or_else(|| anyhow!("checkpoint header lacks string meta '{key}'"))
}

fn meta_usize(header: &Header, key: &str) -> Result<usize> {
    header.meta[key]
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| anyhow!("checkpoint header lacks integer meta '{key}'"))
}
