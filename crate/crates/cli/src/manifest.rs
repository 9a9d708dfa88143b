//! CSV manifests: dataset entries (`id,path,label`), proxy-mask pairs
//! (`id,image,mask`) and prediction lists (`id,mask`). All paths in a
//! manifest are relative; the caller decides the root they resolve against.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    /// 1-based class label.
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Inferred as the maximum label present.
    pub classes: usize,
}

/// Load and validate `id,path,label`. When `data_root` is given, every image
/// path must resolve under it.
pub fn load_manifest(path: &Path, data_root: Option<&Path>) -> Result<DatasetManifest> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("cannot open manifest {}", path.display()))?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "path", "label"] {
        bail!(
            "manifest {} must have header id,path,label, got {:?}",
            path.display(),
            headers
        );
    }
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    let mut classes = 0usize;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let id = record.get(0).unwrap_or("").to_string();
        let rel = record.get(1).unwrap_or("").to_string();
        let label: usize = record
            .get(2)
            .unwrap_or("")
            .parse()
            .with_context(|| format!("{}: non-integer label on row {}", path.display(), line + 2))?;
        if id.is_empty() || rel.is_empty() {
            bail!("{}: empty id or path on row {}", path.display(), line + 2);
        }
        if !seen.insert(id.clone()) {
            bail!("{}: duplicate id {id}", path.display());
        }
        if label < 1 {
            bail!("{}: label must be >= 1, got {label} for {id}", path.display());
        }
        if let Some(root) = data_root {
            let full = root.join(&rel);
            if !full.is_file() {
                bail!("{}: path {} does not resolve for {id}", path.display(), full.display());
            }
        }
        classes = classes.max(label);
        entries.push(ManifestEntry { id, path: rel, label });
    }
    if entries.is_empty() {
        bail!("manifest {} has no entries", path.display());
    }
    Ok(DatasetManifest { entries, classes })
}

pub fn save_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["id", "path", "label"])?;
    for e in entries {
        writer.write_record([&e.id, &e.path, &e.label.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

/// One proxy-supervision pair. `image` is relative to the data root,
/// `mask` relative to the manifest's own directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProxyEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
}

pub fn load_proxy_manifest(path: &Path) -> Result<Vec<ProxyEntry>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("cannot open proxy manifest {}", path.display()))?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "image", "mask"] {
        bail!(
            "proxy manifest {} must have header id,image,mask, got {:?}",
            path.display(),
            headers
        );
    }
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for record in reader.records() {
        let record = record?;
        let entry = ProxyEntry {
            id: record.get(0).unwrap_or("").to_string(),
            image: record.get(1).unwrap_or("").to_string(),
            mask: record.get(2).unwrap_or("").to_string(),
        };
        if !seen.insert(entry.id.clone()) {
            bail!("{}: duplicate id {}", path.display(), entry.id);
        }
        entries.push(entry);
    }
    if entries.is_empty() {
        bail!("proxy manifest {} has no entries", path.display());
    }
    Ok(entries)
}

pub fn save_proxy_manifest(path: &Path, entries: &[ProxyEntry]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["id", "image", "mask"])?;
    for e in entries {
        writer.write_record([&e.id, &e.image, &e.mask])?;
    }
    writer.flush()?;
    Ok(())
}

/// Prediction list `id,mask` with mask paths relative to the manifest dir.
pub fn save_prediction_manifest(path: &Path, entries: &[(String, String)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["id", "mask"])?;
    for (id, mask) in entries {
        writer.write_record([id, mask])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(path: &Path, text: &str) {
        fs::write(path, text).unwrap();
    }

    #[test]
    fn three_row_csv_infers_classes() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.csv");
        write(&m, "id,path,label\na,x.png,1\nb,y.png,2\nc,z.png,2\n");
        let manifest = load_manifest(&m, None).unwrap();
        assert_eq!(manifest.entries.len(), 3);
        assert_eq!(manifest.classes, 2);
        assert_eq!(manifest.entries[0].id, "a");
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.csv");
        write(&m, "id,path,label\na,x.png,1\na,y.png,2\n");
        let err = load_manifest(&m, None).unwrap_err();
        assert!(format!("{err}").contains("duplicate id"), "{err}");
    }

    #[test]
    fn bad_labels_and_headers_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.csv");
        write(&m, "id,path,label\na,x.png,zero\n");
        assert!(load_manifest(&m, None).is_err());
        write(&m, "id,path,label\na,x.png,0\n");
        assert!(load_manifest(&m, None).is_err());
        write(&m, "id,file,label\na,x.png,1\n");
        assert!(load_manifest(&m, None).is_err());
    }

    #[test]
    fn unresolvable_paths_are_rejected_when_root_given() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.csv");
        write(&m, "id,path,label\na,missing.png,1\n");
        let err = load_manifest(&m, Some(dir.path())).unwrap_err();
        assert!(format!("{err}").contains("does not resolve"), "{err}");
        write(&dir.path().join("missing.png"), "not really a png");
        assert!(load_manifest(&m, Some(dir.path())).is_ok());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("out.csv");
        let entries = vec![
            ManifestEntry { id: "a".into(), path: "images/a.png".into(), label: 1 },
            ManifestEntry { id: "b".into(), path: "images/b.png".into(), label: 3 },
        ];
        save_manifest(&m, &entries).unwrap();
        let back = load_manifest(&m, None).unwrap();
        assert_eq!(back.entries, entries);
        assert_eq!(back.classes, 3);
    }

    #[test]
    fn proxy_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("proxies.csv");
        let entries = vec![ProxyEntry {
            id: "a".into(),
            image: "images/a.png".into(),
            mask: "proxies/a.png".into(),
        }];
        save_proxy_manifest(&m, &entries).unwrap();
        assert_eq!(load_proxy_manifest(&m).unwrap(), entries);
    }
}
