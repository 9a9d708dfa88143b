//! Pipeline stages. Every stage freezes the resolved config next to its
//! artifacts, derives its randomness from the top-level seed plus its stage
//! index, and reads its inputs only from files earlier stages wrote, so any
//! stage replays in isolation from its own snapshot.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rand::seq::SliceRandom;
use weakseg_core::dataio::SampleStore;
use weakseg_core::manifold::{train_dcml, train_ml};
use weakseg_core::metrics::{compare_table, evaluate, DiceReport, Mask, Split, Stage};
use weakseg_core::nets::{softmax_ce_logits, Adam, AdamConfig, ClassifierNet, ManifoldNet, UNet};
use weakseg_core::rng::{derive_rng, derive_seed};
use weakseg_core::saliency::{
    gradcam_from_parts, max_normalize, proxy_mask_from_map, upsample_bilinear, ExtractConfig,
    GradcamNormalize, TargetClass,
};
use weakseg_core::segtrain::{predict, train_unet};
use weakseg_core::synthetic::generate_synthetic;
use weakseg_core::tensor::Tensor;

use crate::checkpoint;
use crate::config::{
    manifest_path, require_file, write_snapshot, PipelineConfig, StageName,
};
use crate::imageio::{load_image, load_mask_png, save_image_rgb, save_mask_png, save_saliency_png};
use crate::manifest::{
    load_manifest, load_proxy_manifest, save_manifest, save_proxy_manifest,
    save_prediction_manifest, DatasetManifest, ManifestEntry, ProxyEntry,
};
use crate::overlay::emit_overlays;
use crate::store::{FileSegStore, FileStore};

/// Which proxy masks supervise the U-Net.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProxySource {
    Attention,
    Gradcam,
}

impl ProxySource {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "attention" => Ok(ProxySource::Attention),
            "gradcam" => Ok(ProxySource::Gradcam),
            other => bail!("seg.source must be attention or gradcam, got '{other}'"),
        }
    }

    fn name(self) -> &'static str {
        match self {
            ProxySource::Attention => "attention",
            ProxySource::Gradcam => "gradcam",
        }
    }

    fn proxy_stage(self) -> StageName {
        match self {
            ProxySource::Attention => StageName::ExtractAttention,
            ProxySource::Gradcam => StageName::Gradcam,
        }
    }

    /// Stage directory of the U-Net trained on this source.
    pub fn seg_dir(self, cfg: &PipelineConfig) -> PathBuf {
        match self {
            ProxySource::Attention => cfg.stage_dir(StageName::TrainSeg),
            ProxySource::Gradcam => cfg.output_dir.join("train-seg-gradcam"),
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn synth_gen(cfg: &PipelineConfig) -> Result<()> {
    let t0 = Instant::now();
    let synth = cfg
        .data
        .synthetic
        .ok_or_else(|| anyhow!("synth-gen requires a data.synthetic section"))?;
    let stage_dir = cfg.stage_dir(StageName::SynthGen);
    write_snapshot(cfg, &stage_dir)?;
    let seed = cfg.stage_seed(StageName::SynthGen);
    let root = cfg.data_root().to_path_buf();

    let mut inventory = BTreeMap::new();
    for (split, n, manifest_rel) in [
        ("train", synth.n_per_class, Some(cfg.data.train_manifest.clone())),
        ("val", synth.val_per_class, cfg.data.val_manifest.clone()),
    ] {
        let manifest_rel =
            manifest_rel.ok_or_else(|| anyhow!("config has no {split} manifest"))?;
        let gen = cfg.synthetic_config(n, derive_seed(seed, split, 0));
        gen.validate().map_err(|e| anyhow!("data.synthetic: {e}"))?;
        let samples = generate_synthetic::<f32>(&gen)?;
        let mut entries = Vec::new();
        for s in &samples {
            let id = format!("{split}-{}", s.id);
            let rel = format!("images/{id}.png");
            save_image_rgb(&root.join(&rel), &s.image)?;
            save_mask_png(&root.join(&cfg.data.gt_dir).join(format!("{id}.png")), &s.mask)?;
            entries.push(ManifestEntry { id, path: rel, label: s.label });
        }
        save_manifest(&root.join(&manifest_rel), &entries)?;
        inventory.insert(split.to_string(), entries.len());
        println!(
            "[synth-gen] {split}: {} images x {} classes at {}px -> {}",
            entries.len(),
            synth.classes,
            cfg.data.image_size,
            root.join(&manifest_rel).display()
        );
    }
    write_json(&stage_dir.join("inventory.json"), &inventory)?;
    println!("[synth-gen] done in {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}

fn load_train_manifest(cfg: &PipelineConfig) -> Result<DatasetManifest> {
    let path = manifest_path(cfg, "train")?;
    require_file(&path, "train manifest")?;
    load_manifest(&path, Some(cfg.data_root()))
}

pub fn train_manifold(cfg: &PipelineConfig) -> Result<()> {
    let t0 = Instant::now();
    let stage_dir = cfg.stage_dir(StageName::TrainManifold);
    write_snapshot(cfg, &stage_dir)?;
    let seed = cfg.stage_seed(StageName::TrainManifold);
    let manifest = load_train_manifest(cfg)?;
    let store = FileStore::from_manifest(&manifest, cfg.data_root(), cfg.data.image_size);

    let mut net = ManifoldNet::<f32>::new(
        &cfg.manifold_net_config()?,
        &mut derive_rng(seed, "manifold-init", 0),
    );
    let tcfg = cfg.manifold_train_config(seed);
    let mode = cfg.mode()?;
    println!(
        "[train-manifold] {mode}: {} images, {} epochs ({} fine-tune), K={}, d={}",
        store.len(),
        tcfg.epochs,
        tcfg.finetune_epochs,
        tcfg.k,
        tcfg.embed_dim
    );
    let run = if mode == "ml" {
        train_ml(&store, &mut net, &tcfg)?
    } else {
        train_dcml(&store, &mut net, &tcfg)?
    };
    for r in &run.records {
        println!(
            "[train-manifold] epoch {:>3}/{} [{}] loss={:.4} active={:.2}{}",
            r.epoch,
            tcfg.epochs,
            match r.phase {
                weakseg_core::manifold::Phase::Learner => "learner",
                weakseg_core::manifold::Phase::Full => "full",
            },
            r.mean_loss,
            r.active_pair_fraction,
            if r.recluster { " recluster" } else { "" }
        );
    }
    if !run.fallbacks.is_empty() {
        println!(
            "[train-manifold] note: {} batches fell back to the full dataset",
            run.fallbacks.len()
        );
    }
    checkpoint::save_manifold(&stage_dir.join("manifold.ckpt"), &mut net)?;
    write_json(&stage_dir.join("train-log.json"), &run.records)?;
    for p in &run.partitions {
        write_json(
            &stage_dir.join("partitions").join(format!("partition-{:04}.json", p.epoch)),
            p,
        )?;
    }
    println!(
        "[train-manifold] checkpoint {} written in {:.1}s",
        stage_dir.join("manifold.ckpt").display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Low-resolution attention map plus its full-resolution upsample, from the
/// inference pass only.
fn attention_maps(
    net: &ManifoldNet<f32>,
    image: &Tensor<f32>,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let x = image.clone().reshape(&[1, 3, h, w])?;
    let (_embed, a) = net.forward(&x)?;
    let low = Tensor::from_vec(
        &[a.shape()[2], a.shape()[3]],
        a.data().to_vec(),
    )?;
    let full = upsample_bilinear(&low, h, w)?;
    Ok((low, full))
}

/// Low-resolution GradCAM map (same combination the full-resolution helper
/// in the core applies, kept at feature resolution so the threshold-order
/// ablation can run on it).
fn gradcam_low(
    net: &ClassifierNet<f32>,
    image: &Tensor<f32>,
    label: usize,
    ecfg: &ExtractConfig,
) -> Result<Tensor<f32>> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let x = image.clone().reshape(&[1, 3, h, w])?;
    let (logits, features) = net.forward_with_features(&x)?;
    let class = match ecfg.target_class {
        TargetClass::TrueLabel => {
            if label < 1 || label > net.classes {
                bail!("label {label} outside 1..={}", net.classes);
            }
            label - 1
        }
        TargetClass::Predicted => {
            let row = logits.data();
            (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0)
        }
    };
    let grads = net.feature_grad(&features, class)?;
    let fs = features.shape().to_vec();
    let f3 = features.reshape(&[fs[1], fs[2], fs[3]])?;
    let g3 = grads.reshape(&[fs[1], fs[2], fs[3]])?;
    let mut low = gradcam_from_parts(&f3, &g3)?;
    if ecfg.gradcam_normalize == GradcamNormalize::Max {
        max_normalize(&mut low);
    }
    Ok(low)
}

/// Shared emission path for both saliency methods: 16-bit saliency PNG,
/// binary proxy mask, manifest row and the first few overlay panels.
fn emit_saliency_products(
    cfg: &PipelineConfig,
    stage_dir: &Path,
    manifest: &DatasetManifest,
    stage_label: &str,
    mut low_map_for: impl FnMut(&ManifestEntry, &Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<()> {
    let ecfg = cfg.extract_config()?;
    let size = cfg.data.image_size;
    let mut rows = Vec::new();
    let mut overlays = Vec::new();
    for entry in &manifest.entries {
        let image = load_image(&cfg.data_root().join(&entry.path), size, size)?;
        let low = low_map_for(entry, &image)?;
        let full = upsample_bilinear(&low, size, size)?;
        save_saliency_png(&stage_dir.join("saliency").join(format!("{}.png", entry.id)), &full)
            .with_context(|| format!("saliency for {}", entry.id))?;
        let mask = proxy_mask_from_map(&low, size, size, &ecfg)?;
        save_mask_png(&stage_dir.join("masks").join(format!("{}.png", entry.id)), &mask)?;
        rows.push(ProxyEntry {
            id: entry.id.clone(),
            image: entry.path.clone(),
            mask: format!("masks/{}.png", entry.id),
        });
        if overlays.len() < cfg.extract.overlay_count {
            overlays.push((entry.id.clone(), image, full, mask));
        }
    }
    save_proxy_manifest(&stage_dir.join("proxies.csv"), &rows)?;
    let n_overlays = emit_overlays(&overlays, &stage_dir.join("overlays"))?;
    println!(
        "[{stage_label}] {} saliency maps + masks, {} overlays -> {}",
        rows.len(),
        n_overlays,
        stage_dir.display()
    );
    Ok(())
}

pub fn extract_attention_stage(cfg: &PipelineConfig) -> Result<()> {
    let t0 = Instant::now();
    let stage_dir = cfg.stage_dir(StageName::ExtractAttention);
    write_snapshot(cfg, &stage_dir)?;
    let ckpt = cfg.stage_dir(StageName::TrainManifold).join("manifold.ckpt");
    require_file(&ckpt, "manifold checkpoint")?;
    let net = checkpoint::load_manifold(&ckpt)?;
    let manifest = load_train_manifest(cfg)?;
    emit_saliency_products(cfg, &stage_dir, &manifest, "extract-attention", |_, image| {
        Ok(attention_maps(&net, image)?.0)
    })?;
    println!("[extract-attention] done in {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}

pub fn train_classifier(cfg: &PipelineConfig) -> Result<()> {
    let t0 = Instant::now();
    let stage_dir = cfg.stage_dir(StageName::TrainClassifier);
    write_snapshot(cfg, &stage_dir)?;
    let seed = cfg.stage_seed(StageName::TrainClassifier);
    let manifest = load_train_manifest(cfg)?;
    let store = FileStore::from_manifest(&manifest, cfg.data_root(), cfg.data.image_size);
    let n = store.len();

    let mut net = ClassifierNet::<f32>::new(
        &cfg.classifier_config(manifest.classes)?,
        &mut derive_rng(seed, "cls-init", 0),
    );
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.classifier.lr));
    let mut rng = derive_rng(seed, "cls-batch", 0);
    let mut order: Vec<usize> = (0..n).collect();
    let size = cfg.data.image_size;
    println!(
        "[train-classifier] {} images, {} classes, {} epochs",
        n, manifest.classes, cfg.classifier.epochs
    );

    #[derive(serde::Serialize)]
    struct ClsEpochRecord {
        epoch: usize,
        mean_loss: f64,
        accuracy: f64,
    }
    let mut records = Vec::new();
    for epoch in 1..=cfg.classifier.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches, mut correct) = (0.0f64, 0usize, 0usize);
        for chunk in order.chunks(cfg.classifier.batch_size) {
            let mut x = Tensor::<f32>::zeros(&[chunk.len(), 3, size, size]);
            let mut targets = Vec::with_capacity(chunk.len());
            let plane = 3 * size * size;
            for (bi, &i) in chunk.iter().enumerate() {
                let img = store.image(i)?;
                x.data_mut()[bi * plane..(bi + 1) * plane].copy_from_slice(img.data());
                targets.push(store.label(i) - 1);
            }
            let (logits, cache) = net.forward_train(&x)?;
            let (loss, d_logits) = softmax_ce_logits(&logits, &targets)?;
            if !loss.is_finite() {
                bail!("training diverged: non-finite classifier loss at epoch {epoch}");
            }
            net.zero_grad();
            net.backward(&d_logits, &cache)?;
            opt.step(|f| net.visit_params("", f));
            loss_sum += loss as f64;
            batches += 1;
            let c = logits.shape()[1];
            for (bi, &t) in targets.iter().enumerate() {
                let row = &logits.data()[bi * c..(bi + 1) * c];
                let best = (0..c).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                if best == t {
                    correct += 1;
                }
            }
        }
        let rec = ClsEpochRecord {
            epoch,
            mean_loss: loss_sum / batches.max(1) as f64,
            accuracy: correct as f64 / n as f64,
        };
        println!(
            "[train-classifier] epoch {:>3}/{} loss={:.4} acc={:.2}",
            epoch, cfg.classifier.epochs, rec.mean_loss, rec.accuracy
        );
        records.push(rec);
    }
    checkpoint::save_classifier(&stage_dir.join("classifier.ckpt"), &mut net)?;
    write_json(&stage_dir.join("train-log.json"), &records)?;
    println!(
        "[train-classifier] checkpoint {} written in {:.1}s",
        stage_dir.join("classifier.ckpt").display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn gradcam_stage(cfg: &PipelineConfig) -> Result<()> {
    let t0 = Instant::now();
    let stage_dir = cfg.stage_dir(StageName::Gradcam);
    write_snapshot(cfg, &stage_dir)?;
    let ckpt = cfg.stage_dir(StageName::TrainClassifier).join("classifier.ckpt");
    require_file(&ckpt, "classifier checkpoint")?;
    let net = checkpoint::load_classifier(&ckpt)?;
    let ecfg = cfg.extract_config()?;
    let manifest = load_train_manifest(cfg)?;
    emit_saliency_products(cfg, &stage_dir, &manifest, "gradcam", |entry, image| {
        gradcam_low(&net, image, entry.label, &ecfg)
    })?;
    println!("[gradcam] done in {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}

pub fn train_seg(cfg: &PipelineConfig) -> Result<()> {
    let t0 = Instant::now();
    let source = ProxySource::from_name(&cfg.seg.source)?;
    let stage_dir = source.seg_dir(cfg);
    write_snapshot(cfg, &stage_dir)?;
    let seed = cfg.stage_seed(StageName::TrainSeg);
    let proxy_dir = cfg.stage_dir(source.proxy_stage());
    let proxy_manifest = proxy_dir.join("proxies.csv");
    require_file(&proxy_manifest, &format!("proxy manifest from {}", source.proxy_stage().dir_name()))?;
    let entries = load_proxy_manifest(&proxy_manifest)?;
    let store = FileSegStore::new(&entries, cfg.data_root(), &proxy_dir, cfg.data.image_size)?;

    let mut net = UNet::<f32>::new(
        cfg.unet_config(),
        &mut derive_rng(seed, "unet-init", source as u64),
    );
    let scfg = cfg.seg_train_config(derive_seed(seed, source.name(), 0));
    println!(
        "[train-seg] {} proxy pairs from {}, {} epochs, batch {}",
        entries.len(),
        source.name(),
        scfg.epochs,
        scfg.batch_size
    );
    let run = train_unet(&mut net, &store, &scfg).map_err(|e| anyhow!("{e}"))?;
    for r in &run.records {
        println!(
            "[train-seg] epoch {:>3}/{} loss={:.4}",
            r.epoch, scfg.epochs, r.mean_loss
        );
    }
    if run.loss_increased {
        println!("[train-seg] warning: final loss exceeds the first epoch's loss");
    }
    checkpoint::save_unet(&stage_dir.join("unet.ckpt"), &mut net)?;
    write_json(&stage_dir.join("train-log.json"), &run.records)?;
    println!(
        "[train-seg] checkpoint {} written in {:.1}s",
        stage_dir.join("unet.ckpt").display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn manifest_for_split(cfg: &PipelineConfig, split: Split) -> Result<DatasetManifest> {
    let which = match split {
        Split::Synthetic => "train",
        Split::Val => "val",
        Split::Test => "test",
    };
    let path = manifest_path(cfg, which)?;
    require_file(&path, &format!("{which} manifest"))?;
    load_manifest(&path, Some(cfg.data_root()))
}

fn load_ground_truth(cfg: &PipelineConfig, manifest: &DatasetManifest) -> Result<BTreeMap<String, Mask>> {
    let gt_root = cfg.data_root().join(&cfg.data.gt_dir);
    let mut gt = BTreeMap::new();
    for e in &manifest.entries {
        let p = gt_root.join(format!("{}.png", e.id));
        require_file(&p, "ground-truth mask")?;
        gt.insert(e.id.clone(), load_mask_png(&p)?);
    }
    Ok(gt)
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Val => "val",
        Split::Test => "test",
        Split::Synthetic => "synthetic",
    }
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::InitMaps => "init_maps",
        Stage::Unet => "unet",
    }
}

fn save_report(dir: &Path, report: &DiceReport) -> Result<()> {
    let name = format!(
        "dice-{}-{}-{}.json",
        report.method,
        stage_name(report.stage),
        split_name(report.split)
    );
    write_json(&dir.join(name), report)?;
    println!(
        "[evaluate] {:<18} {:<9} {:<9} mean dice {:.4} over {} images",
        report.method,
        stage_name(report.stage),
        split_name(report.split),
        report.mean,
        report.per_image.len()
    );
    Ok(())
}

/// Score every method whose checkpoint exists on the requested split:
/// thresholded saliency ("init maps") straight from the checkpoints, and
/// U-Net predictions where a trained U-Net is available.
pub fn evaluate_stage(cfg: &PipelineConfig, split: Split) -> Result<()> {
    let t0 = Instant::now();
    let stage_dir = cfg.stage_dir(StageName::Evaluate);
    write_snapshot(cfg, &stage_dir)?;
    let manifest = manifest_for_split(cfg, split)?;
    let gt = load_ground_truth(cfg, &manifest)?;
    let ecfg = cfg.extract_config()?;
    let size = cfg.data.image_size;
    let mut produced = 0usize;

    let image_of = |e: &ManifestEntry| load_image(&cfg.data_root().join(&e.path), size, size);

    let manifold_ckpt = cfg.stage_dir(StageName::TrainManifold).join("manifold.ckpt");
    if manifold_ckpt.is_file() {
        let net = checkpoint::load_manifold(&manifold_ckpt)?;
        let mut preds = BTreeMap::new();
        for e in &manifest.entries {
            let image = image_of(e)?;
            let (low, _) = attention_maps(&net, &image)?;
            preds.insert(e.id.clone(), proxy_mask_from_map(&low, size, size, &ecfg)?);
        }
        let report = evaluate(&preds, &gt, &cfg.attention_method()?, split, Stage::InitMaps)?;
        save_report(&stage_dir, &report)?;
        produced += 1;
    }

    let classifier_ckpt = cfg.stage_dir(StageName::TrainClassifier).join("classifier.ckpt");
    if classifier_ckpt.is_file() {
        let net = checkpoint::load_classifier(&classifier_ckpt)?;
        let mut preds = BTreeMap::new();
        for e in &manifest.entries {
            let image = image_of(e)?;
            let low = gradcam_low(&net, &image, e.label, &ecfg)?;
            preds.insert(e.id.clone(), proxy_mask_from_map(&low, size, size, &ecfg)?);
        }
        let report = evaluate(&preds, &gt, "gradcam", split, Stage::InitMaps)?;
        save_report(&stage_dir, &report)?;
        produced += 1;
    }

    for (source, method) in [
        (ProxySource::Attention, cfg.attention_method()?),
        (ProxySource::Gradcam, String::from("gradcam")),
    ] {
        let ckpt = source.seg_dir(cfg).join("unet.ckpt");
        if !ckpt.is_file() {
            continue;
        }
        let net = checkpoint::load_unet(&ckpt)?;
        let mut preds = BTreeMap::new();
        let mut rows = Vec::new();
        for e in &manifest.entries {
            let p = predict(&net, &e.id, &image_of(e)?)?;
            let rel = format!("unet-masks-{}-{}/{}.png", source.name(), split_name(split), e.id);
            save_mask_png(&stage_dir.join(&rel), &p.mask)?;
            rows.push((e.id.clone(), rel));
            preds.insert(e.id.clone(), p.mask);
        }
        save_prediction_manifest(
            &stage_dir.join(format!("predictions-{}-{}.csv", source.name(), split_name(split))),
            &rows,
        )?;
        let report = evaluate(&preds, &gt, &method, split, Stage::Unet)?;
        save_report(&stage_dir, &report)?;
        produced += 1;
    }

    if produced == 0 {
        bail!(
            "missing checkpoint: nothing to evaluate under {} (run train-manifold, train-classifier or train-seg first)",
            cfg.output_dir.display()
        );
    }
    println!("[evaluate] {produced} reports in {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}

pub fn report_stage(cfg: &PipelineConfig) -> Result<()> {
    let stage_dir = cfg.stage_dir(StageName::Report);
    write_snapshot(cfg, &stage_dir)?;
    let eval_dir = cfg.stage_dir(StageName::Evaluate);
    if !eval_dir.is_dir() {
        bail!("missing Dice reports under {} (run evaluate first)", eval_dir.display());
    }
    let mut names: Vec<PathBuf> = fs::read_dir(&eval_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("dice-") && n.ends_with(".json"))
        })
        .collect();
    names.sort();
    let mut by_split: BTreeMap<&'static str, Vec<DiceReport>> = BTreeMap::new();
    for p in &names {
        let report: DiceReport = serde_json::from_str(&fs::read_to_string(p)?)
            .with_context(|| format!("bad report {}", p.display()))?;
        by_split.entry(split_name(report.split)).or_default().push(report);
    }
    if by_split.is_empty() {
        bail!("no dice-*.json reports in {} (run evaluate first)", eval_dir.display());
    }

    let mut md = String::from("# Results\n\nMean Dice in percent per method and stage.\n");
    for (split, reports) in &by_split {
        let (text, csv) = compare_table(reports).map_err(|e| anyhow!("{e}"))?;
        fs::write(stage_dir.join(format!("table-{split}.txt")), &text)?;
        fs::write(stage_dir.join(format!("table-{split}.csv")), &csv)?;
        println!("[report] split {split}:\n{text}");
        md.push_str(&format!("\n## {split} split\n\n```\n{text}```\n"));
    }
    md.push_str(
        "\nNotes:\n\
         - init maps = thresholded saliency evaluated directly; unet = the segmentation\n\
         \x20\x20network trained on the proxy masks.\n\
         - gradcam maps have no canonical binarization; they are max-normalized and then\n\
         \x20\x20thresholded with the same T as the attention maps, so the comparison is\n\
         \x20\x20like-for-like.\n",
    );
    fs::write(stage_dir.join("report.md"), md)?;
    println!("[report] wrote {}", stage_dir.join("report.md").display());
    Ok(())
}

/// All weak-supervision stages in order, then evaluation and the report.
pub fn pipeline(cfg: &PipelineConfig) -> Result<()> {
    let t0 = Instant::now();
    if cfg.data.synthetic.is_some() {
        synth_gen(cfg)?;
    }
    train_manifold(cfg)?;
    extract_attention_stage(cfg)?;
    train_classifier(cfg)?;
    gradcam_stage(cfg)?;
    train_seg(cfg)?;
    evaluate_stage(cfg, Split::Synthetic)?;
    if cfg.data.val_manifest.is_some() {
        evaluate_stage(cfg, Split::Val)?;
    }
    report_stage(cfg)?;
    println!("[pipeline] complete in {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
