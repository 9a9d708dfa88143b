//! Pipeline configuration: one declarative tree (TOML or JSON on disk),
//! two built-in presets, and dotted-path `--set key=value` overrides.
//! Every stage freezes the fully resolved tree next to its artifacts, and
//! a frozen snapshot is itself a valid `--config` argument.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use weakseg_core::manifold::{ManifoldTrainConfig, MarginConfig, PairStrategy};
use weakseg_core::nets::backbone::BackbonePreset;
use weakseg_core::nets::{ClassifierConfig, ManifoldNetConfig, UNetConfig};
use weakseg_core::saliency::{ExtractConfig, GradcamNormalize, TargetClass};
use weakseg_core::segtrain::SegTrainConfig;
use weakseg_core::synthetic::SyntheticConfig;

/// Default data root when the config leaves `data.root` unset.
pub const ENV_DATA_ROOT: &str = "WEAKSEG_DATA_ROOT";

pub const PRESETS: [&str; 2] = ["paper", "synthetic"];

/// Pipeline stages in execution order. The variant index fans the top-level
/// seed out into independent per-stage seeds, so stages re-run in isolation
/// draw the same randomness they drew inside a full `pipeline` run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageName {
    SynthGen,
    TrainManifold,
    ExtractAttention,
    TrainClassifier,
    Gradcam,
    TrainSeg,
    Evaluate,
    Report,
}

impl StageName {
    pub fn dir_name(self) -> &'static str {
        match self {
            StageName::SynthGen => "synth-gen",
            StageName::TrainManifold => "train-manifold",
            StageName::ExtractAttention => "extract-attention",
            StageName::TrainClassifier => "train-classifier",
            StageName::Gradcam => "gradcam",
            StageName::TrainSeg => "train-seg",
            StageName::Evaluate => "evaluate",
            StageName::Report => "report",
        }
    }

    pub fn index(self) -> u64 {
        match self {
            StageName::SynthGen => 0,
            StageName::TrainManifold => 1,
            StageName::ExtractAttention => 2,
            StageName::TrainClassifier => 3,
            StageName::Gradcam => 4,
            StageName::TrainSeg => 5,
            StageName::Evaluate => 6,
            StageName::Report => 7,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub nets: NetsSection,
    pub manifold: ManifoldSection,
    pub classifier: ClassifierSection,
    pub extract: ExtractSection,
    pub seg: SegSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/weakseg"),
            data: DataSection::default(),
            nets: NetsSection::default(),
            manifold: ManifoldSection::default(),
            classifier: ClassifierSection::default(),
            extract: ExtractSection::default(),
            seg: SegSection::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Defaults to $WEAKSEG_DATA_ROOT, then `<output_dir>/data`.
    pub root: Option<PathBuf>,
    pub train_manifest: String,
    pub val_manifest: Option<String>,
    pub test_manifest: Option<String>,
    /// Ground-truth mask directory (evaluation only), relative to the root.
    pub gt_dir: String,
    /// Working resolution; images are bilinearly resized on load.
    pub image_size: usize,
    /// When present, `synth-gen` materializes the dataset under the root.
    pub synthetic: Option<SynthSection>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            root: None,
            train_manifest: String::from("train.csv"),
            val_manifest: Some(String::from("val.csv")),
            test_manifest: None,
            gt_dir: String::from("gt"),
            image_size: 64,
            synthetic: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub classes: usize,
    pub n_per_class: usize,
    pub val_per_class: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            classes: 4,
            n_per_class: 50,
            val_per_class: 12,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetsSection {
    pub backbone: String,
    pub embed_dim: usize,
    pub attention_zero_init: bool,
    pub unet_depth: usize,
    pub unet_filters: usize,
}

impl Default for NetsSection {
    fn default() -> Self {
        NetsSection {
            backbone: String::from("tiny"),
            embed_dim: 32,
            attention_zero_init: true,
            unet_depth: 3,
            unet_filters: 8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManifoldSection {
    /// `ml` (plain metric learning, K forced to 1) or `dcml`.
    pub mode: String,
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub per_class: usize,
    pub lr: f64,
    pub k: usize,
    pub recluster_every: usize,
    pub alpha: f64,
    pub beta: f64,
    pub pair_strategy: String,
}

impl Default for ManifoldSection {
    fn default() -> Self {
        ManifoldSection {
            mode: String::from("dcml"),
            epochs: 24,
            finetune_epochs: 4,
            batch_size: 16,
            per_class: 4,
            lr: 1e-3,
            k: 2,
            recluster_every: 10,
            alpha: 0.2,
            beta: 1.2,
            pair_strategy: String::from("all_pairs"),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        ClassifierSection {
            epochs: 12,
            batch_size: 16,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractSection {
    pub t: f64,
    /// `max` or `none`.
    pub gradcam_normalize: String,
    /// `true_label` or `predicted`.
    pub target_class: String,
    pub threshold_before_upsample: bool,
    /// How many overlay panels each saliency stage writes.
    pub overlay_count: usize,
}

impl Default for ExtractSection {
    fn default() -> Self {
        ExtractSection {
            t: 0.5,
            gradcam_normalize: String::from("max"),
            target_class: String::from("true_label"),
            threshold_before_upsample: false,
            overlay_count: 8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Which proxy masks supervise the U-Net: `attention` or `gradcam`.
    pub source: String,
}

impl Default for SegSection {
    fn default() -> Self {
        SegSection {
            epochs: 24,
            batch_size: 8,
            lr: 3e-3,
            source: String::from("attention"),
        }
    }
}

impl PipelineConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "synthetic" => {
                let mut cfg = PipelineConfig {
                    output_dir: PathBuf::from("runs/synthetic"),
                    ..PipelineConfig::default()
                };
                cfg.data.synthetic = Some(SynthSection::default());
                Ok(cfg)
            }
            "paper" => Ok(PipelineConfig {
                seed: 0,
                output_dir: PathBuf::from("runs/paper"),
                data: DataSection {
                    root: None,
                    train_manifest: String::from("train.csv"),
                    val_manifest: Some(String::from("val.csv")),
                    test_manifest: Some(String::from("test.csv")),
                    gt_dir: String::from("gt"),
                    image_size: 224,
                    synthetic: None,
                },
                nets: NetsSection {
                    backbone: String::from("paper_resnet50_3blocks"),
                    embed_dim: 128,
                    attention_zero_init: true,
                    unet_depth: 4,
                    unet_filters: 32,
                },
                manifold: ManifoldSection {
                    mode: String::from("dcml"),
                    epochs: 300,
                    finetune_epochs: 50,
                    batch_size: 32,
                    per_class: 8,
                    lr: 1e-4,
                    k: 4,
                    recluster_every: 10,
                    alpha: 0.2,
                    beta: 1.2,
                    pair_strategy: String::from("all_pairs"),
                },
                classifier: ClassifierSection {
                    epochs: 30,
                    batch_size: 32,
                    lr: 1e-4,
                },
                extract: ExtractSection::default(),
                seg: SegSection {
                    epochs: 100,
                    batch_size: 16,
                    lr: 1e-4,
                    source: String::from("attention"),
                },
            }),
            other => bail!("unknown preset '{other}' (expected one of {PRESETS:?})"),
        }
    }

    /// Pin relative paths to the working directory and apply the data-root
    /// fallback chain so the frozen snapshot replays without ambient state.
    pub fn resolve(&mut self) -> Result<()> {
        if self.output_dir.as_os_str().is_empty() {
            bail!("output_dir must not be empty");
        }
        self.output_dir = absolute(&self.output_dir)?;
        let root = match &self.data.root {
            Some(r) => absolute(r)?,
            None => match env::var_os(ENV_DATA_ROOT) {
                Some(v) if !v.is_empty() => absolute(Path::new(&v))?,
                _ => self.output_dir.join("data"),
            },
        };
        self.data.root = Some(root);
        if self.mode()? == "ml" {
            self.manifold.k = 1;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone_preset()?;
        self.mode()?;
        self.manifold_train_config(0)
            .validate()
            .map_err(|e| anyhow!("manifold: {e}"))?;
        self.extract_config()?;
        self.seg_train_config(0)
            .validate()
            .map_err(|e| anyhow!("seg: {e}"))?;
        if !matches!(self.seg.source.as_str(), "attention" | "gradcam") {
            bail!("seg.source must be attention or gradcam, got '{}'", self.seg.source);
        }
        if self.classifier.epochs == 0 || self.classifier.batch_size == 0 {
            bail!("classifier: epochs and batch_size must be positive");
        }
        if !(self.classifier.lr.is_finite() && self.classifier.lr > 0.0) {
            bail!("classifier: lr must be positive and finite");
        }
        if self.extract.overlay_count == 0 {
            bail!("extract: overlay_count must be positive");
        }
        let stride = self.backbone_preset()?.stride();
        if self.data.image_size % stride != 0 {
            bail!(
                "data.image_size {} must be divisible by the backbone stride {stride}",
                self.data.image_size
            );
        }
        if !(1..=10).contains(&self.nets.unet_depth) {
            bail!("nets.unet_depth must be in 1..=10, got {}", self.nets.unet_depth);
        }
        let pool = 1usize << self.nets.unet_depth;
        if self.data.image_size % pool != 0 {
            bail!(
                "data.image_size {} must be divisible by 2^unet_depth = {pool}",
                self.data.image_size
            );
        }
        if let Some(s) = &self.data.synthetic {
            self.synthetic_config(s.n_per_class, 0)
                .validate()
                .map_err(|e| anyhow!("data.synthetic: {e}"))?;
            if s.val_per_class == 0 {
                bail!("data.synthetic: val_per_class must be positive");
            }
            if self.data.val_manifest.is_none() {
                bail!("data.synthetic requires data.val_manifest");
            }
        } else if self.data.image_size < 32 {
            bail!("data: image_size must be at least 32");
        }
        Ok(())
    }

    pub fn mode(&self) -> Result<&str> {
        match self.manifold.mode.as_str() {
            m @ ("ml" | "dcml") => Ok(m),
            other => bail!("manifold.mode must be ml or dcml, got '{other}'"),
        }
    }

    /// Table row label for the attention method, e.g. `dcml+attention`.
    pub fn attention_method(&self) -> Result<String> {
        Ok(format!("{}+attention", self.mode()?))
    }

    pub fn data_root(&self) -> &Path {
        self.data
            .root
            .as_deref()
            .expect("config must be resolved before use")
    }

    pub fn stage_dir(&self, stage: StageName) -> PathBuf {
        self.output_dir.join(stage.dir_name())
    }

    pub fn stage_seed(&self, stage: StageName) -> u64 {
        self.seed + stage.index()
    }

    pub fn backbone_preset(&self) -> Result<BackbonePreset> {
        BackbonePreset::from_name(&self.nets.backbone).map_err(|e| anyhow!("nets: {e}"))
    }

    pub fn manifold_net_config(&self) -> Result<ManifoldNetConfig> {
        Ok(ManifoldNetConfig {
            preset: self.backbone_preset()?,
            embed_dim: self.nets.embed_dim,
            attention_zero_init: self.nets.attention_zero_init,
        })
    }

    pub fn manifold_train_config(&self, seed: u64) -> ManifoldTrainConfig {
        ManifoldTrainConfig {
            epochs: self.manifold.epochs,
            finetune_epochs: self.manifold.finetune_epochs,
            embed_dim: self.nets.embed_dim,
            batch_size: self.manifold.batch_size,
            per_class: self.manifold.per_class,
            lr: self.manifold.lr,
            k: self.manifold.k,
            recluster_every: self.manifold.recluster_every,
            seed,
            margin: MarginConfig {
                alpha: self.manifold.alpha,
                beta: self.manifold.beta,
                pair_strategy: match self.manifold.pair_strategy.as_str() {
                    // parsed leniently here; validate() reports bad names
                    "distance_weighted_negatives" => PairStrategy::DistanceWeightedNegatives,
                    _ => PairStrategy::AllPairs,
                },
            },
        }
    }

    pub fn extract_config(&self) -> Result<ExtractConfig> {
        let gradcam_normalize = match self.extract.gradcam_normalize.as_str() {
            "max" => GradcamNormalize::Max,
            "none" => GradcamNormalize::None,
            other => bail!("extract.gradcam_normalize must be max or none, got '{other}'"),
        };
        let target_class = match self.extract.target_class.as_str() {
            "true_label" => TargetClass::TrueLabel,
            "predicted" => TargetClass::Predicted,
            other => bail!("extract.target_class must be true_label or predicted, got '{other}'"),
        };
        let cfg = ExtractConfig {
            t: self.extract.t,
            gradcam_normalize,
            target_class,
            threshold_before_upsample: self.extract.threshold_before_upsample,
        };
        cfg.validate().map_err(|e| anyhow!("extract: {e}"))?;
        Ok(cfg)
    }

    pub fn classifier_config(&self, classes: usize) -> Result<ClassifierConfig> {
        Ok(ClassifierConfig {
            preset: self.backbone_preset()?,
            classes,
        })
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            in_channels: 3,
            classes: 2,
            depth: self.nets.unet_depth,
            init_filters: self.nets.unet_filters,
        }
    }

    pub fn seg_train_config(&self, seed: u64) -> SegTrainConfig {
        SegTrainConfig {
            epochs: self.seg.epochs,
            batch_size: self.seg.batch_size,
            lr: self.seg.lr,
            seed,
        }
    }

    pub fn synthetic_config(&self, n_per_class: usize, seed: u64) -> SyntheticConfig {
        let s = self.data.synthetic.as_ref().expect("synthetic section");
        SyntheticConfig {
            n_per_class,
            classes: s.classes,
            image_size: self.data.image_size,
            seed,
        }
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(std::path::absolute(p)
        .with_context(|| format!("cannot absolutize {}", p.display()))?)
}

/// Load a preset name or a TOML/JSON file, apply `--set` overrides, resolve
/// paths and validate. Frozen `resolved-config.json` snapshots load through
/// the same door.
pub fn load_config(spec: &str, sets: &[String]) -> Result<PipelineConfig> {
    let mut tree = if PRESETS.contains(&spec) {
        serde_json::to_value(PipelineConfig::preset(spec)?)?
    } else {
        let path = Path::new(spec);
        let text = fs::read_to_string(path).with_context(|| {
            format!("config '{spec}' is neither a preset ({PRESETS:?}) nor a readable file")
        })?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)
                .with_context(|| format!("invalid JSON in {spec}"))?
        } else {
            let t: toml::Value = toml::from_str(&text)
                .with_context(|| format!("invalid TOML in {spec}"))?;
            serde_json::to_value(t)?
        }
    };
    for s in sets {
        apply_set(&mut tree, s)?;
    }
    let mut cfg: PipelineConfig =
        serde_json::from_value(tree).map_err(|e| anyhow!("invalid config: {e}"))?;
    cfg.resolve()?;
    cfg.validate()?;
    Ok(cfg)
}

/// Apply one `dotted.path=value` override onto the raw tree. Values parse as
/// bool, then integer, then float, falling back to a plain string.
pub fn apply_set(tree: &mut serde_json::Value, setting: &str) -> Result<()> {
    let (path, raw) = setting
        .split_once('=')
        .ok_or_else(|| anyhow!("--set expects key=value, got '{setting}'"))?;
    if path.is_empty() {
        bail!("--set expects a non-empty key in '{setting}'");
    }
    let mut node = tree;
    let parts: Vec<&str> = path.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            bail!("--set path '{path}' crosses non-table key '{part}'");
        }
        node = node
            .as_object_mut()
            .unwrap()
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
        if node.is_null() {
            *node = serde_json::Value::Object(Default::default());
        }
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| anyhow!("--set path '{path}' does not land in a table"))?;
    obj.insert(parts[parts.len() - 1].to_string(), parse_scalar(raw));
    Ok(())
}

fn parse_scalar(raw: &str) -> serde_json::Value {
    if raw == "true" {
        return serde_json::Value::Bool(true);
    }
    if raw == "false" {
        return serde_json::Value::Bool(false);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return serde_json::Value::Number(i.into());
    }
    if let Ok(f) = raw.parse::<f64>() {
        if let Some(n) = serde_json::Number::from_f64(f) {
            return serde_json::Value::Number(n);
        }
    }
    serde_json::Value::String(raw.to_string())
}

/// Freeze the resolved config next to a stage's artifacts.
pub fn write_snapshot(cfg: &PipelineConfig, stage_dir: &Path) -> Result<()> {
    fs::create_dir_all(stage_dir)?;
    let mut text = serde_json::to_string_pretty(cfg)?;
    text.push('\n');
    fs::write(stage_dir.join("resolved-config.json"), text)?;
    Ok(())
}

/// Stage-scoped manifest loading with the shared "which file" policy.
pub fn manifest_path(cfg: &PipelineConfig, which: &str) -> Result<PathBuf> {
    let rel = match which {
        "train" => Some(cfg.data.train_manifest.clone()),
        "val" => cfg.data.val_manifest.clone(),
        "test" => cfg.data.test_manifest.clone(),
        other => bail!("unknown manifest selector '{other}'"),
    };
    let rel = rel.ok_or_else(|| anyhow!("config has no {which} manifest"))?;
    Ok(cfg.data_root().join(rel))
}

/// Quick existence probe used for "missing checkpoint" style messages.
pub fn require_file(path: &Path, hint: &str) -> Result<()> {
    if !path.is_file() {
        bail!("missing {hint}: {} (run the producing stage first)", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve_and_validate() {
        for name in PRESETS {
            let mut cfg = PipelineConfig::preset(name).unwrap();
            cfg.resolve().unwrap();
            cfg.validate().unwrap();
            assert!(cfg.output_dir.is_absolute());
            assert!(cfg.data_root().is_absolute());
        }
    }

    #[test]
    fn paper_preset_pins_reference_values() {
        let cfg = PipelineConfig::preset("paper").unwrap();
        assert_eq!(cfg.nets.embed_dim, 128);
        assert_eq!(cfg.manifold.alpha, 0.2);
        assert_eq!(cfg.manifold.beta, 1.2);
        assert_eq!(cfg.manifold.batch_size, 32);
        assert_eq!(cfg.manifold.per_class, 8);
        assert_eq!(cfg.manifold.epochs, 300);
        assert_eq!(cfg.manifold.finetune_epochs, 50);
        assert_eq!(cfg.extract.t, 0.5);
        assert_eq!(cfg.nets.unet_filters, 32);
        assert_eq!(cfg.seg.batch_size, 16);
        assert_eq!(cfg.data.image_size, 224);
    }

    #[test]
    fn unknown_keys_are_named_in_the_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "seed = 1\nbogus_key = 2\n").unwrap();
        let err = load_config(p.to_str().unwrap(), &[]).unwrap_err();
        assert!(format!("{err:#}").contains("bogus_key"), "{err:#}");
    }

    #[test]
    fn set_overrides_reach_nested_fields() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = load_config(
            "synthetic",
            &[
                "seed=9".into(),
                "manifold.lr=0.005".into(),
                "manifold.mode=ml".into(),
                "extract.threshold_before_upsample=true".into(),
                "data.synthetic.classes=3".into(),
                format!("data.root={}", dir.path().display()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.manifold.lr, 0.005);
        assert_eq!(cfg.manifold.mode, "ml");
        assert_eq!(cfg.manifold.k, 1, "ml mode pins K to 1");
        assert!(cfg.extract.threshold_before_upsample);
        assert_eq!(cfg.data.synthetic.unwrap().classes, 3);
        assert_eq!(cfg.data_root(), dir.path());
    }

    #[test]
    fn config_root_beats_environment() {
        // the one test that touches the process environment; everything else
        // passes data.root explicitly so parallel runs cannot interfere
        let dir = tempfile::tempdir().unwrap();
        std::env::set_var(ENV_DATA_ROOT, "/nonexistent-env-root");
        let env_cfg = load_config("synthetic", &[]).unwrap();
        let cfg = load_config(
            "synthetic",
            &[format!("data.root={}", dir.path().display())],
        )
        .unwrap();
        std::env::remove_var(ENV_DATA_ROOT);
        assert_eq!(env_cfg.data_root(), Path::new("/nonexistent-env-root"));
        assert_eq!(cfg.data_root(), dir.path());
    }

    #[test]
    fn snapshot_json_reloads_identically() {
        let mut cfg = PipelineConfig::preset("synthetic").unwrap();
        cfg.resolve().unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_snapshot(&cfg, dir.path()).unwrap();
        let snap = dir.path().join("resolved-config.json");
        let back = load_config(snap.to_str().unwrap(), &[]).unwrap();
        assert_eq!(
            serde_json::to_string(&back).unwrap(),
            serde_json::to_string(&cfg).unwrap()
        );
    }

    #[test]
    fn bad_values_fail_validation() {
        assert!(load_config("synthetic", &["extract.t=1.5".into()]).is_err());
        assert!(load_config("synthetic", &["manifold.mode=magic".into()]).is_err());
        assert!(load_config("synthetic", &["manifold.k=5".into()]).is_err());
        assert!(load_config("synthetic", &["data.synthetic.classes=9".into()]).is_err());
        assert!(load_config("nonexistent.toml", &[]).is_err());
    }

    #[test]
    fn stage_seeds_are_distinct_and_offset_by_index() {
        let cfg = PipelineConfig { seed: 100, ..PipelineConfig::default() };
        assert_eq!(cfg.stage_seed(StageName::SynthGen), 100);
        assert_eq!(cfg.stage_seed(StageName::TrainManifold), 101);
        assert_eq!(cfg.stage_seed(StageName::Report), 107);
    }
}
