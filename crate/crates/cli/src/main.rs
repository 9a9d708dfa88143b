use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use weakseg_core::metrics::Split;

use weakseg_cli::config::{load_config, PipelineConfig};
use weakseg_cli::stages;

#[derive(Parser)]
#[command(
    name = "weakseg",
    version,
    about = "Weakly supervised segmentation from image-level labels: \
             metric-learned attention maps as proxy pixel labels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Preset name (paper, synthetic) or a TOML/JSON config file; frozen
    /// resolved-config.json snapshots load here too
    #[arg(long, default_value = "synthetic")]
    config: String,
    /// Dotted-path override, e.g. --set manifold.lr=0.0005 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset under the data root
    SynthGen(CommonArgs),
    /// Train the embedding + attention network from image-level labels
    TrainManifold {
        #[command(flatten)]
        common: CommonArgs,
        /// Shorthand for --set manifold.mode=<MODE> (ml or dcml)
        #[arg(long)]
        mode: Option<String>,
    },
    /// Emit attention saliency maps and proxy masks for the training set
    ExtractAttention(CommonArgs),
    /// Train the image-level classifier used by the gradcam baseline
    TrainClassifier(CommonArgs),
    /// Emit gradcam saliency maps and proxy masks for the training set
    Gradcam(CommonArgs),
    /// Train the U-Net on proxy masks
    TrainSeg {
        #[command(flatten)]
        common: CommonArgs,
        /// Shorthand for --set seg.source=<SOURCE> (attention or gradcam)
        #[arg(long)]
        source: Option<String>,
    },
    /// Score every available method against ground-truth masks
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// val, test or synthetic; defaults to synthetic when the config
        /// generates data, val otherwise
        #[arg(long)]
        split: Option<String>,
    },
    /// Tabulate the Dice reports written by evaluate
    Report(CommonArgs),
    /// Run every stage in order
    Pipeline(CommonArgs),
}

enum AppError {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

fn load(common: &CommonArgs, extra: &[String]) -> Result<PipelineConfig, AppError> {
    let mut sets = common.set.clone();
    sets.extend_from_slice(extra);
    load_config(&common.config, &sets).map_err(AppError::Validation)
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::SynthGen(common) => {
            let cfg = load(&common, &[])?;
            stages::synth_gen(&cfg).map_err(AppError::Runtime)
        }
        Command::TrainManifold { common, mode } => {
            let extra: Vec<String> =
                mode.into_iter().map(|m| format!("manifold.mode={m}")).collect();
            let cfg = load(&common, &extra)?;
            stages::train_manifold(&cfg).map_err(AppError::Runtime)
        }
        Command::ExtractAttention(common) => {
            let cfg = load(&common, &[])?;
            stages::extract_attention_stage(&cfg).map_err(AppError::Runtime)
        }
        Command::TrainClassifier(common) => {
            let cfg = load(&common, &[])?;
            stages::train_classifier(&cfg).map_err(AppError::Runtime)
        }
        Command::Gradcam(common) => {
            let cfg = load(&common, &[])?;
            stages::gradcam_stage(&cfg).map_err(AppError::Runtime)
        }
        Command::TrainSeg { common, source } => {
            let extra: Vec<String> =
                source.into_iter().map(|s| format!("seg.source={s}")).collect();
            let cfg = load(&common, &extra)?;
            stages::train_seg(&cfg).map_err(AppError::Runtime)
        }
        Command::Evaluate { common, split } => {
            let cfg = load(&common, &[])?;
            let split = match split {
                Some(name) => Split::from_name(&name)
                    .map_err(|e| AppError::Validation(anyhow::anyhow!("{e}")))?,
                None if cfg.data.synthetic.is_some() => Split::Synthetic,
                None => Split::Val,
            };
            stages::evaluate_stage(&cfg, split).map_err(AppError::Runtime)
        }
        Command::Report(common) => {
            let cfg = load(&common, &[])?;
            stages::report_stage(&cfg).map_err(AppError::Runtime)
        }
        Command::Pipeline(common) => {
            let cfg = load(&common, &[])?;
            stages::pipeline(&cfg).map_err(AppError::Runtime)
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(AppError::Validation(e)) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
        Err(AppError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}
