//! Command-line front end. `run` returns the process exit code: 0 on success,
//! 1 on a usage error, 2 on a runtime error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::augment::AugmentVariant;
use crate::config::RunConfig;
use crate::error::{Result, StcrError};
use crate::eval::{evaluate, FeatureKind};
use crate::gradcheck::full_loss_gradient_check;
use crate::io::{load_checkpoint, load_dataset, read_clip, save_checkpoint};
use crate::model::ModelParams;
use crate::synthetic::gen_synthetic;
use crate::train::{center_crop, pretrain, TrainState};
use crate::viz::{viz_consistency_matrix, viz_heatmap};

pub const CHECKPOINT_FILE: &str = "checkpoint.stcr";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const AUGMENT_LOG_FILE: &str = "augment_log.csv";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "stcr", version, about = "Spatio-temporal consistency pretraining for small 3D CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides train.seed (and data.seed for gen-data).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic motion dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num_clips: Option<usize>,
    },
    /// Siamese pretraining; writes a checkpoint and CSV logs.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset directory containing manifest.tsv.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, value_parser = parse_variant)]
        augment: Option<AugmentVariant>,
        /// Disable the spatio-temporal transform on the noise path.
        #[arg(long)]
        no_stt: bool,
    },
    /// Linear probe on frozen features.
    Probe(EvalArgs),
    /// Nearest-neighbour retrieval on frozen features.
    Retrieve(EvalArgs),
    /// Write the 16-row transform consistency matrix of one clip.
    VizMatrix(VizArgs),
    /// Write an activation heatmap of one clip as PGM.
    VizHeatmap(VizArgs),
    /// Finite-difference check of the full loss gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Frozen weights; without it the seed's random initialization is evaluated.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// CSV of (metric, value).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_parser = parse_feature)]
    feature: Option<FeatureKind>,
}

#[derive(Args, Debug)]
struct VizArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Clip file; center-cropped to the backbone input if larger.
    #[arg(long)]
    clip: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_variant(s: &str) -> std::result::Result<AugmentVariant, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| "expected intra, inter, video_mixup, cut_mix or gaussian_noise".to_string())
}

fn parse_feature(s: &str) -> std::result::Result<FeatureKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| "expected descriptor or feature_map".to_string())
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn load_params(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<ModelParams> {
    match checkpoint {
        Some(p) => load_checkpoint(p, &cfg.backbone),
        None => Ok(TrainState::initial(&cfg.backbone, &cfg.train)?.params),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| StcrError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| StcrError::io(path, e))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, out, num_clips } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.data.seed = seed;
            }
            if let Some(n) = num_clips {
                cfg.data.num_clips = n;
            }
            let manifest = gen_synthetic(&cfg.data, &out)?;
            println!("wrote {} clips to {}", manifest.entries.len(), out.display());
        }
        Command::Pretrain {
            common,
            data,
            out,
            epochs,
            lr,
            batch_size,
            augment,
            no_stt,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(lr) = lr {
                cfg.train.learning_rate = lr;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(a) = augment {
                cfg.train.augment = a;
            }
            if no_stt {
                cfg.train.use_stt = false;
            }
            cfg.validate()?;
            let videos: Vec<_> = if cfg.train.epochs == 0 {
                Vec::new()
            } else {
                load_dataset(&data)?.into_iter().map(|(v, _)| v).collect()
            };
            let mut state = TrainState::initial(&cfg.backbone, &cfg.train)?;
            let log = pretrain(&mut state, &videos, &cfg.train)?;
            fs::create_dir_all(&out).map_err(|e| StcrError::io(&out, e))?;
            save_checkpoint(&out.join(CHECKPOINT_FILE), &state.params)?;
            write_text(&out.join(TRAIN_LOG_FILE), &log.steps_csv())?;
            write_text(&out.join(AUGMENT_LOG_FILE), &log.augments_csv())?;
            match log.steps.last() {
                Some(last) => println!("{} steps, final loss {}", log.steps.len(), last.total),
                None => println!("no training steps; wrote initial checkpoint"),
            }
        }
        Command::Probe(args) => run_eval(args, true)?,
        Command::Retrieve(args) => run_eval(args, false)?,
        Command::VizMatrix(args) => {
            let (params, clip) = viz_inputs(&args)?;
            let m = viz_consistency_matrix(&params, &clip, &args.out)?;
            println!("mean row/flipped-row gap {}", m.mean_flip_gap());
        }
        Command::VizHeatmap(args) => {
            let (params, clip) = viz_inputs(&args)?;
            let map = viz_heatmap(&params, &clip, &args.out)?;
            println!("wrote {}x{} heatmap to {}", map.width, map.height, args.out.display());
        }
        Command::Gradcheck { common, eps } => {
            let cfg = load_config(&common)?;
            let err = full_loss_gradient_check(&cfg.backbone, cfg.train.seed, eps)?;
            println!("max relative error {err:e}");
            if !(err < GRADCHECK_TOLERANCE) {
                return Err(StcrError::Numeric(format!(
                    "gradient check failed: {err:e} >= {GRADCHECK_TOLERANCE:e}"
                )));
            }
        }
    }
    Ok(())
}

fn run_eval(args: EvalArgs, probe: bool) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(k) = args.k {
        cfg.eval.retrieval_k = k;
    }
    if let Some(f) = args.feature {
        cfg.eval.feature = f;
    }
    cfg.validate()?;
    let params = load_params(&cfg, args.checkpoint.as_deref())?;
    let data = load_dataset(&args.data)?;
    let report = evaluate(&params, &data, cfg.train.crop, &cfg.eval)?;
    let (name, value) = if probe {
        ("probe_accuracy".to_string(), report.probe_accuracy)
    } else {
        (format!("recall_at_{}", report.k), report.recall_at_k)
    };
    println!("{name} {value}");
    if let Some(out) = &args.out {
        write_text(out, &format!("metric,value\n{name},{value}\n"))?;
    }
    Ok(())
}

fn viz_inputs(args: &VizArgs) -> Result<(ModelParams, crate::clip::VideoClip)> {
    let cfg = load_config(&args.common)?;
    cfg.validate()?;
    let params = load_params(&cfg, args.checkpoint.as_deref())?;
    let clip = read_clip(&args.clip)?;
    let [_, t, h, w] = cfg.backbone.input_shape;
    Ok((params, center_crop(&clip, [t, h, w])?))
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
