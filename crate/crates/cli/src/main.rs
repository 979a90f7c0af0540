//! Command-line entry points: train, eval, predict, synth.
//!
//! Configuration comes from an optional TOML file plus flag overrides;
//! every run writes its effective config into the run directory. Exit
//! codes: 0 success, 2 configuration errors, 3 data errors, 4 numeric
//! failures, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use maskcd_core::config::{model_config_from_toml, model_config_toml, RunConfig};
use maskcd_core::data::checkpoint::Checkpoint;
use maskcd_core::data::dataset::TileDataset;
use maskcd_core::data::image_io::{load_gray, load_rgb, write_change_map};
use maskcd_core::error::Error;
use maskcd_core::model::Model;
use maskcd_core::train::{evaluate_dataset, load_datasets, run_training};

#[derive(Parser)]
#[command(name = "maskcd", about = "Mask-classification change detection for bitemporal tiles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints, a loss log and final metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Predict a change map for one image pair.
    Predict(PredictArgs),
    /// Generate a synthetic dataset on disk.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Train on generated synthetic tiles instead of a dataset root.
    #[arg(long)]
    synthetic: bool,
    /// Dataset root containing <split>/A|B|label/*.png.
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tile_size: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Number of object queries.
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    disable_deform_mhsa: bool,
    #[arg(long)]
    disable_masked_attention: bool,
    /// Replace decoder and mask head with a 1x1 per-pixel classifier.
    #[arg(long)]
    per_pixel_head: bool,
    /// Strict two-logit classification (no no-object class).
    #[arg(long)]
    two_logit_classes: bool,
    /// Threshold non-binary labels at 128 instead of rejecting them.
    #[arg(long)]
    lenient_labels: bool,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                RunConfig::from_toml(&text)?
            }
            None => RunConfig::default(),
        };
        if self.synthetic {
            cfg.data.synthetic = true;
        }
        if let Some(root) = &self.data_root {
            cfg.data.root = Some(root.clone());
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(t) = self.tile_size {
            cfg.model.tile_size = t;
        }
        if let Some(d) = self.hidden_dim {
            cfg.model.hidden_dim = d;
        }
        if let Some(q) = self.queries {
            cfg.model.num_queries = q;
        }
        if self.disable_deform_mhsa {
            cfg.model.disable_deform_mhsa = true;
        }
        if self.disable_masked_attention {
            cfg.model.disable_masked_attention = true;
        }
        if self.per_pixel_head {
            cfg.model.per_pixel_head = true;
        }
        if self.two_logit_classes {
            cfg.model.two_logit_classes = true;
        }
        if self.lenient_labels {
            cfg.data.lenient_labels = true;
        }
        cfg.model.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    augment: bool,
    /// Continue from a checkpoint (same model config and total steps).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Run directory root; MASKCD_RUN_ROOT overrides the config value.
    #[arg(long)]
    run_root: Option<PathBuf>,
    /// Name of the run directory under the root.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to evaluate (default: the config's validation split).
    #[arg(long)]
    split: Option<String>,
    /// Write the metric report JSON here (default: stdout only).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    t1: PathBuf,
    #[arg(long)]
    t2: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth label PNG; emits the four-color diagnostic instead
    /// of grayscale.
    #[arg(long)]
    overlay: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 8)]
    tiles: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    shapes: usize,
    #[arg(long, default_value_t = 8888)]
    seed: u64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::Data(_)
        | Error::Input(_)
        | Error::Checkpoint(_)
        | Error::Io(_)
        | Error::Image(_)
        | Error::DimensionMismatch { .. } => 3,
        Error::Numeric(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Synth(args) => cmd_synth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let mut cfg = args.common.build()?;
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(c) = args.checkpoint_every {
        cfg.train.checkpoint_every = c;
    }
    if args.augment {
        cfg.train.augment = true;
    }
    if let Some(root) = args.run_root {
        cfg.output.run_root = root;
    }
    if let Ok(root) = std::env::var("MASKCD_RUN_ROOT") {
        cfg.output.run_root = PathBuf::from(root);
    }
    if let Some(name) = args.name {
        cfg.output.run_name = name;
    }

    let run_dir = cfg.output.run_root.join(&cfg.output.run_name);
    let summary = run_training(&cfg, &run_dir, args.resume.as_deref())?;
    if let (Some(first), Some(last)) = (summary.records.first(), summary.records.last()) {
        println!(
            "trained {} steps: loss {:.6} -> {:.6}",
            summary.records.len(),
            first.total,
            last.total
        );
    }
    if let Some(report) = &summary.final_metrics {
        println!(
            "val metrics: oa {:.4} pre {:.4} rec {:.4} f1 {:.4} miou {:.4}",
            report.oa, report.pre, report.rec, report.f1, report.miou
        );
    }
    println!("run directory: {}", run_dir.display());
    Ok(())
}

/// Build a model from a checkpoint, refusing config mismatches against
/// any explicitly requested model section.
fn model_from_checkpoint(
    ckpt: &Checkpoint,
    requested: Option<&RunConfig>,
) -> Result<Model, Error> {
    let model_cfg = model_config_from_toml(&ckpt.config_toml)?;
    if let Some(req) = requested {
        if req.model != model_cfg {
            return Err(Error::Checkpoint(format!(
                "checkpoint model config does not match the requested one:\n--- checkpoint ---\n{}\n--- requested ---\n{}",
                ckpt.config_toml,
                model_config_toml(&req.model)
            )));
        }
    }
    let mut model = Model::new(&model_cfg, 0)?;
    ckpt.apply_to_store(&mut model.store)?;
    Ok(model)
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut cfg = args.common.build()?;
    // Without an explicit config file the model section follows the
    // checkpoint; with one, it must match.
    let requested = args.common.config.is_some().then(|| cfg.clone());
    let model = model_from_checkpoint(&ckpt, requested.as_ref())?;
    cfg.model = model.cfg.clone();
    let split = args.split.clone().unwrap_or_else(|| cfg.data.val_split.clone());
    let dataset: TileDataset = if cfg.data.synthetic {
        let (train, val) = load_datasets(&cfg)?;
        if split == cfg.data.train_split {
            train
        } else if split == cfg.data.val_split {
            val.ok_or_else(|| Error::Data("synthetic validation split is empty".into()))?
        } else {
            return Err(Error::Data(format!(
                "unknown synthetic split {split:?}; expected {:?} or {:?}",
                cfg.data.train_split, cfg.data.val_split
            )));
        }
    } else {
        let root = cfg
            .data
            .root
            .clone()
            .ok_or_else(|| Error::Config("eval needs --data-root or --synthetic".into()))?;
        maskcd_core::data::load_tile_dataset(&root, &split, cfg.data.lenient_labels)?
    };
    let report = evaluate_dataset(&model, &dataset)?;
    let json = serde_json::to_string_pretty(&report).unwrap();
    if let Some(out) = &args.out {
        std::fs::write(out, &json)?;
    }
    println!("{json}");
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<(), Error> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let base_cfg = model_config_from_toml(&ckpt.config_toml)?;
    let (t1, h1, w1) = load_rgb(&args.t1)?;
    let (t2, h2, w2) = load_rgb(&args.t2)?;
    if (h1, w1) != (h2, w2) {
        return Err(Error::Input(format!(
            "image sizes differ: {h1}x{w1} vs {h2}x{w2}"
        )));
    }
    if h1 != w1 {
        return Err(Error::Input(format!(
            "prediction expects square tiles, got {h1}x{w1}; tile the input"
        )));
    }
    let div = base_cfg.encoder.required_divisor();
    if h1 % div != 0 {
        return Err(Error::Input(format!(
            "input extent {h1} is not divisible by {div}; pad or tile the input"
        )));
    }
    // Parameters are resolution-independent; rebuild the net at the
    // input extent.
    let mut cfg = base_cfg;
    cfg.tile_size = h1;
    let mut model = Model::new(&cfg, 0)?;
    ckpt.apply_to_store(&mut model.store)?;
    let map = model.predict_change_map(&t1, &t2)?;
    match &args.overlay {
        Some(gt_path) => {
            let (gt_raw, gh, gw) = load_gray(gt_path)?;
            if (gh, gw) != (h1, w1) {
                return Err(Error::Input(format!(
                    "overlay label is {gh}x{gw}, expected {h1}x{w1}"
                )));
            }
            let gt: Vec<u8> = gt_raw.iter().map(|&v| u8::from(v >= 128)).collect();
            write_change_map(&map, Some(&gt), &args.out)?;
        }
        None => write_change_map(&map, None, &args.out)?,
    }
    let changed = map.labels.iter().filter(|&&v| v != 0).count();
    println!(
        "wrote {} ({}x{}, {:.2}% changed)",
        args.out.display(),
        map.w,
        map.h,
        100.0 * changed as f64 / map.labels.len() as f64
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), Error> {
    let ds = TileDataset::synthetic(args.seed, &args.split, args.size, args.tiles, args.shapes);
    let files = ds.write_to(&args.out, &args.split)?;
    println!(
        "wrote {} tiles ({} files) under {}",
        ds.len(),
        files.len(),
        args.out.join(&args.split).display()
    );
    Ok(())
}
