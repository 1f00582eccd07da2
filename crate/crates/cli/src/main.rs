//! `ovor`: batch open-vocabulary object recognition.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ovor_core::align_mlp::{load_training_manifest, save_checkpoint, train_observed, CheckpointMeta};
use ovor_core::pipeline::{self, read_categories};
use ovor_core::synthetic::{write_dataset, DatasetSpec};
use ovor_core::{Distance, EncoderKind, Error, MlpDims, MlpParams, Overrides, Result, RunConfig, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "ovor", version, about = "Open-vocabulary object recognition over segmentation masks")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// mock | planted | clip-cache | mlp
    #[arg(long, global = true)]
    encoder: Option<EncoderKind>,
    /// Latent SVD projection: on | off.
    #[arg(long, global = true, value_parser = parse_switch)]
    svd: Option<bool>,
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Softmax discard threshold in [0, 1].
    #[arg(long, global = true)]
    theta: Option<f64>,
    #[arg(long, global = true)]
    min_area: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config's `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Every stage in order: localize through report.
    Run,
    /// Masks to regions and crops.
    Localize,
    /// Vocabulary to the category embedding table.
    EmbedText,
    /// Region crops to object embeddings.
    EmbedImage,
    /// Train the alignment MLP from a feature manifest.
    TrainMlp(TrainArgs),
    /// Standardize and project embeddings (no-op when svd is off).
    Project,
    /// Classify every region.
    Match,
    /// Score predictions against the annotations.
    Evaluate,
    /// Metrics CSV and overlay images.
    Report,
    /// Write a synthetic dataset and its run config.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON list of {"features": path, "category": index}.
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint directory; defaults to the config's `mlp_checkpoint`, else <out>/mlp.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    /// squared-euclidean | euclidean | cosine-distance
    #[arg(long)]
    distance: Option<String>,
    #[arg(long, default_value_t = 2048)]
    hidden1: usize,
    #[arg(long, default_value_t = 1024)]
    hidden2: usize,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Target directory.
    dir: PathBuf,
    #[arg(long, default_value_t = 6)]
    images: usize,
    #[arg(long, default_value_t = 5)]
    categories: usize,
    #[arg(long, default_value_t = 7)]
    dataset_seed: u64,
}

fn parse_switch(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(format!("expected on or off, got {s:?}")),
    }
}

impl Global {
    fn overrides(&self) -> Overrides {
        Overrides {
            encoder: self.encoder,
            svd: self.svd,
            k: self.k,
            theta: self.theta,
            min_area: self.min_area,
            seed: self.seed,
            out: self.out.clone(),
        }
    }

    fn run_config(&self) -> Result<RunConfig> {
        let path = self.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
        let mut cfg = RunConfig::load(path)?;
        cfg.apply(&self.overrides());
        cfg.check_values()?;
        Ok(cfg)
    }
}

fn train_mlp(cfg: &RunConfig, args: &TrainArgs) -> Result<PathBuf> {
    let table = read_categories(cfg)?;
    let samples = load_training_manifest(&args.manifest)?;
    let first = samples.first().ok_or_else(|| Error::Config(format!("{} lists no samples", args.manifest.display())))?;
    let output = table.embeddings.first().map(|e| e.dim()).unwrap_or(0);
    let dims = MlpDims { input: first.features.flat_len(), hidden1: args.hidden1, hidden2: args.hidden2, output };

    let mut train = TrainConfig { epochs: args.epochs, seed: cfg.seed, ..TrainConfig::default() };
    if let Some(v) = args.learning_rate {
        train.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = args.margin {
        train.margin = v;
    }
    if let Some(d) = &args.distance {
        train.distance = serde_json::from_value::<Distance>(serde_json::Value::String(d.clone()))
            .map_err(|_| Error::Config(format!("unknown distance {d:?}")))?;
    }

    let dir = args.checkpoint.clone().or_else(|| cfg.checkpoint_dir()).unwrap_or_else(|| cfg.out_dir().join("mlp"));
    let outcome = train_observed(MlpParams::init(dims, cfg.seed), &samples, &table, &train, |epoch, _, loss| {
        log::info!("epoch {epoch}: loss {loss:.6}");
    })?;
    let meta = CheckpointMeta {
        format_version: 1,
        dims,
        config: Some(train.clone()),
        epoch: train.epochs,
        epoch_losses: outcome.epoch_losses,
    };
    save_checkpoint(&dir, &outcome.params, &meta)?;
    Ok(dir)
}

fn synth(args: &SynthArgs) -> Result<PathBuf> {
    let spec = DatasetSpec { images: args.images, categories: args.categories, seed: args.dataset_seed, ..DatasetSpec::default() };
    Ok(write_dataset(&args.dir, &spec)?.config)
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value serializes"));
}

fn dispatch(cli: &Cli) -> Result<()> {
    if let Command::Synth(args) = &cli.command {
        println!("{}", synth(args)?.display());
        return Ok(());
    }
    let cfg = cli.global.run_config()?;
    match &cli.command {
        Command::Run => {
            let summary = pipeline::run_pipeline(&cfg)?;
            println!(
                "{} images, {} regions, {} predictions -> {}",
                summary.images,
                summary.regions,
                summary.predictions,
                cfg.out_dir().display()
            );
            if let Some(report) = &summary.report {
                print_json(&serde_json::json!({ "classwise": report["classwise"], "imagewise": report["imagewise"] }));
            }
        }
        Command::Localize => {
            cfg.validate()?;
            let regions = pipeline::stage_localize(&cfg)?;
            let n: usize = regions.images.iter().map(|i| i.regions.len()).sum();
            println!("{n} regions in {} images", regions.images.len());
        }
        Command::EmbedText => println!("{} categories", pipeline::stage_embed_text(&cfg)?.len()),
        Command::EmbedImage => {
            pipeline::stage_embed_image(&cfg)?;
            println!("{}", cfg.out_dir().join(pipeline::EMBEDDINGS_FILE).display());
        }
        Command::TrainMlp(args) => println!("{}", train_mlp(&cfg, args)?.display()),
        Command::Project => match pipeline::stage_project(&cfg)? {
            Some(_) => println!("{}", cfg.out_dir().join(pipeline::SCORES_FILE).display()),
            None => println!("svd off; nothing to project"),
        },
        Command::Match => println!("{} predictions", pipeline::stage_match(&cfg)?.len()),
        Command::Evaluate => {
            let report = pipeline::stage_evaluate(&cfg)?;
            print_json(&serde_json::json!({ "classwise": report["classwise"], "imagewise": report["imagewise"] }));
        }
        Command::Report => {
            let written = pipeline::stage_report(&cfg)?;
            println!("{} overlays", written.len());
        }
        Command::Synth(_) => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
