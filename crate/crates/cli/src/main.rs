//! `segadapt`: adapt, evaluate and inspect promptable segmentation models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use segadapt::adapt::{TeacherMode, TrainPrompt};
use segadapt::data::{ToyDomainConfig, ToyKind};
use segadapt::exec::Exec;
use segadapt::lora::FinetuneMode;
use segadapt::prompts::{AutoMaskThresholds, PromptKind};

use crate::config::{ExperimentConfig, RUN_ROOT_ENV};

#[derive(Parser)]
#[command(
    name = "segadapt",
    version,
    about = "Source-free weakly supervised adaptation of promptable segmentation models"
)]
struct Cli {
    /// Run every batch on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised training of a toy backend; writes `base.weights`.
    Pretrain(ConfigArgs),
    /// Adapts the configured backend to the configured dataset.
    Adapt(AdaptArgs),
    /// Scores the backend, optionally with an adapter checkpoint.
    Evaluate(EvaluateArgs),
    /// Writes simulated prompts for every instance of a dataset.
    GenPrompts(GenPromptsArgs),
    /// Renders a synthetic blob dataset to image and mask directories.
    MakeToyData(MakeToyArgs),
    /// Tabulates the reports of finished adaptation runs.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Loads base weights from this archive instead of the configured backend.
    #[arg(long)]
    base: Option<PathBuf>,
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Weak supervision: box, point, poly or automated.
    #[arg(long)]
    prompt: Option<TrainPrompt>,
    #[arg(long)]
    subset_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Trainable groups joined by `+`: lora, decoder, layernorm, full, embed.
    #[arg(long)]
    finetune_mode: Option<FinetuneMode>,
    /// shared or ema.
    #[arg(long)]
    teacher_mode: Option<TeacherMode>,
    #[arg(long)]
    no_anchor: bool,
    #[arg(long)]
    no_contrastive: bool,
    #[arg(long)]
    no_selftrain: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Test prompt: box, point or poly.
    #[arg(long, default_value = "box")]
    prompt: PromptKind,
    /// Scores every test prompt type instead of one.
    #[arg(long)]
    cross_prompt: bool,
    /// Scores ground-truth masks instead of a model.
    #[arg(long)]
    oracle: bool,
    /// Report directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenPromptsArgs {
    /// Dataset manifest (TOML).
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long = "type", default_value = "box")]
    kind: TrainPrompt,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Backend description (key=value) for automated prompts.
    #[arg(long)]
    backend: Option<PathBuf>,
    /// Automated prompts: minimum predicted-IoU score.
    #[arg(long)]
    min_pred_iou: Option<f64>,
    /// Automated prompts: minimum stability score.
    #[arg(long)]
    min_stability: Option<f64>,
}

#[derive(Args)]
struct MakeToyArgs {
    /// clean or corrupted.
    #[arg(long)]
    kind: ToyKind,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories containing `report.json`.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn load(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
        cfg.pretrain.seed = seed;
    }
    if let Some(base) = &args.base {
        cfg.backend.backend = segadapt::model::BackendKind::Pretrained;
        cfg.backend.pretrained_weights_path = Some(base.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    match cli.command {
        Command::Pretrain(args) => {
            commands::pretrain(&load(&args)?, exec)?;
        }
        Command::Adapt(args) => {
            let mut cfg = load(&args.common)?;
            let t = &mut cfg.train;
            if let Some(p) = args.prompt {
                t.prompt_type = p;
            }
            if let Some(n) = args.subset_size {
                t.labeled_subset_size = Some(n);
            }
            if let Some(e) = args.epochs {
                t.epochs = e;
            }
            if let Some(m) = args.finetune_mode {
                t.finetune_mode = m;
            }
            if let Some(m) = args.teacher_mode {
                t.teacher_mode = m;
            }
            t.toggles.anchor &= !args.no_anchor;
            t.toggles.contrastive &= !args.no_contrastive;
            t.toggles.self_training &= !args.no_selftrain;
            let dir = commands::adapt(&cfg, exec)?;
            println!("run directory: {}", dir.display());
        }
        Command::Evaluate(args) => {
            let cfg = load(&args.common)?;
            let eval = commands::EvaluateArgs {
                checkpoint: args.checkpoint.as_deref(),
                prompt: args.prompt,
                cross_prompt: args.cross_prompt,
                oracle: args.oracle,
                seed: cfg.train.seed,
                out: args.out.as_deref(),
            };
            commands::evaluate_cmd(&cfg, &eval, exec)?;
        }
        Command::GenPrompts(args) => {
            let defaults = AutoMaskThresholds::default();
            commands::gen_prompts(&commands::GenPromptsArgs {
                manifest: &args.manifest,
                kind: args.kind,
                seed: args.seed,
                out: &args.out,
                backend: args.backend.as_deref(),
                thresholds: AutoMaskThresholds {
                    pred_iou: args.min_pred_iou.unwrap_or(defaults.pred_iou),
                    stability: args.min_stability.unwrap_or(defaults.stability),
                    ..defaults
                },
            })?;
        }
        Command::MakeToyData(args) => {
            commands::make_toy_data(
                args.kind,
                args.count,
                args.seed,
                &ToyDomainConfig::default(),
                &args.out,
            )
            .with_context(|| format!("cannot write toy data to {}", args.out.display()))?;
        }
        Command::Report(args) => commands::report(&args.runs, args.csv.as_deref())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    log::debug!("run root override: {:?}", std::env::var_os(RUN_ROOT_ENV));
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
