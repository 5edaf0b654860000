//! `eaglepc` — synthetic unlearning laboratory.
//!
//! Subcommands cover the whole experiment cycle: generate the QA world,
//! fine-tune the original model, retrain the reference, unlearn with a
//! chosen objective, evaluate against the reference, score memorization,
//! and compare runs into tables and plot-ready CSVs.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CommandCtx;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "eaglepc", version, about = "Entanglement-aware unlearning laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Output directory for this run's artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Optional `key = value` config file, applied before flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    entities: Option<usize>,
    #[arg(long = "qa-per-entity")]
    qa_per_entity: Option<usize>,
    #[arg(long = "forget-ratio")]
    forget_ratio: Option<f64>,
    #[arg(long = "holdout-entities")]
    holdout_entities: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct UnlearnArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    corpus: PathBuf,
    /// Starting checkpoint (the fine-tuned original model).
    #[arg(long)]
    ckpt: PathBuf,
    /// Objective: ga, gd, npo, npo+gd.
    #[arg(long)]
    opt: Option<String>,
    /// Entanglement weighting: on or off.
    #[arg(long)]
    eagle: Option<String>,
    /// Entanglement temperature.
    #[arg(long)]
    k: Option<f64>,
    /// Penalty weight.
    #[arg(long)]
    mu: Option<f64>,
    /// Penalty mode: cap, floor, symmetric, literal-alg3.
    #[arg(long = "penalty-mode")]
    penalty_mode: Option<String>,
    /// Retain strength.
    #[arg(long)]
    alpha: Option<f64>,
    /// NPO inverse temperature.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Forget batch size.
    #[arg(long)]
    m: Option<usize>,
    /// Retain batch size.
    #[arg(long)]
    n: Option<usize>,
    /// Weight scale: softmax or softmax_times_m.
    #[arg(long)]
    scale: Option<String>,
    /// Proxy backend: stub, file, http.
    #[arg(long = "proxy-backend")]
    proxy_backend: Option<String>,
    #[arg(long = "proxy-file")]
    proxy_file: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    corpus: PathBuf,
    /// Model under evaluation.
    #[arg(long)]
    ckpt: PathBuf,
    /// Retrain reference model.
    #[arg(long = "retrain-ckpt")]
    retrain_ckpt: PathBuf,
    /// Auxiliary world-facts corpus (defaults to worldfacts.jsonl next to
    /// the corpus).
    #[arg(long = "world-facts")]
    world_facts: Option<PathBuf>,
    /// Row label used in comparison tables.
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args)]
struct MemscoreArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    corpus: PathBuf,
    /// Model whose entanglement weights are profiled.
    #[arg(long)]
    ckpt: PathBuf,
    /// How many forget samples to score.
    #[arg(long)]
    records: Option<usize>,
    /// Monte-Carlo seeds per record.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// report.json / memscore.json files to compare.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Generate the synthetic QA corpus and its auxiliary world.
    GenCorpus(GenCorpusArgs),
    /// Fine-tune the original model on forget + retain.
    Finetune(TrainArgs),
    /// Train the retrain reference on the retain split only.
    Retrain(TrainArgs),
    /// Run an unlearning objective from a fine-tuned checkpoint.
    Unlearn(UnlearnArgs),
    /// Evaluate a model against the retrain reference.
    Eval(EvalArgs),
    /// Leave-one-out memorization scores plus the weight profile.
    Memscore(MemscoreArgs),
    /// Merge reports into tables and plot-ready CSVs.
    Compare(CompareArgs),
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn build_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for pair in &common.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        cfg.apply(key.trim(), value.trim())?;
    }
    Ok(cfg)
}

fn apply_opt<T: ToString>(
    cfg: &mut RunConfig,
    key: &str,
    value: &Option<T>,
) -> Result<(), CliError> {
    if let Some(v) = value {
        cfg.apply(key, &v.to_string())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenCorpus(args) => {
            let mut cfg = build_config(&args.common)?;
            apply_opt(&mut cfg, "corpus.seed", &args.seed)?;
            apply_opt(&mut cfg, "corpus.entities", &args.entities)?;
            apply_opt(&mut cfg, "corpus.qa_per_entity", &args.qa_per_entity)?;
            apply_opt(&mut cfg, "corpus.forget_ratio", &args.forget_ratio)?;
            apply_opt(&mut cfg, "corpus.holdout_entities", &args.holdout_entities)?;
            let ctx = CommandCtx {
                cfg,
                out: args.common.out,
            };
            commands::gen_corpus(&ctx).map_err(CliError::from)
        }
        Command::Finetune(args) => {
            let ctx = train_ctx(&args)?;
            commands::finetune(&ctx, &args.corpus).map_err(CliError::from)
        }
        Command::Retrain(args) => {
            let ctx = train_ctx(&args)?;
            commands::retrain(&ctx, &args.corpus).map_err(CliError::from)
        }
        Command::Unlearn(args) => {
            let mut cfg = build_config(&args.common)?;
            apply_opt(&mut cfg, "objective.kind", &args.opt)?;
            if let Some(eagle) = &args.eagle {
                let enabled = match eagle.as_str() {
                    "on" => "true",
                    "off" => "false",
                    other => {
                        return Err(CliError::Usage(format!(
                            "--eagle expects on|off, got `{other}`"
                        )))
                    }
                };
                cfg.apply("eagle.enabled", enabled)?;
            }
            apply_opt(&mut cfg, "eagle.k", &args.k)?;
            apply_opt(&mut cfg, "penalty.mu", &args.mu)?;
            apply_opt(&mut cfg, "penalty.mode", &args.penalty_mode)?;
            apply_opt(&mut cfg, "objective.alpha", &args.alpha)?;
            apply_opt(&mut cfg, "objective.beta", &args.beta)?;
            apply_opt(&mut cfg, "unlearn.steps", &args.steps)?;
            apply_opt(&mut cfg, "unlearn.epochs", &args.epochs)?;
            apply_opt(&mut cfg, "unlearn.lr", &args.lr)?;
            apply_opt(&mut cfg, "unlearn.seed", &args.seed)?;
            apply_opt(&mut cfg, "objective.m", &args.m)?;
            apply_opt(&mut cfg, "objective.n", &args.n)?;
            apply_opt(&mut cfg, "eagle.scale", &args.scale)?;
            apply_opt(&mut cfg, "proxy.backend", &args.proxy_backend)?;
            if let Some(p) = &args.proxy_file {
                cfg.apply("proxy.file", &p.display().to_string())?;
            }
            let ctx = CommandCtx {
                cfg,
                out: args.common.out,
            };
            commands::unlearn(&ctx, &args.corpus, &args.ckpt).map_err(CliError::from)
        }
        Command::Eval(args) => {
            let mut cfg = build_config(&args.common)?;
            apply_opt(&mut cfg, "eval.label", &args.label)?;
            let ctx = CommandCtx {
                cfg,
                out: args.common.out,
            };
            commands::eval(
                &ctx,
                &args.corpus,
                &args.ckpt,
                &args.retrain_ckpt,
                args.world_facts.as_deref(),
            )
            .map_err(CliError::from)
        }
        Command::Memscore(args) => {
            let mut cfg = build_config(&args.common)?;
            apply_opt(&mut cfg, "mem.records", &args.records)?;
            apply_opt(&mut cfg, "mem.seeds", &args.seeds)?;
            apply_opt(&mut cfg, "eval.label", &args.label)?;
            let ctx = CommandCtx {
                cfg,
                out: args.common.out,
            };
            commands::memscore(&ctx, &args.corpus, &args.ckpt).map_err(CliError::from)
        }
        Command::Compare(args) => {
            let cfg = build_config(&args.common)?;
            let ctx = CommandCtx {
                cfg,
                out: args.common.out,
            };
            commands::compare(&ctx, &args.reports).map_err(CliError::from)
        }
    }
}

fn train_ctx(args: &TrainArgs) -> Result<CommandCtx, CliError> {
    let mut cfg = build_config(&args.common)?;
    apply_opt(&mut cfg, "train.epochs", &args.epochs)?;
    apply_opt(&mut cfg, "train.lr", &args.lr)?;
    apply_opt(&mut cfg, "train.batch", &args.batch)?;
    apply_opt(&mut cfg, "train.seed", &args.seed)?;
    Ok(CommandCtx {
        cfg,
        out: args.common.out.clone(),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
