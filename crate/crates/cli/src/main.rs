use std::path::PathBuf;
use std::process::ExitCode;

use cdsr_core::pipeline::{self, PipelineConfig, PipelineError};
use cdsr_core::synthetic::SyntheticConfig;
use cdsr_core::trainer::Variant;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "cdsr", version, about = "Cross-domain sequential recommendation pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (JSON). Defaults apply to every missing field.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the trained/evaluated variant.
    #[arg(long, global = true, value_name = "NAME")]
    variant: Option<Variant>,
    /// Overlap ratio for `overlap-sweep`; repeat for several.
    #[arg(long, global = true, value_name = "FLOAT")]
    ratio: Vec<f64>,
    /// Overrides the output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Filter the interaction log and write leave-one-out splits.
    Prepare,
    /// Embed every item, build the PCA tables and cluster the items.
    Embed,
    /// Summarise every user into a profile embedding.
    Profile {
        /// Profile the whole sequence without cluster partitioning.
        #[arg(long)]
        single: bool,
    },
    /// Train the configured variant.
    Train,
    /// Evaluate the trained variant on validation and test.
    Eval,
    /// Train and test every ablation variant.
    Ablate,
    /// Retrain at reduced overlap ratios and test on the unchanged test set.
    OverlapSweep,
    /// prepare, embed, profile, train and eval in one go.
    Run,
    /// Write the planted-structure synthetic dataset to the configured data paths.
    Generate {
        #[arg(long, default_value_t = SyntheticConfig::default().users)]
        users: usize,
        #[arg(long, default_value_t = SyntheticConfig::default().seed)]
        data_seed: u64,
    },
}

fn load_config(common: &Common) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::from_json_file(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(variant) = common.variant {
        cfg.variant = variant;
    }
    if !common.ratio.is_empty() {
        cfg.ratios = common.ratio.clone();
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(value: &impl Serialize) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Runtime(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Prepare => print_json(&pipeline::prepare(&cfg)?),
        Command::Embed => {
            pipeline::embed(&cfg)?;
            println!("embedded into {}", cfg.out.join("embed").display());
            Ok(())
        }
        Command::Profile { single } => print_json(&pipeline::profile(&cfg, single)?),
        Command::Train => {
            let checkpoint = pipeline::train_stage(&cfg)?;
            println!("{}", checkpoint.display());
            Ok(())
        }
        Command::Eval => print_json(&pipeline::eval_stage(&cfg)?.records),
        Command::Ablate => print_json(&pipeline::ablate(&cfg)?),
        Command::OverlapSweep => print_json(&pipeline::overlap_sweep_stage(&cfg)?),
        Command::Run => print_json(&pipeline::run_all(&cfg)?.records),
        Command::Generate { users, data_seed } => {
            let synth = SyntheticConfig { users, seed: data_seed, ..Default::default() };
            let dir = cfg.data.interactions.parent().map(PathBuf::from).unwrap_or_default();
            if cfg.data.interactions != dir.join("interactions.jsonl") || cfg.data.catalog != dir.join("items.jsonl") {
                return Err(PipelineError::Config(format!(
                    "generate writes interactions.jsonl and items.jsonl side by side; point data.interactions and data.catalog into {}",
                    dir.display()
                )));
            }
            let (interactions, catalog) = pipeline::write_synthetic(&dir, &synth)?;
            println!("wrote {} and {}", interactions.display(), catalog.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
