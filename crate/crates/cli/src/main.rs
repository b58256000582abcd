//! `fusereid`: command-line driver for pretraining, target adaptation,
//! evaluation and dataset generation.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fusereid_core::config::Variant;

/// Exit status for usage and configuration errors.
const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 1;

#[derive(Debug, Parser)]
#[command(name = "fusereid", version, about = "Unsupervised domain adaptation for person re-identification")]
struct Cli {
    /// Directory that receives checkpoints, logs and manifests.
    #[arg(long, global = true, env = "FUSEREID_OUTPUT_DIR", default_value = "runs")]
    output_dir: PathBuf,

    /// Overrides the seed from the config file.
    #[arg(long, global = true, env = "FUSEREID_SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Supervised training on the labelled source domain.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `pretrain.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Clustering-based adaptation to the unlabelled target domain.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Student checkpoint written by `pretrain`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run an ablation instead of the configured variant.
        #[arg(long, value_parser = parse_ablation)]
        ablation: Option<Variant>,
        /// Overrides `finetune.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Retrieval metrics of a checkpoint on the target query/gallery splits.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Describe images by the pooled global map only.
        #[arg(long)]
        global_only: bool,
        /// Skip per-segment L2 normalization.
        #[arg(long)]
        no_normalize: bool,
        /// Write query and gallery descriptors; `.csv` selects text output, anything else binary.
        #[arg(long)]
        export_embeddings: Option<PathBuf>,
    },
    /// Recomputes the cross-view ARI table from saved label files.
    ReportConsistency {
        /// Directory of `epoch_NNN.csv` files written by `finetune`.
        #[arg(long)]
        labels: PathBuf,
    },
    /// Writes a synthetic domain to disk in the standard directory layout.
    SynthGen {
        #[arg(long)]
        config: PathBuf,
        /// `source` or `target`.
        #[arg(long, default_value = "target")]
        domain: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_ablation(s: &str) -> Result<Variant, String> {
    match s {
        "no-fm" => Ok(Variant::NoFm),
        "baseline" => Ok(Variant::Baseline),
        other => Err(format!("unknown ablation {other:?}; expected no-fm or baseline")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain { config, epochs } => commands::pretrain(&cli.output_dir, cli.seed, &config, epochs),
        Command::Finetune { config, checkpoint, ablation, epochs } => {
            commands::finetune(&cli.output_dir, cli.seed, &config, &checkpoint, ablation, epochs)
        }
        Command::Evaluate { config, checkpoint, global_only, no_normalize, export_embeddings } => commands::evaluate(
            &cli.output_dir,
            cli.seed,
            &config,
            &checkpoint,
            global_only,
            !no_normalize,
            export_embeddings.as_deref(),
        ),
        Command::ReportConsistency { labels } => commands::report_consistency(&cli.output_dir, &labels),
        Command::SynthGen { config, domain, out } => commands::synth_gen(cli.seed, &config, &domain, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if commands::is_usage_error(&err) { EXIT_USAGE } else { EXIT_RUNTIME })
        }
    }
}
