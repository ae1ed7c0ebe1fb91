use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ccr_core::experiment::{
    cmd_plan, cmd_report, cmd_run, cmd_synth, DatasetSpec, ExperimentConfig, Layout, Source,
};
use ccr_core::task::SyntheticKind;
use ccr_core::Result;

#[derive(Parser)]
#[command(name = "ccr", version, about = "Contrast-consistent ranking probes and prompting baselines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "ccr_out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write extractor request files for every configured dataset.
    Plan(Common),
    /// Train and evaluate every (dataset, method, run) cell.
    Run {
        #[command(flatten)]
        common: Common,
        /// Use the built-in mock model instead of dump files.
        #[arg(long)]
        mock: bool,
    },
    /// Summarize the result store into CSV/JSON tables.
    Report {
        #[arg(long, default_value = "ccr_out")]
        out: PathBuf,
    },
    /// Write dataset documents, and with --mock a full set of mock dumps.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mock: bool,
        /// Synthetic datasets to write when no config is given.
        #[arg(long = "kind", value_parser = parse_kind)]
        kinds: Vec<SyntheticKind>,
    },
}

fn parse_kind(s: &str) -> std::result::Result<SyntheticKind, String> {
    s.parse().map_err(|e: ccr_core::Error| e.to_string())
}

fn config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            return Err(ccr_core::Error::InvalidArgument("--config is required".into()));
        }
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Plan(common) => {
            let cfg = config(&common)?;
            for p in cmd_plan(&cfg, &Layout::new(&common.out, &cfg))? {
                println!("{}", p.display());
            }
        }
        Command::Run { common, mock } => {
            let cfg = config(&common)?;
            let source = if mock { Source::Mock } else { Source::Dumps };
            let s = cmd_run(&cfg, &Layout::new(&common.out, &cfg), &source)?;
            println!("{} cells computed, {} already in the store", s.computed, s.skipped);
        }
        Command::Report { out } => {
            let layout = Layout::new(&out, &ExperimentConfig::default());
            let report = cmd_report(&layout)?;
            println!("{:<16} {:<16} {:>5} {:>17} {:>17}", "group", "method", "runs", "tau_abs", "pairwise_acc");
            for r in &report.summary {
                println!(
                    "{:<16} {:<16} {:>5} {:>8.3} ± {:<6.3} {:>8.3} ± {:<6.3}",
                    r.group, r.method, r.runs, r.tau_abs_mean, r.tau_abs_std, r.pairwise_accuracy_mean, r.pairwise_accuracy_std
                );
            }
            println!("tables written to {}", layout.report().display());
        }
        Command::Synth { common, mock, kinds } => {
            let cfg = if common.config.is_some() {
                config(&common)?
            } else {
                if kinds.is_empty() {
                    return Err(ccr_core::Error::InvalidArgument("give --config or at least one --kind".into()));
                }
                ExperimentConfig {
                    datasets: kinds.into_iter().map(DatasetSpec::Synthetic).collect(),
                    methods: vec!["TripletCCR-S".parse()?],
                    seed: common.seed.unwrap_or(0),
                    ..ExperimentConfig::default()
                }
            };
            for p in cmd_synth(&cfg, &Layout::new(&common.out, &cfg), mock)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
