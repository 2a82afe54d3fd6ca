use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffgap_core::config::ExperimentConfig;
use diffgap_core::experiments::{self, MANIFEST_FILE};
use diffgap_core::{Error, Execution};

#[derive(Parser, Debug)]
#[command(name = "diffgap", version, about = "Guided diffusion sampling experiments on analytic mixture targets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON config file, or a run manifest to re-run.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides the file and --set.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (default: runs/<subcommand>).
    #[arg(long, global = true, value_name = "DIR", env = "DIFFGAP_OUT")]
    out: Option<PathBuf>,
    /// Dotted override, e.g. --set sampler.kind=ddim. Repeatable; applied in order.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Run single-threaded. Outputs are identical either way.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Train an ε-predictor on the configured family.
    Train,
    /// Sample chains and write samples, trajectories and metrics.
    Sample,
    /// Tabulate L(ω) and ω* at each sweep step.
    SweepOmega,
    /// Per-step guidance gap along sampled trajectories.
    GapReport,
    /// Accumulated gap for ω = 1 vs ω*(t), each with and without refinement.
    RefineCompare,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Sample => "sample",
            Command::SweepOmega => "sweep-omega",
            Command::GapReport => "gap-report",
            Command::RefineCompare => "refine-compare",
        }
    }
}

fn report(err: &Error) -> serde_json::Value {
    let (kind, messages) = match err {
        Error::Config(list) => ("config", list.clone()),
        Error::VersionSkew { .. } => ("version_skew", vec![err.to_string()]),
        Error::HashMismatch { .. } => ("hash_mismatch", vec![err.to_string()]),
        Error::Corrupt { .. } => ("corrupt_file", vec![err.to_string()]),
        Error::Io { .. } => ("io", vec![err.to_string()]),
        _ => ("runtime", vec![err.to_string()]),
    };
    serde_json::json!({ "status": "error", "kind": kind, "messages": messages })
}

fn run(cli: &Cli) -> Result<PathBuf, Error> {
    let g = &cli.global;
    let cfg = ExperimentConfig::resolve(g.config.as_deref(), &g.sets, g.seed)?;
    let out = g
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    let exec = if g.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let f = match cli.command {
        Command::Train => experiments::cmd_train,
        Command::Sample => experiments::cmd_sample,
        Command::SweepOmega => experiments::cmd_sweep_omega,
        Command::GapReport => experiments::cmd_gap_report,
        Command::RefineCompare => experiments::cmd_refine_compare,
    };
    let manifest = f(&cfg, &out, exec)?;
    for o in &manifest.outputs {
        println!("{}  {}", o.sha256, out.join(&o.path).display());
    }
    Ok(out.join(MANIFEST_FILE))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(manifest) => {
            println!("manifest: {}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", serde_json::to_string_pretty(&report(&e)).expect("plain json"));
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
