use std::path::PathBuf;
use std::process::ExitCode;

use brittle_homog::cli_io::{run, RunConfig, RunOptions};
use brittle_homog::Error;
use clap::{Parser, ValueEnum};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    CellF,
    SurfaceG,
    EstimateF,
    EstimateG,
    Homogeneity,
    RegimeSweep,
    Denoise,
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::CellF => "cell-f",
            Command::SurfaceG => "surface-g",
            Command::EstimateF => "estimate-f",
            Command::EstimateG => "estimate-g",
            Command::Homogeneity => "homogeneity",
            Command::RegimeSweep => "regime-sweep",
            Command::Denoise => "denoise",
            Command::Report => "report",
        }
    }
}

/// Homogenization experiments for the high-contrast Mumford-Shah energy.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    /// Subcommand; defaults to the `subcommand` key of the config file.
    command: Option<Command>,
    /// Run configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory; overrides the `output` key. Defaults to `results`.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Ignore cached records and recompute.
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(text) => match RunConfig::parse(&text) {
                Ok(cfg) => cfg,
                Err(Error::Config { line, msg }) => {
                    eprintln!("error: {}:{line}: {msg}", path.display());
                    return ExitCode::from(1);
                }
                Err(e) => {
                    eprintln!("error: {}: {e}", path.display());
                    return ExitCode::from(1);
                }
            },
            Err(e) => {
                eprintln!("error: cannot read {}: {e}", path.display());
                return ExitCode::from(1);
            }
        },
        None => RunConfig::default(),
    };
    let sub = match (cli.command, &cfg.subcommand) {
        (Some(c), _) => c.name().to_string(),
        (None, Some(s)) => s.clone(),
        (None, None) => {
            eprintln!("error: no subcommand given on the command line or in the config");
            return ExitCode::from(1);
        }
    };
    let output = cli.output.or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("results"));
    let opts = RunOptions { output, cache_dir: None, force: cli.force };
    let outcome = match run(&sub, &cfg, &opts) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    for r in &outcome.records {
        if sub != "report" {
            println!("{} {} ({})", r.operation, r.config_hash, if outcome.cached { "cached" } else { "computed" });
        }
        for c in r.checks.iter().filter(|c| sub != "report" || !c.ok) {
            println!("  [{}] {:?} {}: {}", if c.ok { "ok" } else { "FAIL" }, c.kind, c.name, c.detail);
        }
        for f in &r.flags {
            println!("  flag: {f}");
        }
    }
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    ExitCode::from(outcome.exit_code as u8)
}
