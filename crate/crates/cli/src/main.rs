use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use harmonize_cli::{run, Command, RunConfig};

#[derive(Parser)]
#[command(
    name = "harmonize",
    version,
    about = "Two-site image harmonization experiments"
)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for cross-validation (overrides the config).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Generate phantom or digit datasets for two sites.
    Simulate,
    /// Train the cycle-consistent GAN.
    Train,
    /// Translate sets with a trained checkpoint.
    Transform,
    /// Apply linear, GP or GAN correction to a dataset.
    Correct,
    /// Cross-validated classification against the baseline.
    Evaluate,
    /// Paired reconstruction error against ground truth.
    Reconstruct,
    /// Summarise earlier runs.
    Report,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Simulate => Command::Simulate,
            Cmd::Train => Command::Train,
            Cmd::Transform => Command::Transform,
            Cmd::Correct => Command::Correct,
            Cmd::Evaluate => Command::Evaluate,
            Cmd::Reconstruct => Command::Reconstruct,
            Cmd::Report => Command::Report,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = (|| {
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        if let Some(t) = cli.threads {
            cfg.threads = t;
        }
        if let Some(o) = &cli.out {
            cfg.out = Some(o.clone());
        }
        run(cli.cmd.into(), cfg)
    })();
    match result {
        Ok(out) => {
            println!("wrote {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
