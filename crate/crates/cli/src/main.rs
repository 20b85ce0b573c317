//! `berlab`: experiments on particle-ensemble regression and its excess risks.
//!
//! Exit codes: 0 success, 1 failed check or runtime error, 2 usage or
//! config error. Failures print a JSON object to stderr.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use berlab_core::verify::Sabotage;
use clap::{Parser, Subcommand};

use commands::{Artifacts, Failure};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "berlab", version, about = "Bayesian excess risk experiments with particle ensembles")]
struct Cli {
    /// TOML run configuration; every section is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: runs/<subcommand>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Risk decomposition versus N on the cubic toy problem.
    Toy,
    /// Property suite with pinned tolerances.
    Verify {
        /// Inject a fault to confirm the suite catches it: none | variance.
        #[arg(long, default_value = "none")]
        sabotage: String,
    },
    /// Fit one ensemble and report held-out metrics.
    Train,
    /// Sweep the rBER variance weight and select it on validation coverage.
    LambdaScan,
    /// Contextual bandit with Thompson sampling.
    Bandit,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Toy => "toy",
            Command::Verify { .. } => "verify",
            Command::Train => "train",
            Command::LambdaScan => "lambda-scan",
            Command::Bandit => "bandit",
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(Failure::Usage)?,
        None => RunConfig::default(),
    };
    let seed = cfg.resolve_seed(cli.seed);
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    let name = cli.command.name();
    let sabotage = match &cli.command {
        Command::Verify { sabotage } => sabotage.parse::<Sabotage>().map_err(|e| Failure::Usage(e.to_string()))?,
        _ => Sabotage::None,
    };
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(name));
    cfg.out = Some(dir.clone());
    let mut out = Artifacts::create(&dir)?;
    out.describe(&cfg, name, seed, cli.threads)?;
    let result = match cli.command {
        Command::Toy => commands::toy(&cfg, &mut out),
        Command::Verify { .. } => commands::verify(&cfg, sabotage, &mut out),
        Command::Train => commands::train_cmd(&cfg, &mut out),
        Command::LambdaScan => commands::lambda_scan_cmd(&cfg, &mut out),
        Command::Bandit => commands::bandit_cmd(&cfg, &mut out),
    };
    out.write_manifest(name, seed, cli.threads)?;
    result
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report(&Failure::Usage(e.to_string().trim_end().to_string()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            report(&f);
            ExitCode::from(f.code() as u8)
        }
    }
}

fn report(f: &Failure) {
    let v = serde_json::json!({
        "error": {
            "kind": f.kind(),
            "exit_code": f.code(),
            "message": f.message(),
        }
    });
    eprintln!("{v}");
}
