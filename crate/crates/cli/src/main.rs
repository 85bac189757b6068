//! `negdyn`: batch experiments over the diffusion-dynamics lab.
//!
//! Exit status: 0 ok, 1 configuration error, 2 runtime error, 3 failed
//! assertion (`--assert`).

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::{Command, ExperimentConfig};
use output::Artifacts;

/// Default output directory when neither `--out` nor the config sets one.
const OUT_ENV: &str = "NEGDYN_OUT";
const DEFAULT_OUT: &str = "negdyn-out";

#[derive(Parser)]
#[command(name = "negdyn", version, about = "Negative-prompt diffusion dynamics experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config's worker count.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Run only the named scenario (repeatable).
    #[arg(long = "scenario", global = true)]
    scenarios: Vec<String>,
    /// Exit with status 3 when a check fails.
    #[arg(long = "assert", global = true)]
    assert_checks: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Build the world; export component images, a dataset and the architecture manifest.
    GenWorld,
    /// One guided run per scenario at the base seed; dumps the trajectory and image.
    Sample,
    /// Seed-averaged attention strength ratio and critical steps.
    DiagnoseRt,
    /// Inducing-effect projections with and without the negative prompt.
    DiagnoseInducing,
    /// Cosine between consecutive applied noises.
    DiagnoseMomentum,
    /// Presence of the target with the negative prompt on [0, k).
    SweepReverseActivation,
    /// Shortest removing window for every start step.
    WindowSearch,
    /// Removal with the scenario window against the all-steps baseline.
    RemoveEval,
    /// Random NPDL1 weights for the world's vocabulary.
    InitWeights,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::GenWorld => Command::GenWorld,
            Cmd::Sample => Command::Sample,
            Cmd::DiagnoseRt => Command::DiagnoseRt,
            Cmd::DiagnoseInducing => Command::DiagnoseInducing,
            Cmd::DiagnoseMomentum => Command::DiagnoseMomentum,
            Cmd::SweepReverseActivation => Command::SweepReverseActivation,
            Cmd::WindowSearch => Command::WindowSearch,
            Cmd::RemoveEval => Command::RemoveEval,
            Cmd::InitWeights => Command::InitWeights,
        }
    }
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
    Assertion(Vec<String>),
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = Some(out.clone());
    }
    if let Some(p) = cli.parallelism {
        config.parallelism = Some(p);
    }
    Ok(config)
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let command = Command::from(cli.command);
    let config = load_config(cli).map_err(Failure::Config)?;
    let prep = config.prepare(command, &cli.scenarios).map_err(Failure::Config)?;
    let backend = commands::load_backend(&prep).map_err(Failure::Config)?;
    let out_dir = prep
        .config
        .output_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = prep.config.parallelism {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Failure::Runtime(e.into()))?;

    let (outcome, manifest) = pool
        .install(|| -> Result<_> {
            let mut artifacts = Artifacts::new(&out_dir)?;
            let outcome = commands::run(command, &prep, backend.as_ref(), &mut artifacts)?;
            let manifest = artifacts.finish(
                command.name(),
                &prep.hash,
                prep.config.seed,
                &outcome.results,
                &outcome.checks,
            )?;
            Ok((outcome, manifest))
        })
        .map_err(Failure::Runtime)?;

    for c in &outcome.checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("manifest: {}", manifest.display());
    let failed: Vec<String> = outcome.checks.iter().filter(|c| !c.pass).map(|c| c.name.clone()).collect();
    if cli.assert_checks && !failed.is_empty() {
        return Err(Failure::Assertion(failed));
    }
    Ok(())
}

fn main() -> ExitCode {
    // usage errors count as configuration errors
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("runtime error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Assertion(failed)) => {
            eprintln!("assertion failed: {}", failed.join(", "));
            ExitCode::from(3)
        }
    }
}
