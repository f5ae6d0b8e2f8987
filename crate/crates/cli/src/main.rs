use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use micl_core::corpus::persist_corpus;
use micl_core::pipeline::{self, parse_override, PipelineConfig, RunOptions, Severity, Stage, StageStatus};
use micl_core::synthetic::{self, SyntheticSpec};

const BUNDLED_CONFIG: &str = include_str!("../fixtures/synthetic.json");

#[derive(Parser)]
#[command(name = "micl", version, about = "Multimodal in-context example retrieval pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one stage, or `all` of them in order.
    Run {
        /// ingest, retrieve, score, mine, train, eval, report or all
        stage: String,
        #[arg(short, long)]
        config: PathBuf,
        /// Override a config value: --set train.k=3 (repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Rerun stages even when their outputs are up to date.
        #[arg(long)]
        force: bool,
    },
    /// Check a config and print its diagnostics.
    Validate {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Also print the resolved configuration.
        #[arg(long)]
        print: bool,
    },
    /// Write the bundled synthetic config.
    Init {
        path: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Write a seeded synthetic corpus as manifests plus its latent matrix.
    Synth {
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        memory_size: usize,
        #[arg(long, default_value_t = 200)]
        query_size: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 16)]
        signal_dims: usize,
    },
}

fn overrides(raw: &[String]) -> Result<Vec<(String, serde_json::Value)>> {
    raw.iter()
        .map(|s| parse_override(s).with_context(|| format!("bad --set {s:?}")))
        .collect()
}

fn stages(name: &str) -> Result<Vec<Stage>> {
    if name == "all" {
        return Ok(Stage::ALL.to_vec());
    }
    Ok(vec![name.parse()?])
}

fn run(stage: &str, config: &Path, raw: &[String], force: bool) -> Result<()> {
    let stages = stages(stage)?;
    let cfg = PipelineConfig::load(config, &overrides(raw)?)
        .with_context(|| format!("loading {}", config.display()))?;
    let outcomes = pipeline::run(&cfg, &stages, RunOptions { force })?;
    for o in outcomes {
        let status = match o.status {
            StageStatus::Ran => "ran",
            StageStatus::Skipped => "skipped (up to date)",
        };
        println!("{}: {status}", o.stage);
    }
    Ok(())
}

fn validate(config: &Path, raw: &[String], print: bool) -> Result<bool> {
    let ov = overrides(raw)?;
    let diagnostics = pipeline::validate_config(config, &ov);
    for d in &diagnostics {
        println!("{d}");
    }
    if print {
        if let Ok(cfg) = PipelineConfig::load(config, &ov) {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
    }
    Ok(diagnostics.iter().all(|d| d.severity != Severity::Error))
}

fn synth(out: &Path, spec: &SyntheticSpec) -> Result<()> {
    let data = synthetic::generate(spec)?;
    persist_corpus(&data.memory, &out.join("train"))?;
    persist_corpus(&data.queries, &out.join("eval"))?;
    data.latent.write(&out.join("latent.micl"))?;
    println!(
        "wrote {} memory and {} query records to {}",
        data.memory.len(),
        data.queries.len(),
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            stage,
            config,
            overrides,
            force,
        } => run(&stage, &config, &overrides, force).map(|_| true),
        Command::Validate { config, overrides, print } => validate(&config, &overrides, print),
        Command::Init { path, force } => (|| {
            if path.exists() && !force {
                bail!("{} exists; pass --force to overwrite", path.display());
            }
            micl_core::io::write_atomic(&path, BUNDLED_CONFIG.as_bytes())?;
            println!("wrote {}", path.display());
            Ok(true)
        })(),
        Command::Synth {
            out,
            seed,
            memory_size,
            query_size,
            dim,
            signal_dims,
        } => synth(
            &out,
            &SyntheticSpec {
                seed,
                memory_size,
                query_size,
                dim,
                signal_dims,
                ..SyntheticSpec::default()
            },
        )
        .map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
