use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use composer_core::pipeline::{self, Pipeline, RunConfig};

#[derive(Parser)]
#[command(
    name = "lora-composer",
    version,
    about = "Layout-guided multi-concept LoRA composition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a composition job and write trace.csv, latent.lcb and preview.pgm.
    Compose {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed (weights and noise).
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write two synthetic concept bundles, a global prompt and a config.
    MakeToyAssets {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the guidance gradient with central finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Number of seeded latent coordinates to difference; 0 checks all.
        #[arg(long, default_value_t = 256)]
        coords: usize,
    },
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir()?.join(p)
    })
}

fn load(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Compose { config, seed, out } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = absolute(&o)?;
            }
            let report = pipeline::compose(&cfg)?;
            let guided = report.run.guided.len();
            println!(
                "trace:   {} ({} rows)",
                report.trace.display(),
                report.rows.len()
            );
            println!("latent:  {}", report.latent.display());
            println!("preview: {}", report.preview.display());
            if let Some(a) = &report.attention {
                println!("attention: {}", a.display());
            }
            if let (Some(first), Some(last)) = (report.run.guided.first(), report.run.guided.last())
            {
                println!(
                    "guided {guided} timesteps: loss {:.4} (t={}) -> {:.4} (t={})",
                    first.initial.total, first.timestep, last.best.total, last.timestep
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::MakeToyAssets { seed, out } => {
            let toy = pipeline::make_toy_assets(seed, &out)?;
            println!("{}", toy.config_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { config, coords } => {
            let cfg = load(&config)?;
            let p = Pipeline::from_config(&cfg)?;
            let limit = (coords > 0).then_some(coords);
            let r = pipeline::gradcheck(&p, cfg.seed, limit)?;
            println!(
                "t={} loss={:.6} coords={}/{} max_rel_err={:.3e} tol={:.0e}",
                r.timestep,
                r.loss,
                r.checked,
                r.total,
                r.max_relative_error,
                pipeline::gradcheck::TOLERANCE
            );
            if r.passed() {
                println!("PASS");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("FAIL");
                Ok(ExitCode::FAILURE)
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
