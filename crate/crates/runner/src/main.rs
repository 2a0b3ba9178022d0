use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ldznet::segnets::SegModelKind;
use ldznet::synthdata::Domain;
use ldznet_runner::pipeline::{report, DOMAINS};
use ldznet_runner::{Artifact, ExperimentConfig, Pipeline, RunError, RunResult, Upstream};

#[derive(Parser)]
#[command(name = "ldznet", version, about = "Toy latent-diffusion segmentation experiments")]
struct Cli {
    /// TOML experiment file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set ldm.steps=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root (also settable through LDZ_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run missing upstream stages instead of refusing.
    #[arg(long, global = true)]
    build_upstream: bool,
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved configuration as TOML.
    Config,
    /// Generate the synthetic splits.
    Synth,
    /// Train the autoencoder.
    TrainAe,
    /// Train the latent diffusion model.
    TrainLdm,
    /// Draw guided samples from the trained LDM.
    Sample,
    /// Noise-norm saliency over two-object scenes.
    Saliency,
    /// Block x timestep probe grid (resumable).
    ProbeGrid,
    /// Train one segmentation model.
    TrainSeg {
        #[arg(long)]
        model: SegModelKind,
    },
    /// Evaluate a trained segmentation model on the test split.
    Eval {
        #[arg(long)]
        model: SegModelKind,
        #[arg(long, default_value = "A")]
        domain: Domain,
    },
    /// Comparison table across seeds.
    Report {
        #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
        seeds: Vec<u64>,
    },
    /// Every stage for each seed, then the report.
    All {
        #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
        seeds: Vec<u64>,
    },
}

fn print(a: &Artifact) {
    let line = serde_json::json!({
        "stage": a.manifest.stage,
        "dir": a.dir.display().to_string(),
        "config_hash": a.manifest.config_hash,
        "output_sha256": a.manifest.output_sha256,
        "summary": a.manifest.summary,
    });
    println!("{line}");
}

fn run(cli: Cli) -> RunResult<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(out) = &cli.out {
        overrides.push(format!("out={}", toml::Value::String(out.display().to_string())));
    }
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let config = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    if let Command::Config = cli.command {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let mode = if cli.build_upstream { Upstream::Build } else { Upstream::Require };
    let verbose = !cli.quiet;
    let p = Pipeline { config: config.clone(), mode, verbose };
    let a = match cli.command {
        Command::Config => unreachable!("handled above"),
        Command::Synth => p.synth()?,
        Command::TrainAe => p.train_ae()?,
        Command::TrainLdm => p.train_ldm()?,
        Command::Sample => p.sample()?,
        Command::Saliency => p.saliency()?,
        Command::ProbeGrid => p.probe_grid()?,
        Command::TrainSeg { model } => p.train_seg(model)?,
        Command::Eval { model, domain } => p.eval(model, domain)?,
        Command::Report { seeds } => {
            let (a, table) = report(&config, &seeds, mode, verbose)?;
            eprint!("{}", table.to_markdown());
            a
        }
        Command::All { seeds } => {
            for &seed in &seeds {
                let p = Pipeline { config: ExperimentConfig { seed, ..config.clone() }, mode: Upstream::Build, verbose };
                print(&p.sample()?);
                print(&p.saliency()?);
                print(&p.probe_grid()?);
                for kind in SegModelKind::ALL {
                    for domain in DOMAINS {
                        print(&p.eval(kind, domain)?);
                    }
                }
            }
            let (a, table) = report(&config, &seeds, Upstream::Build, verbose)?;
            eprint!("{}", table.to_markdown());
            a
        }
    };
    print(&a);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", RunError::Config(e.to_string().lines().next().unwrap_or("").to_string()).to_line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::FAILURE
        }
    }
}
