use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use kap_cli::pipeline::{load_data, threads_from_env};
use kap_cli::report::build_report;
use kap_cli::{Arm, ExperimentConfig, Pipeline};
use kap_core::synthdata::{gen_bundle, save_bundle, World};

#[derive(Parser)]
#[command(name = "kap", version, about = "Cross-modal distillation with meta-learned priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the paired source and shifted target datasets.
    GenData {
        /// Experiment config; the bundled default when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one arm, or all arms in order.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// teacher, baseline, distill, meta-train, meta-test, sweep or all.
        #[arg(long)]
        arm: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run a single seed instead of every configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate run outputs into summary tables.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the bundled default config.
    DefaultConfig,
}

fn config(path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default_config()),
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { config: c, out } => {
            let cfg = config(c.as_ref())?;
            let bundle = gen_bundle(&World::build(&cfg.world)?, cfg.counts, cfg.noise_seed)?;
            save_bundle(&bundle, &out)?;
            eprintln!("wrote {}", out.display());
        }
        Command::Run {
            config: c,
            arm,
            data,
            out,
            seed,
        } => {
            let cfg = config(c.as_ref())?;
            let arms = match arm.as_str() {
                "all" => Arm::ALL.to_vec(),
                name => vec![name.parse()?],
            };
            let seeds = seed.map(|s| vec![s]).unwrap_or_else(|| cfg.seeds.clone());
            let bundle = load_data(&cfg, &data)?;
            let pipeline = Pipeline::new(&cfg, &bundle, out);
            for run in pipeline.run_all(&arms, &seeds, threads_from_env()?)? {
                for m in &run.metrics {
                    eprintln!(
                        "{} seed {} {}: epe {:.4} auc {:.4}",
                        run.arm, run.seed, m.setting, m.epe, m.auc
                    );
                }
            }
        }
        Command::Report { runs, out } => {
            let report = build_report(&runs, &out)?;
            print!("{}", report.markdown);
        }
        Command::DefaultConfig => {
            println!("{}", serde_json::to_string_pretty(&ExperimentConfig::default_config())?);
        }
    }
    Ok(())
}
