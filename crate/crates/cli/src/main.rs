//! `looc`: train, evaluate and ablate leave-out classifier ensembles.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use looc_core::harness::{self, AblationAxis, ExperimentConfig};
use looc_core::metrics::METRIC_NAMES;
use looc_core::Result;

#[derive(Parser, Debug)]
#[command(name = "looc", version, about = "Leave-out classifier ensembles for OOD detection")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "LOOC_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Experiment config (key=value lines).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the K leave-out classifiers for the first seed.
    Train(ConfigArg),
    /// Score the ID test set and one evaluation set.
    Eval {
        #[arg(long, value_name = "PATH")]
        run_dir: PathBuf,
        #[arg(long, value_name = "NAME")]
        set: String,
    },
    /// Sweep one ablation axis.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        /// splits, split_type, epsilon, temperature, loss or score.
        #[arg(long, value_name = "NAME")]
        axis: String,
    },
    /// Write score histograms for every score dump in a run directory.
    Report {
        #[arg(long, value_name = "PATH")]
        run_dir: PathBuf,
    },
    /// Train and evaluate every configured seed and aggregate.
    Multiseed(ConfigArg),
}

fn print_report(set: &str, values: [f64; 6]) {
    let cols: Vec<String> = METRIC_NAMES
        .iter()
        .zip(values)
        .map(|(n, v)| format!("{n}={v:.3}"))
        .collect();
    println!("{set}: {}", cols.join(" "));
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    info!("loaded {} ({} classes, K={})", path.display(), cfg.class_count(), cfg.k);
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let run = harness::cmd_train(&load(&args.config)?, true)?;
            for c in &run.checkpoints {
                println!(
                    "part {}: epoch {} accuracy {} ood_error {}",
                    c.model.part_index(),
                    c.metadata.get("epoch").map_or("?", String::as_str),
                    c.metadata.get("accuracy").map_or("?", String::as_str),
                    c.metadata.get("ood_error").map_or("?", String::as_str),
                );
            }
            println!("wrote {}", run.run_dir.display());
        }
        Command::Eval { run_dir, set } => {
            let report = harness::cmd_eval(&run_dir, &set)?;
            print_report(&set, report.values());
        }
        Command::Ablate { config, axis } => {
            let axis: AblationAxis = axis.parse()?;
            let cfg = load(&config.config)?;
            for row in harness::cmd_ablate(&cfg, axis, true)? {
                print_report(&format!("{}={} {}", axis.name(), row.value, row.set), row.report.values());
            }
            println!("wrote {}", cfg.output_dir.join(format!("ablation_{}.csv", axis.name())).display());
        }
        Command::Report { run_dir } => {
            for path in harness::cmd_report(&run_dir)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Multiseed(args) => {
            let cfg = load(&args.config)?;
            for s in harness::cmd_multiseed(&cfg, true)? {
                let cols: Vec<String> = METRIC_NAMES
                    .iter()
                    .enumerate()
                    .map(|(m, n)| format!("{n}={:.3}±{:.3}", s.aggregate.mean[m], s.aggregate.std[m]))
                    .collect();
                println!("{} ({} runs): {}", s.set, s.aggregate.runs, cols.join(" "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: cannot configure {threads} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
