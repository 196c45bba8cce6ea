use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use metavd_core::config::{RunConfig, OUTPUT_DIR_ENV};
use metavd_core::experiment::{self, CHECKPOINT_FILE, PLAN_FILE};
use metavd_core::gradcheck::{self, Fault, GradcheckOptions};
use metavd_core::Error;

#[derive(Parser)]
#[command(name = "metavd", version, about = "Federated learning with hypernetwork-predicted variational dropout")]
struct Cli {
    /// Worker threads for client-parallel work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config key, e.g. `--set algo.gamma=0.05`. Repeatable; last wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        RunConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InjectFault {
    KlSignFlip,
}

#[derive(Subcommand)]
enum Command {
    /// Partition the configured dataset and write the plan and class histogram.
    Partition {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, env = OUTPUT_DIR_ENV)]
        out: Option<PathBuf>,
    },
    /// Train and write metrics, checkpoint and final report.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, env = OUTPUT_DIR_ENV)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and print the report as JSON.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Partition plan; defaults to plan.json next to the checkpoint.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Average predictions over this many weight-noise samples.
        #[arg(long)]
        mc_samples: Option<usize>,
        /// Evaluate the model compressed at this dropout-rate threshold.
        #[arg(long)]
        compress_threshold: Option<f64>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Zero dropout-layer weights whose dropout rate exceeds the threshold.
    Compress {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
        /// Compressed checkpoint; defaults to `<checkpoint>.compressed`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare every analytic gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, value_enum)]
        inject: Option<InjectFault>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn sibling_plan(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(PLAN_FILE)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Partition { cfg, out } => {
            let cfg = cfg.load()?;
            let dir = out.unwrap_or_else(|| cfg.resolve_output_dir());
            let summary = experiment::run_partition(&cfg, &dir)?;
            print_json(&summary)
        }
        Command::Train { cfg, out } => {
            let cfg = cfg.load()?;
            let dir = out.unwrap_or_else(|| cfg.resolve_output_dir());
            let result = experiment::run_train(&cfg, &dir)?;
            eprintln!(
                "trained {} rounds; checkpoint {}",
                result.history.rounds.len(),
                dir.join(CHECKPOINT_FILE).display()
            );
            print_json(&result.final_report)
        }
        Command::Evaluate {
            cfg,
            checkpoint,
            plan,
            mc_samples,
            compress_threshold,
            out,
        } => {
            let cfg = cfg.load()?;
            let mut eval = cfg.eval.clone();
            if let Some(s) = mc_samples {
                eval.mc_samples = s;
            }
            if compress_threshold.is_some() {
                eval.compress_threshold = compress_threshold;
            }
            let plan = plan.unwrap_or_else(|| sibling_plan(&checkpoint));
            let report = experiment::run_evaluate(&cfg, &eval, &checkpoint, &plan)?;
            if let Some(out) = out {
                let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
                std::fs::write(&out, text + "\n").map_err(|e| Failure::from(Error::Io { path: out, source: e }))?;
            }
            print_json(&report)
        }
        Command::Compress {
            checkpoint,
            plan,
            threshold,
            out,
        } => {
            let plan = plan.unwrap_or_else(|| sibling_plan(&checkpoint));
            let out = out.unwrap_or_else(|| {
                let mut name = checkpoint.clone().into_os_string();
                name.push(".compressed");
                PathBuf::from(name)
            });
            let report = experiment::run_compress(&checkpoint, &plan, threshold, &out)?;
            eprintln!("wrote {}", out.display());
            print_json(&report)
        }
        Command::Gradcheck { seed, cases, inject } => {
            let report = gradcheck::run(&GradcheckOptions {
                seed,
                cases,
                fault: inject.map(|InjectFault::KlSignFlip| Fault::KlSignFlip),
            })?;
            for c in &report.checks {
                eprintln!(
                    "{:<5} {:<20} max rel err {:.3e} (tol {:.0e}, {} cases, {} coords)",
                    if c.passed { "ok" } else { "FAIL" },
                    c.name,
                    c.max_rel_err,
                    c.tolerance,
                    c.cases,
                    c.coordinates
                );
            }
            print_json(&report)?;
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::Runtime("gradient check failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads;
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
