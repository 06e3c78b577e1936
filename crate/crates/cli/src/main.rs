//! Batch command-line interface.
//!
//! Exit codes: 0 success, 1 tolerance breach or aborted run, 2 usage or
//! configuration error, 3 I/O error. `--threads` (or `SE3_THREADS`) caps the
//! worker pool; internal parallelism keeps results independent of the count.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use config::RunConfig;
use se3t::error::Error;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "se3t",
    about = "SE(3)-equivariant attention toolkit: data generation, training, evaluation, verification, benchmarks"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted-path overrides, e.g. --set training.steps=100
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Cap the worker thread pool (also: SE3_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Render reports as aligned tables instead of JSON.
    #[arg(long, global = true)]
    human: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate trajectories and write train/test JSONL datasets.
    GenData,
    /// Train the model on a generated dataset.
    Train {
        /// Resume bitwise from a checkpoint written by a previous run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: MSE, baselines, and equivariance error.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Verify per-layer and end-to-end equivariance plus the algebra checks.
    CheckEquivariance {
        /// Negative control: corrupt one coupling block; must exit nonzero.
        #[arg(long)]
        break_equivariance: bool,
        #[arg(long, default_value_t = 30)]
        trials: usize,
    },
    /// Spherical-harmonics throughput, memoized vs naive recursion.
    BenchSh {
        #[arg(long)]
        j_max: Option<u32>,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long, default_value_t = 3)]
        repeat: usize,
        /// Skip the naive-recursion comparison.
        #[arg(long)]
        no_memo: bool,
    },
    /// Model forward-pass wall-clock versus point count.
    BenchModel {
        #[arg(long, default_value_t = 3)]
        repeat: usize,
    },
    /// Representation-algebra diagnostics.
    So3 {
        #[command(subcommand)]
        sub: So3Command,
    },
}

#[derive(Subcommand)]
enum So3Command {
    /// Print max residuals of the Wigner-D and Clebsch-Gordan invariants.
    Verify {
        #[arg(long, default_value_t = 4)]
        max_degree: u32,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Tolerance { .. } | Error::NonFinite(_) => 1,
        Error::Io { .. } | Error::Malformed { .. } => 3,
        _ => 2,
    }
}

fn main() {
    let cli = Cli::parse();

    let threads = cli.threads.or_else(|| {
        std::env::var("SE3_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        // a second initialization in-process is harmless; ignore the error
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }

    let result = run(&cli);
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn run(cli: &Cli) -> se3t::error::Result<()> {
    let cfg = || RunConfig::load(cli.config.as_deref(), &cli.overrides);
    match &cli.command {
        Command::GenData => commands::cmd_gen_data(&cfg()?, cli.human),
        Command::Train { resume } => commands::cmd_train(&cfg()?, resume.as_deref(), cli.human),
        Command::Eval { checkpoint } => commands::cmd_eval(&cfg()?, checkpoint, cli.human),
        Command::CheckEquivariance {
            break_equivariance,
            trials,
        } => commands::cmd_check_equivariance(&cfg()?, *break_equivariance, *trials, cli.human),
        Command::BenchSh {
            j_max,
            points,
            repeat,
            no_memo,
        } => {
            let seed = cfg()
                .ok()
                .and_then(|c| c.run.seed)
                .unwrap_or(0);
            commands::cmd_bench_sh(*j_max, *points, *repeat, *no_memo, seed, cli.human)
        }
        Command::BenchModel { repeat } => {
            let mut c = cfg()?;
            if c.run.seed.is_none() {
                c.run.seed = Some(0);
            }
            commands::cmd_bench_model(&c, *repeat, cli.human)
        }
        Command::So3 { sub } => match sub {
            So3Command::Verify {
                max_degree,
                trials,
                seed,
            } => commands::cmd_so3_verify(*max_degree, *trials, *seed, cli.human),
        },
    }
}
