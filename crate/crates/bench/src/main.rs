use std::ffi::OsString;
use std::fs;
use std::io;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ftrep_bench::experiment::{parse_config, write_csv, write_report};
use ftrep_bench::{run_experiment, ExperimentConfig, FaultSpec, WorkloadKind, WorkloadSpec};
use ftrep_core::{FtMode, SchedMode};

#[derive(Parser)]
#[command(name = "ftrep", version, about = "Fault-tolerance experiments with partial replication")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a degree sweep and write a CSV report.
    #[command(args_override_self = true)]
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Sched {
    Det,
    Threads,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Flat key=value file with the same keys as the long flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "ring")]
    workload: WorkloadKind,
    #[arg(long, default_value_t = 4)]
    ncomp: usize,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    rdegree: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 64)]
    payload: usize,
    /// none, weibull:k,λ or file:path
    #[arg(long, default_value = "none")]
    faults: FaultSpec,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value = "det")]
    sched: Sched,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    /// CSV destination; standard output if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip logging and failure checks.
    #[arg(long)]
    bare: bool,
    /// Compute units per iteration.
    #[arg(long, default_value_t = 0)]
    work: u64,
    #[arg(long, default_value_t = 0)]
    barrier_period: usize,
    /// Failure detection latency in time units.
    #[arg(long, default_value_t = 5)]
    latency: u64,
}

/// Splices config-file entries in front of the command-line flags so that
/// explicit flags win.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(at) = args.iter().position(|a| a == "--config") else {
        return Ok(args);
    };
    let Some(path) = args.get(at + 1) else {
        bail!("--config needs a path");
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.to_string_lossy()))?;
    let mut spliced: Vec<OsString> = args[..2.min(args.len())].to_vec();
    for (k, v) in parse_config(&text)? {
        match (k.as_str(), v.as_str()) {
            ("bare", "true") => spliced.push("--bare".into()),
            ("bare", _) => {}
            _ => {
                spliced.push(format!("--{}", k.replace('_', "-")).into());
                spliced.push(v.into());
            }
        }
    }
    spliced.extend(args.into_iter().skip(2));
    Ok(spliced)
}

fn main() -> Result<()> {
    let cli = Cli::parse_from(expand_config(std::env::args_os().collect())?);
    let Cmd::Run(a) = cli.cmd;
    if a.iters == 0 {
        bail!("--iters must be at least 1");
    }
    let workload = WorkloadSpec {
        kind: a.workload,
        iters: a.iters,
        payload: a.payload,
        barrier_period: a.barrier_period,
        work: a.work,
    };
    let cfg = ExperimentConfig {
        workload,
        n_comp: a.ncomp,
        degrees: a.rdegree,
        sched: match a.sched {
            Sched::Det => SchedMode::Deterministic,
            Sched::Threads => SchedMode::Threaded,
        },
        faults: a.faults,
        reps: a.reps,
        seed: a.seed,
        mode: if a.bare { FtMode::Bare } else { FtMode::Full },
        detection_latency: a.latency,
    };
    let rows = run_experiment(&cfg)?;
    match a.out {
        Some(path) => write_report(&rows, &path)?,
        None => write_csv(&rows, io::stdout().lock())?,
    }
    Ok(())
}
