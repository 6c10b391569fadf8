//! Degree sweeps with repetitions, fault campaigns and CSV reports.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use ftrep_core::faultinject::{mtti, FaultSchedule, RunRecord, WeibullParams};
use ftrep_core::{FtMode, SchedMode, Time, WorldLayout};

use crate::runner::{run_workload, RunOptions};
use crate::workload::WorkloadSpec;
use crate::BenchError;

#[derive(Debug, Clone, PartialEq)]
pub enum FaultSpec {
    None,
    Weibull { shape: f64, scale: f64 },
    File(PathBuf),
}

impl FromStr for FaultSpec {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, BenchError> {
        let bad = || BenchError::InvalidSpec(format!("bad fault spec {s:?}; want none, weibull:k,λ or file:path"));
        if s == "none" {
            return Ok(Self::None);
        }
        if let Some(path) = s.strip_prefix("file:") {
            return Ok(Self::File(path.into()));
        }
        let rest = s.strip_prefix("weibull:").ok_or_else(bad)?;
        let (k, l) = rest.split_once(',').ok_or_else(bad)?;
        let shape = k.trim().parse().map_err(|_| bad())?;
        let scale = l.trim().parse().map_err(|_| bad())?;
        WeibullParams::new(shape, scale, 0)?;
        Ok(Self::Weibull { shape, scale })
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub workload: WorkloadSpec,
    pub n_comp: usize,
    pub degrees: Vec<f64>,
    pub sched: SchedMode,
    pub faults: FaultSpec,
    pub reps: usize,
    pub seed: u64,
    pub mode: FtMode,
    pub detection_latency: Time,
}

impl ExperimentConfig {
    pub fn new(workload: WorkloadSpec, n_comp: usize, degrees: Vec<f64>) -> Self {
        Self {
            workload,
            n_comp,
            degrees,
            sched: SchedMode::Deterministic,
            faults: FaultSpec::None,
            reps: 1,
            seed: 1,
            mode: FtMode::Full,
            detection_latency: RunOptions::default().detection_latency,
        }
    }

    fn validate(&self) -> Result<(), BenchError> {
        if self.reps == 0 {
            return Err(BenchError::InvalidSpec("repetitions must be at least 1".into()));
        }
        if self.degrees.is_empty() {
            return Err(BenchError::InvalidSpec("no replication degree given".into()));
        }
        self.workload.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub workload: String,
    pub ncomp: usize,
    pub rdegree: f64,
    pub reps: usize,
    pub useful_time_mean: f64,
    pub useful_time_err: f64,
    pub handler_time_mean: f64,
    pub interruptions: usize,
    pub mtti: f64,
    pub mtti_lower_bound: bool,
}

/// Fault-free runs are this many times shorter than the injection horizon.
const HORIZON_FACTOR: u64 = 20;

/// Seed for repetition `rep`; shared across degrees so runs are paired.
pub fn rep_seed(base: u64, rep: usize) -> u64 {
    base.wrapping_add((rep as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ReportRow>, BenchError> {
    cfg.validate()?;
    let file_schedule = match &cfg.faults {
        FaultSpec::File(path) => Some(
            fs::read_to_string(path)
                .map_err(|source| BenchError::Io {
                    path: path.clone(),
                    source,
                })?
                .parse::<FaultSchedule>()?,
        ),
        _ => None,
    };
    let mut rows = Vec::new();
    for &deg in &cfg.degrees {
        let layout = WorldLayout::build(cfg.n_comp, deg)?;
        let opts = |seed| RunOptions {
            sched: cfg.sched,
            seed,
            mode: cfg.mode,
            detection_latency: cfg.detection_latency,
            ..RunOptions::default()
        };
        let horizon = match cfg.faults {
            FaultSpec::Weibull { .. } => {
                let pilot = run_workload(&cfg.workload, &layout, &[], &opts(cfg.seed))?;
                (pilot.useful_time.max(1) * HORIZON_FACTOR) as f64
            }
            _ => 0.0,
        };
        let mut records = Vec::new();
        let mut handler = Vec::new();
        for rep in 0..cfg.reps {
            let seed = rep_seed(cfg.seed, rep);
            let schedule = match (&cfg.faults, &file_schedule) {
                (FaultSpec::Weibull { shape, scale }, _) => {
                    FaultSchedule::weibull(&WeibullParams::new(*shape, *scale, seed)?, horizon)
                }
                (_, Some(s)) => s.clone(),
                _ => FaultSchedule::default(),
            };
            let run = run_workload(&cfg.workload, &layout, &schedule.plan(), &opts(seed))?;
            handler.push(run.handler_time as f64);
            records.push(run.record);
        }
        rows.push(summarize(cfg, deg, &records, &handler)?);
    }
    Ok(rows)
}

fn summarize(cfg: &ExperimentConfig, deg: f64, records: &[RunRecord], handler: &[f64]) -> Result<ReportRow, BenchError> {
    let m = mtti::<f64>(records)?;
    Ok(ReportRow {
        workload: cfg.workload.kind.to_string(),
        ncomp: cfg.n_comp,
        rdegree: deg,
        reps: records.len(),
        useful_time_mean: m.mean,
        useful_time_err: m.std_err,
        handler_time_mean: handler.iter().sum::<f64>() / handler.len() as f64,
        interruptions: m.interrupted,
        mtti: m.mean,
        mtti_lower_bound: m.lower_bound,
    })
}

pub fn write_csv<W: Write>(rows: &[ReportRow], out: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_report(rows: &[ReportRow], path: &Path) -> Result<(), BenchError> {
    let file = fs::File::create(path).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_csv(rows, file)
}

/// Parses flat `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, BenchError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| BenchError::Config {
            line: i + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
