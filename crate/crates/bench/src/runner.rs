//! Runs one workload on one world and collects checksums and timings.

use ftrep_core::faultinject::RunRecord;
use ftrep_core::rank::Delivery;
use ftrep_core::transport::{spawn_world, ComputeModel, InFlightPolicy, PlannedKill};
use ftrep_core::{FtMode, Placement, Rank, RankStats, SchedMode, Time, TransportConfig, WorldLayout};

use crate::workload::{self, WorkloadSpec};
use crate::BenchError;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub sched: SchedMode,
    pub seed: u64,
    pub mode: FtMode,
    pub detection_latency: Time,
    pub wire_jitter: Time,
    pub in_flight: InFlightPolicy,
    pub compute: ComputeModel,
}

impl Default for RunOptions {
    fn default() -> Self {
        let t = TransportConfig::default();
        Self {
            sched: t.sched,
            seed: t.seed,
            mode: FtMode::Full,
            detection_latency: t.detection_latency,
            wire_jitter: t.wire_jitter,
            in_flight: t.in_flight,
            compute: t.compute,
        }
    }
}

impl RunOptions {
    fn transport(&self) -> TransportConfig {
        TransportConfig {
            sched: self.sched,
            seed: self.seed,
            detection_latency: self.detection_latency,
            wire_jitter: self.wire_jitter,
            in_flight: self.in_flight,
            compute: self.compute,
            ..TransportConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct RankOutcome {
    pub checksum: u64,
    pub trace: Vec<Delivery>,
    pub stats: RankStats,
}

#[derive(Debug, Clone)]
pub struct WorkloadRun {
    /// Per user rank; `None` if the run was interrupted.
    pub checksums: Option<Vec<u64>>,
    /// Per physical process; `None` for killed processes.
    pub ranks: Vec<Option<RankOutcome>>,
    pub record: RunRecord,
    pub end_time: Time,
    pub handler_time: Time,
    pub useful_time: Time,
    pub steps: u64,
    pub schedule_digest: u64,
}

pub fn run_workload(
    spec: &WorkloadSpec,
    layout: &WorldLayout,
    faults: &[PlannedKill],
    opts: &RunOptions,
) -> Result<WorkloadRun, BenchError> {
    spec.validate()?;
    let mode = opts.mode;
    let report = spawn_world(layout.world_size(), opts.transport(), faults, |ep| async move {
        let mut r = Rank::new(ep, layout.clone(), mode);
        let checksum = workload::run(&mut r, spec).await?;
        r.finalize().await?;
        Ok(RankOutcome {
            checksum,
            trace: r.trace().to_vec(),
            stats: r.stats().clone(),
        })
    })?;
    let initial = Placement::initial(layout.clone());
    let record = RunRecord::from_report(&report, &initial);
    let checksums = if report.interrupted.is_some() {
        None
    } else {
        let mut by_user = vec![None; layout.n_comp()];
        for (p, out) in report.outputs.iter().enumerate() {
            let Some(out) = out else { continue };
            let user = initial.caller(p)?.user;
            match by_user[user] {
                Some(c) if c != out.checksum => return Err(BenchError::Divergence { user }),
                _ => by_user[user] = Some(out.checksum),
            }
        }
        Some(
            by_user
                .into_iter()
                .enumerate()
                .map(|(user, c)| c.ok_or(BenchError::Divergence { user }))
                .collect::<Result<_, _>>()?,
        )
    };
    Ok(WorkloadRun {
        checksums,
        ranks: report.outputs,
        record,
        end_time: report.end_time,
        handler_time: report.handler_time,
        useful_time: report.useful_time,
        steps: report.steps,
        schedule_digest: report.schedule_digest,
    })
}
