use thiserror::Error;

use crate::{PhysRank, Time, UserRank};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LayoutError {
    #[error("a world needs at least one computational process")]
    NoComputational,
    #[error("replication degree {0} is outside [0, 1]")]
    DegreeOutOfRange(f64),
    #[error("world rank {0} is not part of the layout")]
    UnknownRank(usize),
    #[error("destination user rank {dest} out of range (size {size})")]
    DestOutOfRange { dest: UserRank, size: usize },
    #[error("user rank {0} has no replica incarnation")]
    NoReplica(UserRank),
    #[error("inconsistent replica pairing: {0}")]
    BadPairing(String),
}

/// Raised when some user rank lost every incarnation. The job cannot
/// continue and must restart from an external checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("application interrupted: user rank {user} has no live incarnation (dead set size {dead})")]
pub struct Interrupted {
    pub user: UserRank,
    pub dead: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuntimeError {
    #[error("deadlock at time {time}: every live rank is blocked with no pending event")]
    Deadlock { time: Time, blocked: Vec<PhysRank> },
    #[error("step limit {0} exceeded")]
    StepLimit(u64),
    #[error("kill trigger unsupported by the threaded scheduler: {0}")]
    UnsupportedTrigger(String),
    #[error("rank {0} panicked")]
    RankPanicked(PhysRank),
}
