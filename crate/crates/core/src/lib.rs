//! A message-passing runtime that survives process failures through partial
//! process replication.
//!
//! Each application rank ("user rank") runs as a computational process and,
//! optionally, a replica executing the identical operation sequence. The
//! runtime routes point-to-point traffic to both incarnations, runs
//! collectives among computational processes and forwards results to
//! replicas, detects failures with revoke/shrink semantics, and repairs the
//! world by dropping dead replicas or promoting a replica into the slot of its
//! dead partner. Lost traffic is recovered from sender-side logs and
//! collectives are replayed from per-rank collective logs.
//!
//! Ranks are independent execution contexts (async tasks) over an in-process
//! [`transport`], driven either by a deterministic logical-time scheduler or by
//! one OS thread per rank.
//!
//! Numeric reductions and the fault statistics are generic over the scalar
//! type (see [`scalar`]); the aliases below fix the common instantiations.

pub mod collective;
pub mod communicator;
pub mod error;
pub mod faultinject;
pub mod layout;
pub mod p2p;
pub mod procimage;
pub mod rank;
pub mod recovery;
pub mod scalar;
pub mod transport;

pub use error::{Interrupted, LayoutError, RuntimeError};
pub use layout::{Caller, Placement, Role, RouteMode, RouteSet, WorldLayout};
pub use rank::{FtMode, Rank, RankStats};
pub use transport::{Endpoint, SchedMode, TransportConfig};

/// Physical process id: the world rank a process was spawned with. It never
/// changes, even when repairs shuffle world positions.
pub type PhysRank = usize;
/// Application-visible rank, in `0..n_comp`.
pub type UserRank = usize;
/// Logical time. Scheduler steps in deterministic mode, microseconds with
/// the threaded scheduler.
pub type Time = u64;
/// Per-(sender, receiver) stream sequence number, starting at 1.
pub type SendId = u64;

pub type WeibullF64 = faultinject::WeibullParams<f64>;
pub type WeibullF32 = faultinject::WeibullParams<f32>;
pub type MttiF64 = faultinject::MttiEstimate<f64>;
