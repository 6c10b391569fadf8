//! Per-rank runtime context.
//!
//! A [`Rank`] wraps the transport endpoint with the replication layout, the
//! communicator set and the message/collective logs. Point-to-point,
//! collective and recovery operations are implemented on it in [`crate::p2p`],
//! [`crate::collective`] and [`crate::recovery`].

use crate::collective::CollState;
use crate::communicator::CommunicatorSet;
use crate::layout::{Caller, Placement, Role, WorldLayout};
use crate::p2p::P2pState;
use crate::transport::{Endpoint, MsgKind, SendHandle, Test};
use crate::{Interrupted, PhysRank, SendId, Time, UserRank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FtMode {
    /// Logging, failure checks and recovery.
    #[default]
    Full,
    /// Plain communication on the same transport; no logs, no checks.
    Bare,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RankStats {
    pub handler_runs: usize,
    pub resends: usize,
    /// Deliveries suppressed through the skip set.
    pub skipped: usize,
    /// Deliveries suppressed as already received.
    pub duplicates_dropped: usize,
    pub replays: usize,
    pub promoted: bool,
}

/// One application-level delivery, for exactly-once audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Delivery {
    pub src: UserRank,
    pub send_id: SendId,
    pub tag: u64,
}

/// Raised inside the runtime when a failure must be handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Fault;

pub struct Rank {
    pub(crate) ep: Endpoint,
    pub(crate) mode: FtMode,
    pub(crate) initial: Placement,
    pub(crate) place: Placement,
    pub(crate) comms: CommunicatorSet,
    pub(crate) me: PhysRank,
    pub(crate) caller: Caller,
    /// Agreed dead processes in kill order.
    pub(crate) dead: Vec<PhysRank>,
    /// Dead-set size being handled while inside the error handler.
    pub(crate) handling: Option<usize>,
    pub(crate) p2p: P2pState,
    pub(crate) coll: CollState,
    pub(crate) stats: RankStats,
    pub(crate) trace: Vec<Delivery>,
}

impl Rank {
    /// Binds an endpoint to the spawn-time placement of `layout`.
    pub fn new(ep: Endpoint, layout: WorldLayout, mode: FtMode) -> Self {
        let place = Placement::initial(layout);
        let me = ep.rank();
        let caller = place.caller(me).expect("endpoint rank within the layout");
        let comms = CommunicatorSet::build(&place, 0);
        Self {
            ep,
            mode,
            initial: place.clone(),
            place,
            comms,
            me,
            caller,
            dead: Vec::new(),
            handling: None,
            p2p: P2pState::default(),
            coll: CollState::default(),
            stats: RankStats::default(),
            trace: Vec::new(),
        }
    }

    pub fn user_rank(&self) -> UserRank {
        self.caller.user
    }

    pub fn user_size(&self) -> usize {
        self.place.layout().user_size()
    }

    pub fn role(&self) -> Role {
        self.caller.role
    }

    pub fn phys(&self) -> PhysRank {
        self.me
    }

    pub fn placement(&self) -> &Placement {
        &self.place
    }

    pub fn comm_set(&self) -> &CommunicatorSet {
        &self.comms
    }

    pub fn epoch(&self) -> u64 {
        self.comms.epoch
    }

    pub fn dead(&self) -> &[PhysRank] {
        &self.dead
    }

    pub fn stats(&self) -> &RankStats {
        &self.stats
    }

    pub fn trace(&self) -> &[Delivery] {
        &self.trace
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.ep
    }

    pub fn now(&self) -> Time {
        self.ep.now()
    }

    pub async fn compute(&self, units: Time) {
        self.ep.compute(units).await
    }

    /// Something failed that this rank has not handled yet.
    pub(crate) fn fault_pending(&self) -> bool {
        if self.mode == FtMode::Bare {
            return false;
        }
        match self.handling {
            Some(n) => self.ep.visible_count() > n,
            None => self.comms.oworld.is_revoked(&self.ep) || self.ep.visible_count() > self.dead.len(),
        }
    }

    pub(crate) fn check(&self) -> Result<(), Fault> {
        if self.fault_pending() {
            Err(Fault)
        } else {
            Ok(())
        }
    }

    pub(crate) async fn post_raw(
        &self,
        dst: PhysRank,
        kind: MsgKind,
        comm: u64,
        tag: u64,
        send_id: SendId,
        payload: Vec<u8>,
    ) -> SendHandle {
        let h = self.ep.post_send(dst, kind, comm, tag, send_id, payload);
        self.ep.yield_now().await;
        h
    }

    /// Waits until every send is delivered, giving up on a fault.
    pub(crate) async fn wait_sends(&self, handles: &mut Vec<SendHandle>) -> Result<(), Fault> {
        loop {
            self.check()?;
            handles.retain(|&h| self.ep.test_send(h) != Test::Complete(()));
            if handles.is_empty() {
                return Ok(());
            }
            self.ep.idle().await;
        }
    }

    pub(crate) async fn send_raw(
        &self,
        dst: PhysRank,
        kind: MsgKind,
        comm: u64,
        tag: u64,
        payload: Vec<u8>,
    ) -> Result<(), Fault> {
        self.check()?;
        let h = self.post_raw(dst, kind, comm, tag, 0, payload).await;
        self.wait_sends(&mut vec![h]).await
    }

    pub(crate) async fn recv_raw(
        &self,
        src: PhysRank,
        kind: MsgKind,
        comm: u64,
        tag: u64,
    ) -> Result<Vec<u8>, Fault> {
        let h = self.ep.post_recv(src, kind, comm, tag);
        loop {
            self.check()?;
            if let Test::Complete(env) = self.ep.test_recv(&h) {
                return Ok(env.payload);
            }
            self.ep.idle().await;
        }
    }

    /// Final synchronization: a full barrier, then waiting until every live
    /// rank is done and every failure has been handled everywhere.
    pub async fn finalize(&mut self) -> Result<(), Interrupted> {
        self.ft_barrier().await?;
        self.ep.mark_done();
        loop {
            if self.ep.finished() {
                return Ok(());
            }
            if self.fault_pending() {
                self.handle_fault().await?;
                continue;
            }
            self.ep.idle().await;
        }
    }
}

pub(crate) fn encode_u64s(values: &[u64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn decode_u64s(bytes: &[u8]) -> Vec<u64> {
    bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

/// Length-prefixed concatenation of byte blocks.
pub(crate) fn encode_blocks(blocks: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(blocks.len() as u64).to_le_bytes());
    for b in blocks {
        out.extend_from_slice(&(b.len() as u64).to_le_bytes());
        out.extend_from_slice(b);
    }
    out
}

pub(crate) fn decode_blocks(bytes: &[u8]) -> Vec<Vec<u8>> {
    let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes")) as usize;
    let n = word(0);
    let mut at = 8;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = word(at);
        at += 8;
        out.push(bytes[at..at + len].to_vec());
        at += len;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_codec_roundtrip() {
        let blocks = vec![vec![], vec![1, 2, 3], vec![9; 20]];
        assert_eq!(decode_blocks(&encode_blocks(&blocks)), blocks);
        assert_eq!(decode_blocks(&encode_blocks(&[])), Vec::<Vec<u8>>::new());
    }

    #[test]
    fn u64_codec_roundtrip() {
        assert_eq!(decode_u64s(&encode_u64s(&[0, u64::MAX, 7])), vec![0, u64::MAX, 7]);
    }
}
