//! Replica-aware, logged point-to-point communication.
//!
//! A send is logged when posted, fanned out to the destination incarnations
//! chosen by [`WorldLayout::route_peer`](crate::WorldLayout::route_peer) and
//! tested in a loop that re-checks the fault plane on every iteration. A
//! receive listens to the source incarnation chosen by `route_source`, drops
//! envelopes named in the skip set or already received, and records the id.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::rank::{Delivery, FtMode, Rank};
use crate::transport::{MsgKind, SendHandle, Test};
use crate::{Interrupted, PhysRank, SendId, UserRank};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SendLogEntry {
    pub send_id: SendId,
    pub dest: UserRank,
    pub tag: u64,
    pub payload: Vec<u8>,
    pub completed: bool,
}

/// Ids received from one source user: everything up to `floor`, plus `above`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecvRecord {
    pub floor: SendId,
    pub above: BTreeSet<SendId>,
}

impl RecvRecord {
    pub fn contains(&self, id: SendId) -> bool {
        id <= self.floor || self.above.contains(&id)
    }

    fn insert(&mut self, id: SendId) {
        self.above.insert(id);
        while self.above.remove(&(self.floor + 1)) {
            self.floor += 1;
        }
    }

    /// Folds everything received into the floor.
    pub(crate) fn compact(&mut self) {
        if let Some(&max) = self.above.last() {
            self.floor = self.floor.max(max);
        }
        self.above.clear();
    }
}

#[derive(Debug, Default)]
pub struct P2pState {
    pub(crate) sent: BTreeMap<UserRank, SendId>,
    pub(crate) log: Vec<SendLogEntry>,
    pub(crate) recv: BTreeMap<UserRank, RecvRecord>,
    pub(crate) skip: BTreeSet<(UserRank, SendId)>,
    requests: HashMap<u64, ReqState>,
    next_req: u64,
}

impl P2pState {
    pub fn log(&self) -> &[SendLogEntry] {
        &self.log
    }

    pub fn skip_set(&self) -> &BTreeSet<(UserRank, SendId)> {
        &self.skip
    }

    pub fn recv_record(&self, src: UserRank) -> Option<&RecvRecord> {
        self.recv.get(&src)
    }

    pub fn sent_to(&self, dest: UserRank) -> SendId {
        self.sent.get(&dest).copied().unwrap_or(0)
    }
}

/// Token for a non-blocking operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Request(u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReqStatus {
    Pending,
    Sent,
    Received(Vec<u8>),
}

#[derive(Debug)]
enum ReqState {
    Send {
        dest: UserRank,
        send_id: SendId,
        handles: Vec<SendHandle>,
        /// Handler runs when posted; any later run has resent the message.
        runs: usize,
        done: bool,
    },
    Recv {
        src: UserRank,
        tag: u64,
        payload: Option<Vec<u8>>,
    },
}

impl Rank {
    pub fn p2p_state(&self) -> &P2pState {
        &self.p2p
    }

    fn next_send_id(&mut self, dest: UserRank) -> SendId {
        let c = self.p2p.sent.entry(dest).or_insert(0);
        *c += 1;
        *c
    }

    fn eworld_phys(&self, position: usize) -> PhysRank {
        self.place.phys_at(position)
    }

    /// Physical processes this incarnation must deliver a message for `dest` to.
    pub(crate) fn send_targets(&self, dest: UserRank) -> Vec<PhysRank> {
        let route = self
            .place
            .layout()
            .route_peer(dest, self.caller)
            .expect("destination within the user world");
        route.targets.iter().map(|&p| self.eworld_phys(p)).collect()
    }

    pub(crate) fn source_phys(&self, src: UserRank) -> PhysRank {
        let pos = self
            .place
            .layout()
            .route_source(src, self.caller)
            .expect("source within the user world");
        self.eworld_phys(pos)
    }

    async fn post_user_send(
        &mut self,
        dest: UserRank,
        tag: u64,
        payload: &[u8],
    ) -> (SendId, Vec<SendHandle>) {
        assert!(dest < self.user_size(), "destination {dest} out of range");
        let id = self.next_send_id(dest);
        if self.mode == FtMode::Full {
            self.p2p.log.push(SendLogEntry {
                send_id: id,
                dest,
                tag,
                payload: payload.to_vec(),
                completed: false,
            });
        }
        let mut handles = Vec::new();
        if self.check().is_ok() {
            let comm = self.comms.eworld.id;
            for dst in self.send_targets(dest) {
                handles.push(self.post_raw(dst, MsgKind::P2p, comm, tag, id, payload.to_vec()).await);
            }
        }
        (id, handles)
    }

    fn mark_completed(&mut self, id: SendId, dest: UserRank) {
        if let Some(e) = self.p2p.log.iter_mut().rev().find(|e| e.send_id == id && e.dest == dest) {
            e.completed = true;
        }
    }

    /// Applies skip and duplicate suppression to a matched envelope.
    fn accept(&mut self, src: UserRank, id: SendId, tag: u64, payload: Vec<u8>) -> Option<Vec<u8>> {
        if self.mode == FtMode::Full {
            if self.p2p.skip.remove(&(src, id)) {
                self.stats.skipped += 1;
                return None;
            }
            let rec = self.p2p.recv.entry(src).or_default();
            if rec.contains(id) {
                self.stats.duplicates_dropped += 1;
                return None;
            }
            rec.insert(id);
        }
        self.trace.push(Delivery { src, send_id: id, tag });
        Some(payload)
    }

    /// One matching attempt for a receive from user `src`.
    fn poll_recv(&mut self, src: UserRank, tag: u64) -> Option<Vec<u8>> {
        let from = self.source_phys(src);
        let h = self.ep.post_recv(from, MsgKind::P2p, self.comms.eworld.id, tag);
        while let Test::Complete(env) = self.ep.test_recv(&h) {
            if let Some(p) = self.accept(src, env.send_id, env.tag, env.payload) {
                return Some(p);
            }
        }
        None
    }

    /// Blocking send to user rank `dest`.
    pub async fn ft_send(&mut self, dest: UserRank, tag: u64, payload: &[u8]) -> Result<(), Interrupted> {
        let (id, mut handles) = self.post_user_send(dest, tag, payload).await;
        loop {
            if self.fault_pending() {
                // The log entry guarantees a resend during recovery.
                self.handle_fault().await?;
                for h in handles.drain(..) {
                    self.ep.forget(h);
                }
                break;
            }
            handles.retain(|&h| self.ep.test_send(h) != Test::Complete(()));
            if handles.is_empty() {
                break;
            }
            self.ep.idle().await;
        }
        self.mark_completed(id, dest);
        Ok(())
    }

    /// Blocking receive from user rank `src`.
    pub async fn ft_recv(&mut self, src: UserRank, tag: u64) -> Result<Vec<u8>, Interrupted> {
        assert!(src < self.user_size(), "source {src} out of range");
        loop {
            if self.fault_pending() {
                self.handle_fault().await?;
                continue;
            }
            if let Some(p) = self.poll_recv(src, tag) {
                return Ok(p);
            }
            self.ep.idle().await;
        }
    }

    pub async fn ft_isend(&mut self, dest: UserRank, tag: u64, payload: &[u8]) -> Request {
        let (send_id, handles) = self.post_user_send(dest, tag, payload).await;
        let id = self.p2p.next_req;
        self.p2p.next_req += 1;
        let done = handles.is_empty() && self.check().is_ok();
        self.p2p.requests.insert(
            id,
            ReqState::Send {
                dest,
                send_id,
                handles,
                runs: self.stats.handler_runs,
                done,
            },
        );
        if done {
            self.mark_completed(send_id, dest);
        }
        Request(id)
    }

    pub fn ft_irecv(&mut self, src: UserRank, tag: u64) -> Request {
        assert!(src < self.user_size(), "source {src} out of range");
        let id = self.p2p.next_req;
        self.p2p.next_req += 1;
        self.p2p.requests.insert(
            id,
            ReqState::Recv {
                src,
                tag,
                payload: None,
            },
        );
        Request(id)
    }

    /// One iteration of the test loop for `req`. Completed requests keep
    /// reporting their status until released by [`Self::ft_wait`].
    pub async fn ft_test(&mut self, req: Request) -> Result<ReqStatus, Interrupted> {
        if self.fault_pending() {
            self.handle_fault().await?;
        }
        let state = self.p2p.requests.remove(&req.0).expect("unknown request");
        let (state, status) = match state {
            ReqState::Send {
                dest,
                send_id,
                mut handles,
                runs,
                mut done,
            } => {
                if !done && self.stats.handler_runs > runs {
                    for h in handles.drain(..) {
                        self.ep.forget(h);
                    }
                    done = true;
                }
                if !done {
                    handles.retain(|&h| self.ep.test_send(h) != Test::Complete(()));
                    done = handles.is_empty();
                }
                let status = if done { ReqStatus::Sent } else { ReqStatus::Pending };
                (
                    ReqState::Send {
                        dest,
                        send_id,
                        handles,
                        runs,
                        done,
                    },
                    status,
                )
            }
            ReqState::Recv { src, tag, mut payload } => {
                if payload.is_none() {
                    payload = self.poll_recv(src, tag);
                }
                let status = match &payload {
                    Some(p) => ReqStatus::Received(p.clone()),
                    None => ReqStatus::Pending,
                };
                (ReqState::Recv { src, tag, payload }, status)
            }
        };
        self.p2p.requests.insert(req.0, state);
        Ok(status)
    }

    /// Completes `req` and releases it.
    pub async fn ft_wait(&mut self, req: Request) -> Result<ReqStatus, Interrupted> {
        loop {
            let status = self.ft_test(req).await?;
            if status != ReqStatus::Pending {
                self.release(req);
                return Ok(status);
            }
            self.ep.idle().await;
        }
    }

    pub async fn ft_waitall(&mut self, reqs: &[Request]) -> Result<Vec<ReqStatus>, Interrupted> {
        let mut out = vec![ReqStatus::Pending; reqs.len()];
        loop {
            let mut pending = false;
            for (i, &r) in reqs.iter().enumerate() {
                if out[i] == ReqStatus::Pending {
                    out[i] = self.ft_test(r).await?;
                    pending |= out[i] == ReqStatus::Pending;
                }
            }
            if !pending {
                for &r in reqs {
                    self.release(r);
                }
                return Ok(out);
            }
            self.ep.idle().await;
        }
    }

    fn release(&mut self, req: Request) {
        if let Some(ReqState::Send { dest, send_id, .. }) = self.p2p.requests.remove(&req.0) {
            self.mark_completed(send_id, dest);
        }
    }
}
