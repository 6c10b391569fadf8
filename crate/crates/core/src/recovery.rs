//! The error handler: agree on the dead set, repair the world, recover lost
//! point-to-point messages and replay collectives.
//!
//! Survivors agree on a dead set by exchanging views keyed by its size; since
//! every rank observes kills in the same order, equal sizes mean equal sets.
//! The size doubles as the new epoch. The repaired placement is a pure
//! function of the spawn placement and the cumulative dead set, so ranks that
//! handled failures in different batches still end with identical worlds.

use std::collections::{BTreeMap, BTreeSet};

use crate::communicator::{CommunicatorSet, CODE_AGREE, CODE_RECOVERY};
use crate::error::Interrupted;
use crate::layout::{Placement, Role, WorldLayout};
use crate::rank::{decode_u64s, encode_u64s, Fault, Rank};
use crate::transport::{comm_id, MsgKind, Test};
use crate::{PhysRank, SendId, UserRank};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepairPlan {
    pub dead: BTreeSet<PhysRank>,
    /// Dead computational process → the replica taking its position.
    pub promotions: BTreeMap<PhysRank, PhysRank>,
    pub new_layout: WorldLayout,
    /// Physical processes in their new world positions.
    pub order: Vec<PhysRank>,
}

impl RepairPlan {
    pub fn placement(&self) -> Placement {
        Placement::new(self.new_layout.clone(), self.order.clone()).expect("plan is consistent")
    }
}

/// Repairs `initial` after the deaths in `dead` (kill order).
///
/// A live computational process keeps its position. A dead one is replaced by
/// its live replica. Surviving replicas of live partners keep their relative
/// order. If some user rank has no live incarnation, the error names the
/// earliest kill prefix that was already fatal.
pub fn repair_plan(initial: &Placement, dead: &[PhysRank]) -> Result<RepairPlan, Interrupted> {
    let dead_set: BTreeSet<PhysRank> = dead.iter().copied().collect();
    let layout = initial.layout();
    let n_comp = layout.n_comp();
    let mut cmp = Vec::with_capacity(n_comp);
    let mut reps = Vec::new();
    let mut promotions = BTreeMap::new();
    let mut fatal: Option<(usize, UserRank)> = None;
    for u in 0..n_comp {
        let c = initial.cmp_phys(u);
        let r = initial.rep_phys(u).filter(|r| !dead_set.contains(r));
        match (dead_set.contains(&c), r) {
            (false, r) => {
                cmp.push(c);
                if let Some(r) = r {
                    reps.push((initial.position_of(r).expect("replica placed"), r, u));
                }
            }
            (true, Some(r)) => {
                cmp.push(r);
                promotions.insert(c, r);
            }
            (true, None) => {
                let k = initial
                    .incarnations(u)
                    .iter()
                    .map(|p| dead.iter().position(|d| d == p).expect("incarnation is dead") + 1)
                    .max()
                    .expect("at least one incarnation");
                if fatal.is_none_or(|(best, _)| k < best) {
                    fatal = Some((k, u));
                }
            }
        }
    }
    if let Some((k, user)) = fatal {
        return Err(Interrupted { user, dead: k });
    }
    reps.sort();
    let new_layout = WorldLayout::from_pairs(n_comp, reps.iter().map(|&(_, _, u)| u).collect())
        .expect("surviving pairs are a valid layout");
    let order = cmp.into_iter().chain(reps.into_iter().map(|(_, r, _)| r)).collect();
    Ok(RepairPlan {
        dead: dead_set,
        promotions,
        new_layout,
        order,
    })
}

/// What one rank learned during message recovery.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecoveryExchange {
    /// Per world position: ids that peer holds above its floor, for me as source.
    pub recv_counts: Vec<u64>,
    pub recv_id_lists: Vec<Vec<SendId>>,
    pub resent: usize,
    pub skip_additions: Vec<(UserRank, SendId)>,
}

enum Abort {
    Fault,
    Interrupted(Interrupted),
}

impl From<Fault> for Abort {
    fn from(_: Fault) -> Self {
        Abort::Fault
    }
}

const TAG_VIEW: u64 = 0;
const TAG_COUNTS: u64 = 1;
const TAG_IDS: u64 = 2;
const TAG_FRONTIER: u64 = 3;

impl Rank {
    /// Runs the error handler to completion. Further failures during recovery
    /// restart it; an unrecoverable dead set is returned as an error.
    pub async fn error_handler(&mut self) -> Result<(), Interrupted> {
        self.handle_fault().await
    }

    pub(crate) async fn handle_fault(&mut self) -> Result<(), Interrupted> {
        self.stats.handler_runs += 1;
        self.ep.set_recovering(true);
        let out = loop {
            match self.recover_once().await {
                Ok(()) => break Ok(()),
                Err(Abort::Fault) => continue,
                Err(Abort::Interrupted(i)) => break Err(i),
            }
        };
        self.handling = None;
        self.ep.set_recovering(false);
        if out.is_ok() {
            self.ep.set_handled(self.dead.len());
        }
        out
    }

    async fn recover_once(&mut self) -> Result<(), Abort> {
        if !self.comms.oworld.is_revoked(&self.ep) {
            self.comms.oworld.revoke(&self.ep);
        }
        let dead = self.agree().await;
        let plan = repair_plan(&self.initial, &dead).map_err(Abort::Interrupted)?;
        self.apply_repair(dead, &plan);
        self.recover_p2p().await?;
        self.replay_collectives().await?;
        Ok(())
    }

    /// Shrink agreement: returns a dead set every survivor also decides on,
    /// unless a later failure forces everyone into another round.
    async fn agree(&mut self) -> Vec<PhysRank> {
        let n = self.ep.world_size();
        'round: loop {
            let d = self.ep.visible_dead();
            if d.len() <= self.dead.len() {
                self.ep.idle().await;
                continue;
            }
            let c = d.len();
            let comm = comm_id(c as u64, CODE_AGREE);
            let others: Vec<PhysRank> = (0..n).filter(|p| *p != self.me && !d.contains(p)).collect();
            for &p in &others {
                let h = self.ep.post_send(p, MsgKind::Control, comm, TAG_VIEW, 0, vec![]);
                self.ep.forget(h);
            }
            let mut heard = vec![false; n];
            loop {
                if self.ep.visible_count() > c {
                    continue 'round;
                }
                for &p in &others {
                    if !heard[p] {
                        let h = self.ep.post_recv(p, MsgKind::Control, comm, TAG_VIEW);
                        heard[p] = matches!(self.ep.test_recv(&h), Test::Complete(_));
                    }
                }
                if others.iter().all(|&p| heard[p]) {
                    return d;
                }
                self.ep.idle().await;
            }
        }
    }

    fn apply_repair(&mut self, dead: Vec<PhysRank>, plan: &RepairPlan) {
        let epoch = dead.len() as u64;
        self.handling = Some(dead.len());
        self.dead = dead;
        let was_replica = self.caller.role == Role::Replica;
        self.place = plan.placement();
        self.caller = self.place.caller(self.me).expect("survivor is placed");
        if was_replica && self.caller.role == Role::Computational {
            self.stats.promoted = true;
        }
        self.comms = CommunicatorSet::regenerate(&self.place, epoch);
        self.ep.set_epoch(epoch);
    }

    /// Repairs the world for `dead` (kill order) without any communication.
    pub fn repair_world(&mut self, dead: Vec<PhysRank>) -> Result<RepairPlan, Interrupted> {
        let plan = repair_plan(&self.initial, &dead)?;
        self.apply_repair(dead, &plan);
        self.handling = None;
        Ok(plan)
    }

    /// All-to-all over the current world on the recovery plane.
    async fn exchange(&self, tag: u64, blocks: Vec<Vec<u8>>) -> Result<Vec<Vec<u8>>, Fault> {
        let world = self.place.order().to_vec();
        let comm = comm_id(self.comms.epoch, CODE_RECOVERY);
        let mut handles = Vec::new();
        let mut out = vec![Vec::new(); world.len()];
        for (pos, &p) in world.iter().enumerate() {
            if p == self.me {
                out[pos] = blocks[pos].clone();
            } else {
                self.check()?;
                handles.push(self.post_raw(p, MsgKind::Control, comm, tag, 0, blocks[pos].clone()).await);
            }
        }
        for (pos, &p) in world.iter().enumerate() {
            if p != self.me {
                out[pos] = self.recv_raw(p, MsgKind::Control, comm, tag).await?;
            }
        }
        self.wait_sends(&mut handles).await?;
        Ok(out)
    }

    /// Counts and ids exchange, resend of missing messages, skip-set rebuild.
    pub(crate) async fn recover_p2p(&mut self) -> Result<RecoveryExchange, Fault> {
        let world = self.place.order().to_vec();
        let users: Vec<UserRank> = world
            .iter()
            .map(|&p| self.place.caller(p).expect("placed").user)
            .collect();
        let empty = Default::default();
        let mut headers = Vec::with_capacity(world.len());
        let mut lists = Vec::with_capacity(world.len());
        for &u in &users {
            let rec = self.p2p.recv.get(&u).unwrap_or(&empty);
            let ids: Vec<SendId> = rec.above.iter().copied().collect();
            headers.push(encode_u64s(&[ids.len() as u64, rec.floor, self.p2p.sent_to(u)]));
            lists.push(encode_u64s(&ids));
        }
        let headers: Vec<Vec<u64>> = self
            .exchange(TAG_COUNTS, headers)
            .await?
            .iter()
            .map(|b| decode_u64s(b))
            .collect();
        let lists: Vec<Vec<u64>> = self
            .exchange(TAG_IDS, lists)
            .await?
            .iter()
            .map(|b| decode_u64s(b))
            .collect();
        for (h, l) in headers.iter().zip(&lists) {
            assert_eq!(h[0] as usize, l.len(), "recovery id list disagrees with its count");
        }

        let position: BTreeMap<PhysRank, usize> = world.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        let comm = self.comms.eworld.id;
        let mut handles = Vec::new();
        let mut resent = 0;
        let log = self.p2p.log.clone();
        for e in &log {
            for dst in self.send_targets(e.dest) {
                let pos = position[&dst];
                let (floor, list) = (headers[pos][1], &lists[pos]);
                if e.send_id > floor && !list.contains(&e.send_id) {
                    self.check()?;
                    handles.push(
                        self.post_raw(dst, MsgKind::P2p, comm, e.tag, e.send_id, e.payload.clone())
                            .await,
                    );
                    resent += 1;
                }
            }
        }
        self.wait_sends(&mut handles).await?;
        self.stats.resends += resent;

        let mut skip = BTreeSet::new();
        for s in 0..self.user_size() {
            let sent = headers[position[&self.source_phys(s)]][2];
            if let Some(rec) = self.p2p.recv.get(&s) {
                skip.extend((sent + 1..=rec.floor).map(|id| (s, id)));
                skip.extend(rec.above.range(sent + 1..).map(|&id| (s, id)));
            }
        }
        let skip_additions = skip.difference(&self.p2p.skip).copied().collect();
        self.p2p.skip = skip;
        Ok(RecoveryExchange {
            recv_counts: headers.iter().map(|h| h[0]).collect(),
            recv_id_lists: lists,
            resent,
            skip_additions,
        })
    }

    /// Agrees on the collective frontier and replays logged collectives past it.
    pub(crate) async fn replay_collectives(&mut self) -> Result<usize, Fault> {
        let n = self.place.order().len();
        let mine = encode_u64s(&[self.coll.last]);
        let lasts = self.exchange(TAG_FRONTIER, vec![mine; n]).await?;
        let frontier = lasts.iter().map(|b| decode_u64s(b)[0]).min().unwrap_or(self.coll.last);
        let pending: Vec<_> = self.coll.log.iter().filter(|e| e.id > frontier).cloned().collect();
        assert_eq!(
            pending.len() as u64,
            self.coll.last - frontier,
            "collective log lacks entries past the frontier"
        );
        for e in &pending {
            self.run_collective(e.id, e.op, &e.args).await?;
            self.stats.replays += 1;
        }
        Ok(pending.len())
    }
}
