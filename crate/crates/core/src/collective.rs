//! Replica-aware collectives.
//!
//! Computational ranks run the operation among themselves (binomial trees for
//! broadcast and reduction, direct pairwise exchange for all-to-all) and then
//! forward their result to their replica, if any. Replicas only receive the
//! forwarded result. Barriers span the whole world, replicas included. Every
//! completed collective is logged with its arguments so it can be replayed
//! after a failure.

use crate::communicator::CODE_CMP;
use crate::layout::Role;
use crate::rank::{decode_blocks, encode_blocks, Fault, FtMode, Rank};
use crate::scalar::{combine_bytes, decode, encode, Dtype, Element, ReduceOp};
use crate::transport::{comm_id, MsgKind};
use crate::{Interrupted, PhysRank, UserRank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CollOp {
    Bcast { root: UserRank },
    Reduce { root: UserRank, dtype: Dtype, op: ReduceOp },
    Allreduce { dtype: Dtype, op: ReduceOp },
    Alltoall,
    Alltoallv,
    Barrier,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollectiveLogEntry {
    pub id: u64,
    pub op: CollOp,
    pub args: Vec<Vec<u8>>,
    pub result: Vec<Vec<u8>>,
}

impl CollectiveLogEntry {
    /// FNV-1a over the arguments.
    pub fn args_digest(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for a in &self.args {
            for b in a.iter().chain(&(a.len() as u64).to_le_bytes()) {
                h = (h ^ *b as u64).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

#[derive(Debug, Default)]
pub struct CollState {
    pub(crate) last: u64,
    pub(crate) log: Vec<CollectiveLogEntry>,
}

impl CollState {
    pub fn last_collective_id(&self) -> u64 {
        self.last
    }

    pub fn log(&self) -> &[CollectiveLogEntry] {
        &self.log
    }
}

const PHASE_REDUCE: u64 = 0;
const PHASE_BCAST: u64 = 1;
const PHASE_A2A: u64 = 2;
const PHASE_ENTER: u64 = 3;
const PHASE_RELEASE: u64 = 4;
const PHASE_FORWARD: u64 = 5;

fn tag(id: u64, phase: u64) -> u64 {
    (id << 4) | phase
}

impl Rank {
    pub fn coll_state(&self) -> &CollState {
        &self.coll
    }

    pub async fn ft_bcast(&mut self, root: UserRank, data: &[u8]) -> Result<Vec<u8>, Interrupted> {
        let args = if self.user_rank() == root { vec![data.to_vec()] } else { vec![] };
        let mut res = self.ft_collective(CollOp::Bcast { root }, args).await?;
        Ok(res.pop().unwrap_or_default())
    }

    /// Returns the reduction on the root's incarnations and `None` elsewhere.
    pub async fn ft_reduce<T: Element>(
        &mut self,
        root: UserRank,
        values: &[T],
        op: ReduceOp,
    ) -> Result<Option<Vec<T>>, Interrupted> {
        let coll = CollOp::Reduce {
            root,
            dtype: T::DTYPE,
            op,
        };
        let mut res = self.ft_collective(coll, vec![encode(values)]).await?;
        Ok(res.pop().map(|b| decode(&b)))
    }

    pub async fn ft_allreduce<T: Element>(&mut self, values: &[T], op: ReduceOp) -> Result<Vec<T>, Interrupted> {
        let coll = CollOp::Allreduce { dtype: T::DTYPE, op };
        let mut res = self.ft_collective(coll, vec![encode(values)]).await?;
        Ok(decode(&res.pop().unwrap_or_default()))
    }

    /// `blocks[d]` goes to user rank `d`; returns the block from every source.
    /// All blocks must have the same length.
    pub async fn ft_alltoall(&mut self, blocks: Vec<Vec<u8>>) -> Result<Vec<Vec<u8>>, Interrupted> {
        assert!(
            blocks.windows(2).all(|w| w[0].len() == w[1].len()),
            "alltoall blocks must be equally sized"
        );
        self.ft_collective(CollOp::Alltoall, blocks).await
    }

    pub async fn ft_alltoallv(&mut self, blocks: Vec<Vec<u8>>) -> Result<Vec<Vec<u8>>, Interrupted> {
        self.ft_collective(CollOp::Alltoallv, blocks).await
    }

    /// Full-world barrier. On completion the message and collective logs are
    /// truncated.
    pub async fn ft_barrier(&mut self) -> Result<(), Interrupted> {
        self.ft_collective(CollOp::Barrier, vec![]).await.map(|_| ())
    }

    pub async fn ft_collective(
        &mut self,
        op: CollOp,
        args: Vec<Vec<u8>>,
    ) -> Result<Vec<Vec<u8>>, Interrupted> {
        if matches!(op, CollOp::Alltoall | CollOp::Alltoallv) {
            assert_eq!(args.len(), self.user_size(), "one block per user rank");
        }
        let id = self.coll.last + 1;
        loop {
            if self.fault_pending() {
                self.handle_fault().await?;
                continue;
            }
            match self.run_collective(id, op, &args).await {
                Ok(result) => {
                    self.coll.last = id;
                    if self.mode == FtMode::Full {
                        self.coll.log.push(CollectiveLogEntry {
                            id,
                            op,
                            args,
                            result: result.clone(),
                        });
                        if op == CollOp::Barrier {
                            self.truncate_logs(id);
                        }
                    }
                    return Ok(result);
                }
                Err(Fault) => self.handle_fault().await?,
            }
        }
    }

    fn truncate_logs(&mut self, barrier_id: u64) {
        self.p2p.log.clear();
        for rec in self.p2p.recv.values_mut() {
            rec.compact();
        }
        self.coll.log.retain(|e| e.id == barrier_id);
    }

    fn cmp_phys(&self, user: UserRank) -> PhysRank {
        self.place.cmp_phys(user)
    }

    /// Executes collective `id` once at the current epoch.
    pub(crate) async fn run_collective(
        &mut self,
        id: u64,
        op: CollOp,
        args: &[Vec<u8>],
    ) -> Result<Vec<Vec<u8>>, Fault> {
        if op == CollOp::Barrier {
            self.barrier(id).await?;
            return Ok(vec![]);
        }
        if self.role() == Role::Replica {
            let partner = self.cmp_phys(self.user_rank());
            let comm = self.forward_comm();
            let bytes = self.recv_raw(partner, MsgKind::Control, comm, tag(id, PHASE_FORWARD)).await?;
            return Ok(decode_blocks(&bytes));
        }
        let result = match op {
            CollOp::Bcast { root } => {
                let data = args.first().cloned().unwrap_or_default();
                vec![self.bcast(id, root, data).await?]
            }
            CollOp::Reduce { root, dtype, op } => {
                let r = self.reduce(id, root, dtype, op, args[0].clone()).await?;
                r.into_iter().collect()
            }
            CollOp::Allreduce { dtype, op } => {
                let r = self.reduce(id, 0, dtype, op, args[0].clone()).await?;
                vec![self.bcast(id, 0, r.unwrap_or_default()).await?]
            }
            CollOp::Alltoall | CollOp::Alltoallv => self.alltoall(id, args).await?,
            CollOp::Barrier => unreachable!("handled above"),
        };
        if let Some(rep) = self.place.rep_phys(self.user_rank()) {
            let comm = self.forward_comm();
            self.send_raw(rep, MsgKind::Control, comm, tag(id, PHASE_FORWARD), encode_blocks(&result))
                .await?;
        }
        Ok(result)
    }

    fn forward_comm(&self) -> u64 {
        self.comms
            .cmp_rep_inter
            .as_ref()
            .map(|c| c.id)
            .unwrap_or_else(|| comm_id(self.comms.epoch, CODE_CMP))
    }

    async fn bcast(&mut self, id: u64, root: UserRank, mut data: Vec<u8>) -> Result<Vec<u8>, Fault> {
        let n = self.user_size();
        let me = self.user_rank();
        let rel = (me + n - root) % n;
        let comm = self.comms.cmp.id;
        let t = tag(id, PHASE_BCAST);
        let mut mask = 1;
        while mask < n {
            if rel & mask != 0 {
                let parent = self.cmp_phys((rel - mask + root) % n);
                data = self.recv_raw(parent, MsgKind::Collective, comm, t).await?;
                break;
            }
            mask <<= 1;
        }
        mask >>= 1;
        let mut handles = Vec::new();
        while mask > 0 {
            if rel + mask < n {
                let child = self.cmp_phys((rel + mask + root) % n);
                self.check()?;
                handles.push(self.post_raw(child, MsgKind::Collective, comm, t, 0, data.clone()).await);
            }
            mask >>= 1;
        }
        self.wait_sends(&mut handles).await?;
        Ok(data)
    }

    async fn reduce(
        &mut self,
        id: u64,
        root: UserRank,
        dtype: Dtype,
        op: ReduceOp,
        mut acc: Vec<u8>,
    ) -> Result<Option<Vec<u8>>, Fault> {
        let n = self.user_size();
        let me = self.user_rank();
        let rel = (me + n - root) % n;
        let comm = self.comms.cmp.id;
        let t = tag(id, PHASE_REDUCE);
        let mut mask = 1;
        while mask < n {
            if rel & mask == 0 {
                let src = rel | mask;
                if src < n {
                    let child = self.cmp_phys((src + root) % n);
                    let other = self.recv_raw(child, MsgKind::Collective, comm, t).await?;
                    combine_bytes(dtype, op, &mut acc, &other);
                }
            } else {
                let parent = self.cmp_phys((rel - mask + root) % n);
                self.send_raw(parent, MsgKind::Collective, comm, t, acc).await?;
                return Ok(None);
            }
            mask <<= 1;
        }
        Ok(Some(acc))
    }

    async fn alltoall(&mut self, id: u64, blocks: &[Vec<u8>]) -> Result<Vec<Vec<u8>>, Fault> {
        let n = self.user_size();
        let me = self.user_rank();
        let comm = self.comms.cmp.id;
        let t = tag(id, PHASE_A2A);
        let mut handles = Vec::new();
        for k in 1..n {
            let d = (me + k) % n;
            self.check()?;
            let dst = self.cmp_phys(d);
            handles.push(self.post_raw(dst, MsgKind::Collective, comm, t, 0, blocks[d].clone()).await);
        }
        let mut out = vec![Vec::new(); n];
        out[me] = blocks[me].clone();
        for k in 1..n {
            let s = (me + n - k) % n;
            out[s] = self.recv_raw(self.cmp_phys(s), MsgKind::Collective, comm, t).await?;
        }
        self.wait_sends(&mut handles).await?;
        Ok(out)
    }

    /// Gather to world position 0, then release everyone.
    async fn barrier(&mut self, id: u64) -> Result<(), Fault> {
        let comm = self.comms.eworld.id;
        let world = self.place.order().to_vec();
        let root = world[0];
        if self.me == root {
            for &p in &world[1..] {
                self.recv_raw(p, MsgKind::Collective, comm, tag(id, PHASE_ENTER)).await?;
            }
            let mut handles = Vec::new();
            for &p in &world[1..] {
                self.check()?;
                handles.push(
                    self.post_raw(p, MsgKind::Collective, comm, tag(id, PHASE_RELEASE), 0, vec![])
                        .await,
                );
            }
            self.wait_sends(&mut handles).await
        } else {
            self.send_raw(root, MsgKind::Collective, comm, tag(id, PHASE_ENTER), vec![]).await?;
            self.recv_raw(root, MsgKind::Collective, comm, tag(id, PHASE_RELEASE)).await?;
            Ok(())
        }
    }
}
