//! The six logical communicators and their revoke/shrink/ack operations.
//!
//! `oworld` is the fault plane: it is revoked to push every rank into the
//! error handler. `eworld` carries data. Both have the same members but
//! distinct ids, so revoking one leaves the other usable. Every id embeds the
//! repair epoch, which makes a regenerated set disjoint from its predecessor.

use std::collections::BTreeSet;

use crate::layout::Placement;
use crate::transport::{comm_id, CommId, Endpoint};
use crate::{PhysRank, UserRank};

pub const CODE_OWORLD: u8 = 1;
pub const CODE_EWORLD: u8 = 2;
pub const CODE_CMP: u8 = 3;
pub const CODE_REP: u8 = 4;
pub const CODE_CMP_REP_INTER: u8 = 5;
pub const CODE_CMP_NO_REP: u8 = 6;
pub const CODE_CMP_NO_REP_INTER: u8 = 7;
/// Recovery-phase exchanges.
pub const CODE_RECOVERY: u8 = 8;
/// Dead-set agreement; the epoch field holds the proposed dead-set size.
pub const CODE_AGREE: u8 = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CommKind {
    World,
    Cmp,
    Rep,
    CmpRepInter,
    CmpNoRep,
    CmpNoRepInter,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommHandle {
    pub kind: CommKind,
    pub id: CommId,
    /// Members, or the local group of an intercommunicator.
    pub members: Vec<PhysRank>,
    /// Remote group of an intercommunicator; empty otherwise.
    pub remote: Vec<PhysRank>,
    pub acked: BTreeSet<PhysRank>,
}

impl CommHandle {
    fn intra(kind: CommKind, id: CommId, members: Vec<PhysRank>) -> Self {
        Self {
            kind,
            id,
            members,
            remote: Vec::new(),
            acked: BTreeSet::new(),
        }
    }

    fn inter(kind: CommKind, id: CommId, local: Vec<PhysRank>, remote: Vec<PhysRank>) -> Self {
        Self {
            kind,
            id,
            members: local,
            remote,
            acked: BTreeSet::new(),
        }
    }

    pub fn is_inter(&self) -> bool {
        matches!(self.kind, CommKind::CmpRepInter | CommKind::CmpNoRepInter)
    }

    /// Every process in the communicator, both groups for intercommunicators.
    pub fn all(&self) -> Vec<PhysRank> {
        self.members.iter().chain(&self.remote).copied().collect()
    }

    pub fn contains(&self, p: PhysRank) -> bool {
        self.members.contains(&p) || self.remote.contains(&p)
    }

    /// Survivors in their original relative order, under a fresh id.
    pub fn shrink(&self, dead: &BTreeSet<PhysRank>, id: CommId) -> CommHandle {
        let keep = |v: &[PhysRank]| v.iter().copied().filter(|p| !dead.contains(p)).collect();
        CommHandle {
            kind: self.kind,
            id,
            members: keep(&self.members),
            remote: keep(&self.remote),
            acked: BTreeSet::new(),
        }
    }

    /// Acknowledges the currently known failures among the members.
    pub fn failure_ack(&mut self, dead: &BTreeSet<PhysRank>) {
        self.acked = self.all().into_iter().filter(|p| dead.contains(p)).collect();
    }

    /// Acknowledged failures as ranks local to this communicator.
    pub fn failure_get_ack(&self) -> BTreeSet<usize> {
        self.all()
            .iter()
            .enumerate()
            .filter(|(_, p)| self.acked.contains(p))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn revoke(&self, ep: &Endpoint) {
        ep.revoke(self.id, &self.all());
    }

    pub fn is_revoked(&self, ep: &Endpoint) -> bool {
        ep.is_revoked(self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommunicatorSet {
    pub epoch: u64,
    pub oworld: CommHandle,
    pub eworld: CommHandle,
    pub cmp: CommHandle,
    pub rep: Option<CommHandle>,
    pub cmp_rep_inter: Option<CommHandle>,
    pub cmp_no_rep: Option<CommHandle>,
    pub cmp_no_rep_inter: Option<CommHandle>,
}

impl CommunicatorSet {
    /// Builds the set for `placement`. World-level view: a communicator is
    /// present if it has members anywhere; see [`Self::view`] for one rank's.
    pub fn build(placement: &Placement, epoch: u64) -> Self {
        let layout = placement.layout();
        let world = placement.order().to_vec();
        let cmp = placement.computational().to_vec();
        let rep = placement.replicas().to_vec();
        let no_rep: Vec<PhysRank> = (0..layout.n_comp())
            .filter(|&u| !layout.has_replica(u))
            .map(|u| placement.cmp_phys(u))
            .collect();
        let id = |code| comm_id(epoch, code);
        let has_rep = !rep.is_empty();
        Self {
            epoch,
            oworld: CommHandle::intra(CommKind::World, id(CODE_OWORLD), world.clone()),
            eworld: CommHandle::intra(CommKind::World, id(CODE_EWORLD), world),
            cmp: CommHandle::intra(CommKind::Cmp, id(CODE_CMP), cmp.clone()),
            rep: has_rep.then(|| CommHandle::intra(CommKind::Rep, id(CODE_REP), rep.clone())),
            cmp_rep_inter: has_rep.then(|| {
                CommHandle::inter(CommKind::CmpRepInter, id(CODE_CMP_REP_INTER), cmp, rep.clone())
            }),
            cmp_no_rep: (!no_rep.is_empty())
                .then(|| CommHandle::intra(CommKind::CmpNoRep, id(CODE_CMP_NO_REP), no_rep.clone())),
            cmp_no_rep_inter: (has_rep && !no_rep.is_empty()).then(|| {
                CommHandle::inter(CommKind::CmpNoRepInter, id(CODE_CMP_NO_REP_INTER), no_rep, rep)
            }),
        }
    }

    /// Rebuilds every communicator over a repaired placement.
    pub fn regenerate(survivors: &Placement, epoch: u64) -> Self {
        Self::build(survivors, epoch)
    }

    /// The handles `p` holds; communicators it is not part of are `None`.
    pub fn view(&self, p: PhysRank) -> RankView<'_> {
        fn member(c: &Option<CommHandle>, p: PhysRank) -> Option<&CommHandle> {
            c.as_ref().filter(|h| h.contains(p))
        }
        RankView {
            oworld: &self.oworld,
            eworld: &self.eworld,
            cmp: self.cmp.contains(p).then_some(&self.cmp),
            rep: member(&self.rep, p),
            cmp_rep_inter: member(&self.cmp_rep_inter, p),
            cmp_no_rep: member(&self.cmp_no_rep, p),
            cmp_no_rep_inter: member(&self.cmp_no_rep_inter, p),
        }
    }

    /// Checks the structural invariants against `placement`, with `dead`
    /// the failures known when the set was built. Returns every violation.
    pub fn validate(&self, placement: &Placement, dead: &BTreeSet<PhysRank>) -> Vec<String> {
        let mut errs = Vec::new();
        let layout = placement.layout();
        let (n_comp, n_rep) = (layout.n_comp(), layout.n_rep());
        let world = &self.eworld.members;
        if self.oworld.members != *world {
            errs.push("oworld and eworld differ".into());
        }
        if self.oworld.id == self.eworld.id {
            errs.push("oworld and eworld share an id".into());
        }
        if world.len() != n_comp + n_rep || world.as_slice() != placement.order() {
            errs.push("eworld does not match the placement".into());
        }
        if world.iter().any(|p| dead.contains(p)) {
            errs.push("a dead process is a member".into());
        }
        if self.cmp.members.as_slice() != &world[..n_comp.min(world.len())] {
            errs.push("cmp is not the first nComp of eworld".into());
        }
        match &self.rep {
            None if n_rep > 0 => errs.push("rep missing".into()),
            Some(r) if n_rep == 0 || r.members.as_slice() != &world[n_comp..] => {
                errs.push("rep is not the last nRep of eworld".into())
            }
            _ => {}
        }
        if self.cmp_rep_inter.is_some() != (n_rep > 0) {
            errs.push("cmpRepInter presence disagrees with nRep".into());
        }
        let unreplicated: Vec<UserRank> = (0..n_comp).filter(|&u| !layout.has_replica(u)).collect();
        match &self.cmp_no_rep {
            None if !unreplicated.is_empty() => errs.push("cmpNoRep missing".into()),
            Some(c) => {
                let want: Vec<PhysRank> = unreplicated.iter().map(|&u| placement.cmp_phys(u)).collect();
                if c.members != want {
                    errs.push("cmpNoRep members wrong".into());
                }
            }
            _ => {}
        }
        if self.cmp_no_rep_inter.is_some() != (n_rep > 0 && !unreplicated.is_empty()) {
            errs.push("cmpNoRepInter presence wrong".into());
        }
        for h in [&self.cmp_rep_inter, &self.cmp_no_rep_inter].into_iter().flatten() {
            if h.members.iter().any(|p| h.remote.contains(p)) {
                errs.push(format!("{:?} groups overlap", h.kind));
            }
        }
        for (pos, &p) in world.iter().enumerate() {
            let v = self.view(p);
            let is_cmp = pos < n_comp;
            let replicated = is_cmp && layout.has_replica(pos);
            if v.cmp.is_some() != is_cmp || v.rep.is_some() == is_cmp {
                errs.push(format!("process {p} has wrong cmp/rep handles"));
            }
            if v.cmp_no_rep.is_some() != (is_cmp && !replicated) {
                errs.push(format!("process {p} has wrong cmpNoRep handle"));
            }
        }
        errs
    }
}

/// One process's handles; absent communicators are the null handle.
#[derive(Debug, Clone, Copy)]
pub struct RankView<'a> {
    pub oworld: &'a CommHandle,
    pub eworld: &'a CommHandle,
    pub cmp: Option<&'a CommHandle>,
    pub rep: Option<&'a CommHandle>,
    pub cmp_rep_inter: Option<&'a CommHandle>,
    pub cmp_no_rep: Option<&'a CommHandle>,
    pub cmp_no_rep_inter: Option<&'a CommHandle>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::WorldLayout;

    fn set(n: usize, r: f64) -> (Placement, CommunicatorSet) {
        let p = Placement::initial(WorldLayout::build(n, r).unwrap());
        let s = CommunicatorSet::build(&p, 0);
        (p, s)
    }

    #[test]
    fn half_replication() {
        let (p, s) = set(4, 0.5);
        assert_eq!(s.cmp.members, vec![0, 1, 2, 3]);
        assert_eq!(s.rep.as_ref().unwrap().members, vec![4, 5]);
        assert_eq!(s.cmp_no_rep.as_ref().unwrap().members, vec![2, 3]);
        assert!(s.cmp_rep_inter.is_some() && s.cmp_no_rep_inter.is_some());
        assert!(s.validate(&p, &BTreeSet::new()).is_empty());
    }

    #[test]
    fn degenerate_degrees() {
        let (p, s) = set(4, 0.0);
        assert!(s.rep.is_none() && s.cmp_rep_inter.is_none() && s.cmp_no_rep_inter.is_none());
        assert!(s.validate(&p, &BTreeSet::new()).is_empty());
        let (p, s) = set(4, 1.0);
        assert!(s.cmp_no_rep.is_none() && s.cmp_no_rep_inter.is_none());
        assert!(s.validate(&p, &BTreeSet::new()).is_empty());
    }

    #[test]
    fn per_rank_view_nulls() {
        let (_, s) = set(4, 0.5);
        let v = s.view(4);
        assert!(v.cmp.is_none() && v.cmp_no_rep.is_none() && v.rep.is_some());
        let v = s.view(0);
        assert!(v.cmp_no_rep.is_none() && v.cmp_rep_inter.is_some());
        assert!(s.view(3).cmp_no_rep.is_some());
    }

    #[test]
    fn shrink_keeps_order() {
        let h = CommHandle::intra(CommKind::World, 1, (0..6).collect());
        assert_eq!(h.shrink(&BTreeSet::from([4]), 2).members, vec![0, 1, 2, 3, 5]);
        assert_eq!(h.shrink(&BTreeSet::new(), 2).members, h.members);
        assert_eq!(h.shrink(&BTreeSet::from([0, 5]), 2).members, vec![1, 2, 3, 4]);
    }

    #[test]
    fn ack_intersects_with_members() {
        let (_, mut s) = set(4, 0.5);
        assert!(s.cmp.failure_get_ack().is_empty());
        s.cmp.failure_ack(&BTreeSet::from([4]));
        assert!(s.cmp.failure_get_ack().is_empty());
        s.cmp.failure_ack(&BTreeSet::from([2]));
        assert_eq!(s.cmp.failure_get_ack(), BTreeSet::from([2]));
    }

    #[test]
    fn regenerate_without_failures_is_build() {
        let (p, s) = set(4, 0.5);
        assert_eq!(CommunicatorSet::regenerate(&p, 0), s);
    }

    #[test]
    fn validate_flags_dead_member() {
        let (p, s) = set(2, 1.0);
        assert!(!s.validate(&p, &BTreeSet::from([3])).is_empty());
    }
}
