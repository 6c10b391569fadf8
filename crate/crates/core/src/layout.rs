//! World layout, replica pairing and user-level routing.
//!
//! World positions `0..n_comp` hold computational processes in user-rank
//! order; positions `n_comp..n_comp + n_rep` hold replicas in replica-rank
//! order. A [`Placement`] additionally maps positions to the physical
//! processes occupying them, which changes when a repair promotes a replica.

use std::collections::BTreeMap;

use crate::error::LayoutError;
use crate::{PhysRank, UserRank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Computational,
    Replica,
}

/// Chooses which computational ranks receive replicas.
pub trait ReplicaAssignment {
    /// Returns, for each replica rank in order, the computational rank it
    /// shadows. Must yield `n_rep` distinct values below `n_comp`.
    fn assign(&self, n_comp: usize, n_rep: usize) -> Vec<UserRank>;
}

/// Replicas go to the lowest computational ranks, `0..n_rep`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LowestFirst;

impl ReplicaAssignment for LowestFirst {
    fn assign(&self, _n_comp: usize, n_rep: usize) -> Vec<UserRank> {
        (0..n_rep).collect()
    }
}

/// Replicas spread evenly across the computational ranks.
#[derive(Debug, Clone, Copy, Default)]
pub struct Strided;

impl ReplicaAssignment for Strided {
    fn assign(&self, n_comp: usize, n_rep: usize) -> Vec<UserRank> {
        (0..n_rep).map(|i| i * n_comp / n_rep.max(1)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldLayout {
    n_comp: usize,
    cmp_to_rep: BTreeMap<UserRank, usize>,
    rep_to_cmp: Vec<UserRank>,
}

impl WorldLayout {
    /// `n_rep = floor(r_degree * n_comp)`, replicas paired lowest-first.
    pub fn build(n_comp: usize, r_degree: f64) -> Result<Self, LayoutError> {
        Self::build_with(n_comp, r_degree, &LowestFirst)
    }

    pub fn build_with(
        n_comp: usize,
        r_degree: f64,
        policy: &dyn ReplicaAssignment,
    ) -> Result<Self, LayoutError> {
        if n_comp == 0 {
            return Err(LayoutError::NoComputational);
        }
        if !(0.0..=1.0).contains(&r_degree) {
            return Err(LayoutError::DegreeOutOfRange(r_degree));
        }
        // The epsilon absorbs products such as 0.29 * 100 = 28.999999999999996.
        let n_rep = ((r_degree * n_comp as f64) + 1e-9).floor() as usize;
        let n_rep = n_rep.min(n_comp);
        Self::from_pairs(n_comp, policy.assign(n_comp, n_rep))
    }

    /// Builds a layout from an explicit replica-rank → computational-rank map.
    pub fn from_pairs(n_comp: usize, rep_to_cmp: Vec<UserRank>) -> Result<Self, LayoutError> {
        if n_comp == 0 {
            return Err(LayoutError::NoComputational);
        }
        let mut cmp_to_rep = BTreeMap::new();
        for (rep, &cmp) in rep_to_cmp.iter().enumerate() {
            if cmp >= n_comp {
                return Err(LayoutError::BadPairing(format!(
                    "replica {rep} paired with out-of-range rank {cmp}"
                )));
            }
            if cmp_to_rep.insert(cmp, rep).is_some() {
                return Err(LayoutError::BadPairing(format!("rank {cmp} has two replicas")));
            }
        }
        Ok(Self {
            n_comp,
            cmp_to_rep,
            rep_to_cmp,
        })
    }

    pub fn n_comp(&self) -> usize {
        self.n_comp
    }

    pub fn n_rep(&self) -> usize {
        self.rep_to_cmp.len()
    }

    pub fn world_size(&self) -> usize {
        self.n_comp + self.n_rep()
    }

    pub fn cmp_to_rep(&self) -> &BTreeMap<UserRank, usize> {
        &self.cmp_to_rep
    }

    pub fn rep_to_cmp(&self) -> &[UserRank] {
        &self.rep_to_cmp
    }

    pub fn has_replica(&self, user: UserRank) -> bool {
        self.cmp_to_rep.contains_key(&user)
    }

    /// World position of `user`'s replica, if it has one.
    pub fn replica_position(&self, user: UserRank) -> Option<usize> {
        self.cmp_to_rep.get(&user).map(|rep| self.n_comp + rep)
    }

    pub fn role_at(&self, position: usize) -> Result<Role, LayoutError> {
        if position < self.n_comp {
            Ok(Role::Computational)
        } else if position < self.world_size() {
            Ok(Role::Replica)
        } else {
            Err(LayoutError::UnknownRank(position))
        }
    }

    /// Application-visible rank of the process at `position`; a replica
    /// reports the rank of its computational partner.
    pub fn user_rank(&self, position: usize) -> Result<UserRank, LayoutError> {
        match self.role_at(position)? {
            Role::Computational => Ok(position),
            Role::Replica => Ok(self.rep_to_cmp[position - self.n_comp]),
        }
    }

    /// The application sees exactly `n_comp` ranks regardless of replication.
    pub fn user_size(&self) -> usize {
        self.n_comp
    }

    /// Positions a sender incarnation must deliver to so that every
    /// incarnation of `dest` gets exactly one copy.
    pub fn route_peer(&self, dest: UserRank, caller: Caller) -> Result<RouteSet, LayoutError> {
        self.check_user(dest)?;
        self.check_caller(caller)?;
        let route = match caller.role {
            Role::Replica => RouteSet {
                targets: self.replica_position(dest).into_iter().collect(),
                mode: RouteMode::RepOnly,
            },
            Role::Computational if self.has_replica(caller.user) => RouteSet {
                targets: vec![dest],
                mode: RouteMode::CmpOnly,
            },
            Role::Computational => match self.replica_position(dest) {
                Some(rep) => RouteSet {
                    targets: vec![dest, rep],
                    mode: RouteMode::CmpAndRep,
                },
                None => RouteSet {
                    targets: vec![dest],
                    mode: RouteMode::CmpOnly,
                },
            },
        };
        Ok(route)
    }

    /// Position of the `src` incarnation that a receiver incarnation listens to.
    pub fn route_source(&self, src: UserRank, receiver: Caller) -> Result<usize, LayoutError> {
        self.check_user(src)?;
        self.check_caller(receiver)?;
        Ok(match receiver.role {
            Role::Computational => src,
            Role::Replica => self.replica_position(src).unwrap_or(src),
        })
    }

    fn check_user(&self, user: UserRank) -> Result<(), LayoutError> {
        if user >= self.n_comp {
            return Err(LayoutError::DestOutOfRange {
                dest: user,
                size: self.n_comp,
            });
        }
        Ok(())
    }

    fn check_caller(&self, caller: Caller) -> Result<(), LayoutError> {
        self.check_user(caller.user)?;
        if caller.role == Role::Replica && !self.has_replica(caller.user) {
            return Err(LayoutError::NoReplica(caller.user));
        }
        Ok(())
    }
}

/// Identity of a calling incarnation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Caller {
    pub role: Role,
    pub user: UserRank,
}

impl Caller {
    pub fn cmp(user: UserRank) -> Self {
        Self {
            role: Role::Computational,
            user,
        }
    }

    pub fn rep(user: UserRank) -> Self {
        Self {
            role: Role::Replica,
            user,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RouteMode {
    CmpOnly,
    RepOnly,
    CmpAndRep,
}

/// Physical fan-out of one user-level send, as world positions.
///
/// A replica sending to an unreplicated destination gets an empty set: the
/// computational partner alone delivers that message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteSet {
    pub targets: Vec<usize>,
    pub mode: RouteMode,
}

/// A layout bound to the physical processes occupying each position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    layout: WorldLayout,
    order: Vec<PhysRank>,
    position_of: BTreeMap<PhysRank, usize>,
}

impl Placement {
    /// Spawn-time placement: position `i` is physical process `i`.
    pub fn initial(layout: WorldLayout) -> Self {
        let order = (0..layout.world_size()).collect();
        Self::new(layout, order).expect("identity placement is valid")
    }

    pub fn new(layout: WorldLayout, order: Vec<PhysRank>) -> Result<Self, LayoutError> {
        if order.len() != layout.world_size() {
            return Err(LayoutError::BadPairing(format!(
                "{} processes for {} positions",
                order.len(),
                layout.world_size()
            )));
        }
        let mut position_of = BTreeMap::new();
        for (pos, &p) in order.iter().enumerate() {
            if position_of.insert(p, pos).is_some() {
                return Err(LayoutError::BadPairing(format!("process {p} placed twice")));
            }
        }
        Ok(Self {
            layout,
            order,
            position_of,
        })
    }

    pub fn layout(&self) -> &WorldLayout {
        &self.layout
    }

    /// Physical processes in world-position order.
    pub fn order(&self) -> &[PhysRank] {
        &self.order
    }

    pub fn phys_at(&self, position: usize) -> PhysRank {
        self.order[position]
    }

    pub fn position_of(&self, phys: PhysRank) -> Option<usize> {
        self.position_of.get(&phys).copied()
    }

    pub fn contains(&self, phys: PhysRank) -> bool {
        self.position_of.contains_key(&phys)
    }

    pub fn caller(&self, phys: PhysRank) -> Result<Caller, LayoutError> {
        let pos = self.position_of(phys).ok_or(LayoutError::UnknownRank(phys))?;
        Ok(Caller {
            role: self.layout.role_at(pos)?,
            user: self.layout.user_rank(pos)?,
        })
    }

    pub fn cmp_phys(&self, user: UserRank) -> PhysRank {
        self.order[user]
    }

    pub fn rep_phys(&self, user: UserRank) -> Option<PhysRank> {
        self.layout.replica_position(user).map(|p| self.order[p])
    }

    /// Physical incarnations of `user`, computational first.
    pub fn incarnations(&self, user: UserRank) -> Vec<PhysRank> {
        let mut v = vec![self.cmp_phys(user)];
        v.extend(self.rep_phys(user));
        v
    }

    pub fn computational(&self) -> &[PhysRank] {
        &self.order[..self.layout.n_comp()]
    }

    pub fn replicas(&self) -> &[PhysRank] {
        &self.order[self.layout.n_comp()..]
    }
}
