//! Synthetic workloads with the communication patterns of the usual
//! benchmark kernels. Each returns a checksum that depends only on the spec
//! and the number of user ranks.

use std::fmt;
use std::str::FromStr;

use ftrep_core::p2p::ReqStatus;
use ftrep_core::scalar::ReduceOp;
use ftrep_core::{Interrupted, Rank, Time};

use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WorkloadKind {
    /// Nearest-neighbour token rotation.
    Ring,
    /// 2D Jacobi sweep with halo exchange and a max-residual allreduce.
    Halo2D,
    /// Sparse matrix-vector products with neighbour exchange and dot-product
    /// allreduce.
    CgLike,
    /// Bucket sort: broadcast seed, count alltoall, key alltoallv.
    IsLike,
}

impl WorkloadKind {
    pub const ALL: [WorkloadKind; 4] = [Self::Ring, Self::Halo2D, Self::CgLike, Self::IsLike];
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ring => "ring",
            Self::Halo2D => "halo2d",
            Self::CgLike => "cg",
            Self::IsLike => "is",
        })
    }
}

impl FromStr for WorkloadKind {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, BenchError> {
        match s.to_ascii_lowercase().as_str() {
            "ring" => Ok(Self::Ring),
            "halo2d" | "halo" => Ok(Self::Halo2D),
            "cg" | "cglike" => Ok(Self::CgLike),
            "is" | "islike" => Ok(Self::IsLike),
            other => Err(BenchError::InvalidSpec(format!("unknown workload {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub iters: usize,
    /// Bytes per point-to-point message, rounded up to whole 8-byte words.
    pub payload: usize,
    /// Barrier every this many iterations; 0 disables periodic barriers.
    pub barrier_period: usize,
    /// Compute units per iteration.
    pub work: Time,
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind, iters: usize, payload: usize) -> Self {
        Self {
            kind,
            iters,
            payload,
            barrier_period: 0,
            work: 0,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.barrier_period > 0 && self.iters % self.barrier_period != 0 {
            return Err(BenchError::InvalidSpec(format!(
                "barrier period {} does not divide {} iterations",
                self.barrier_period, self.iters
            )));
        }
        Ok(())
    }

    pub fn words(&self) -> usize {
        self.payload.div_ceil(8).max(1)
    }
}

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

/// FNV-1a over little-endian words.
pub fn fnv(mut h: u64, words: impl IntoIterator<Item = u64>) -> u64 {
    for w in words {
        for b in w.to_le_bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

pub fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn to_bytes(words: &[u64]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}

fn from_bytes(bytes: &[u8]) -> Vec<u64> {
    bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

/// Process grid `(px, py)` with `px` the largest divisor of `n` not above √n.
pub fn grid(n: usize) -> (usize, usize) {
    let px = (1..=n).take_while(|d| d * d <= n).filter(|d| n % d == 0).last().unwrap_or(1);
    (px, n / px)
}

/// Neighbours of `u` in the CG exchange pattern.
pub fn cg_neighbours(u: usize, n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = [(u + 1) % n, (u + n - 1) % n, (u + n / 2) % n, (u + n - n / 2) % n]
        .into_iter()
        .filter(|&x| x != u)
        .collect();
    v.sort();
    v.dedup();
    v
}

pub async fn run(r: &mut Rank, spec: &WorkloadSpec) -> Result<u64, Interrupted> {
    match spec.kind {
        WorkloadKind::Ring => ring(r, spec).await,
        WorkloadKind::Halo2D => halo(r, spec).await,
        WorkloadKind::CgLike => cg(r, spec).await,
        WorkloadKind::IsLike => is(r, spec).await,
    }
}

async fn end_of_iteration(r: &mut Rank, spec: &WorkloadSpec, i: usize) -> Result<(), Interrupted> {
    r.compute(spec.work).await;
    if spec.barrier_period > 0 && (i + 1) % spec.barrier_period == 0 {
        r.ft_barrier().await?;
    }
    Ok(())
}

async fn ring(r: &mut Rank, spec: &WorkloadSpec) -> Result<u64, Interrupted> {
    let (n, me, m) = (r.user_size(), r.user_rank(), spec.words());
    let mut w: Vec<u64> = (0..m).map(|j| (me * m + j + 1) as u64).collect();
    for i in 0..spec.iters {
        let req = r.ft_isend((me + 1) % n, 1, &to_bytes(&w)).await;
        let got = r.ft_recv((me + n - 1) % n, 1).await?;
        r.ft_wait(req).await?;
        w = from_bytes(&got).into_iter().map(|x| x.wrapping_add(i as u64 + 1)).collect();
        end_of_iteration(r, spec, i).await?;
    }
    Ok(fnv(FNV_OFFSET, w))
}

const NORTH: u64 = 0;
const SOUTH: u64 = 1;
const WEST: u64 = 2;
const EAST: u64 = 3;

async fn halo(r: &mut Rank, spec: &WorkloadSpec) -> Result<u64, Interrupted> {
    let (n, me, t) = (r.user_size(), r.user_rank(), spec.words());
    let (px, py) = grid(n);
    let (x, y) = (me % px, me / px);
    let side = t + 2;
    let at = |i: usize, j: usize| i * side + j;
    let mut u = vec![0f64; side * side];
    for i in 1..=t {
        for j in 1..=t {
            let (gi, gj) = (y * t + i, x * t + j);
            u[at(i, j)] = ((gi * 7 + gj * 13 + 1) % 23) as f64;
        }
    }
    // (neighbour, tag I send with, tag it sends to me with)
    let mut nbrs = Vec::new();
    if y > 0 {
        nbrs.push((me - px, NORTH, SOUTH));
    }
    if y + 1 < py {
        nbrs.push((me + px, SOUTH, NORTH));
    }
    if x > 0 {
        nbrs.push((me - 1, WEST, EAST));
    }
    if x + 1 < px {
        nbrs.push((me + 1, EAST, WEST));
    }
    let mut h = FNV_OFFSET;
    for it in 0..spec.iters {
        let mut sends = Vec::new();
        let mut recvs = Vec::new();
        for &(nb, out_tag, in_tag) in &nbrs {
            let edge: Vec<u64> = (1..=t)
                .map(|k| match out_tag {
                    NORTH => u[at(1, k)],
                    SOUTH => u[at(t, k)],
                    WEST => u[at(k, 1)],
                    _ => u[at(k, t)],
                })
                .map(f64::to_bits)
                .collect();
            sends.push(r.ft_isend(nb, out_tag, &to_bytes(&edge)).await);
            recvs.push((r.ft_irecv(nb, in_tag), in_tag));
        }
        let reqs: Vec<_> = recvs.iter().map(|&(q, _)| q).chain(sends.iter().copied()).collect();
        let done = r.ft_waitall(&reqs).await?;
        for (k, &(_, in_tag)) in recvs.iter().enumerate() {
            let ReqStatus::Received(bytes) = &done[k] else {
                unreachable!("receive completes with data")
            };
            for (m, v) in from_bytes(bytes).into_iter().map(f64::from_bits).enumerate() {
                let m = m + 1;
                match in_tag {
                    SOUTH => u[at(0, m)] = v,
                    NORTH => u[at(t + 1, m)] = v,
                    EAST => u[at(m, 0)] = v,
                    _ => u[at(m, t + 1)] = v,
                }
            }
        }
        let mut next = u.clone();
        let mut res = 0f64;
        for i in 1..=t {
            for j in 1..=t {
                let v = 0.25 * (u[at(i - 1, j)] + u[at(i + 1, j)] + u[at(i, j - 1)] + u[at(i, j + 1)]);
                res = res.max((v - u[at(i, j)]).abs());
                next[at(i, j)] = v;
            }
        }
        u = next;
        let global = r.ft_allreduce(&[res], ReduceOp::Max).await?;
        h = fnv(h, [global[0].to_bits(), it as u64]);
        end_of_iteration(r, spec, it).await?;
    }
    let interior = (1..=t).flat_map(|i| (1..=t).map(move |j| (i, j)));
    Ok(fnv(h, interior.map(|(i, j)| u[at(i, j)].to_bits())))
}

async fn cg(r: &mut Rank, spec: &WorkloadSpec) -> Result<u64, Interrupted> {
    let (n, me, m) = (r.user_size(), r.user_rank(), spec.words());
    let nbrs = cg_neighbours(me, n);
    let mut x: Vec<i64> = (0..m).map(|j| (me * m + j + 1) as i64).collect();
    let mut h = FNV_OFFSET;
    for it in 0..spec.iters {
        let bytes = to_bytes(&x.iter().map(|&v| v as u64).collect::<Vec<_>>());
        let mut sends = Vec::new();
        for &nb in &nbrs {
            sends.push(r.ft_isend(nb, 0, &bytes).await);
        }
        let mut y: Vec<i64> = x.iter().map(|&v| v.wrapping_mul(4)).collect();
        for &nb in &nbrs {
            let other = from_bytes(&r.ft_recv(nb, 0).await?);
            for (yj, o) in y.iter_mut().zip(other) {
                *yj = yj.wrapping_sub(o as i64);
            }
        }
        r.ft_waitall(&sends).await?;
        let dot = x.iter().zip(&y).fold(0i64, |a, (&p, &q)| a.wrapping_add(p.wrapping_mul(q)));
        let d = r.ft_allreduce(&[dot], ReduceOp::Sum).await?[0];
        x = y.iter().map(|&v| v.wrapping_add(d & 0xff)).collect();
        h = fnv(h, [d as u64, it as u64]);
        end_of_iteration(r, spec, it).await?;
    }
    Ok(fnv(h, x.into_iter().map(|v| v as u64)))
}

async fn is(r: &mut Rank, spec: &WorkloadSpec) -> Result<u64, Interrupted> {
    let (n, me, k) = (r.user_size(), r.user_rank(), spec.words());
    let mut h = FNV_OFFSET;
    for it in 0..spec.iters {
        let root = it % n;
        let mine = splitmix(it as u64 ^ ((root as u64) << 32));
        let seed = r.ft_bcast(root, &mine.to_le_bytes()).await?;
        let seed = from_bytes(&seed)[0];
        let mut buckets = vec![Vec::new(); n];
        for j in 0..k {
            let key = splitmix(seed ^ splitmix(((me * k + j) as u64) << 1));
            buckets[((key >> 32) % n as u64) as usize].push(key);
        }
        let counts = buckets.iter().map(|b| (b.len() as u64).to_le_bytes().to_vec()).collect();
        let counts = r.ft_alltoall(counts).await?;
        let keys = r.ft_alltoallv(buckets.iter().map(|b| to_bytes(b)).collect()).await?;
        let mut got = Vec::new();
        for (c, ks) in counts.iter().zip(&keys) {
            let ks = from_bytes(ks);
            assert_eq!(from_bytes(c)[0] as usize, ks.len(), "bucket count disagrees with keys");
            got.extend(ks);
        }
        got.sort_unstable();
        let total = r.ft_allreduce(&[got.len() as i64], ReduceOp::Sum).await?[0];
        assert_eq!(total as usize, n * k, "keys lost in the exchange");
        h = fnv(h, got);
        end_of_iteration(r, spec, it).await?;
    }
    Ok(h)
}
