//! In-process transport: virtual ranks, reliable FIFO channels, kills and
//! failure detection.
//!
//! Every rank runs as an async task holding an [`Endpoint`]. All endpoints
//! share one world state behind a mutex. Two schedulers drive the tasks:
//! [`det`] polls one rank per logical step under a seeded RNG, [`threaded`]
//! gives each rank its own OS thread and a wall clock.

pub mod det;
pub mod threaded;

use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet, VecDeque};
use std::future::Future;
use std::pin::Pin;
use std::sync::{Arc, Mutex, MutexGuard};
use std::task::{Context, Poll};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Interrupted, RuntimeError};
use crate::{PhysRank, SendId, Time};

pub type CommId = u64;

/// Communicator ids carry the repair epoch in their high bits, so traffic of
/// different epochs never matches.
pub fn comm_id(epoch: u64, code: u8) -> CommId {
    (epoch << 8) | code as u64
}

pub fn comm_epoch(comm: CommId) -> u64 {
    comm >> 8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MsgKind {
    P2p,
    Collective,
    Control,
}

/// Control tag reserved for revocation floods.
pub const TAG_REVOKE: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub src: PhysRank,
    pub dst: PhysRank,
    pub kind: MsgKind,
    pub comm: CommId,
    pub tag: u64,
    pub send_id: SendId,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Test<T> {
    Incomplete,
    Complete(T),
    PeerDead,
    Revoked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SendStatus {
    OnWire,
    Delivered,
    Lost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SendHandle(u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecvHandle {
    pub src: PhysRank,
    pub kind: MsgKind,
    pub comm: CommId,
    pub tag: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FailureNotice {
    pub dead: BTreeSet<PhysRank>,
    pub observed_at: Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedMode {
    Deterministic,
    Threaded,
}

/// Fate of envelopes still on the wire when their sender is killed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InFlightPolicy {
    Deliver,
    Drop,
    /// Each envelope is independently kept or dropped with probability 1/2.
    Random,
}

/// What `compute(units)` costs besides logical time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComputeModel {
    Logical,
    /// Also runs a CPU kernel of `iters_per_unit` iterations per unit.
    Burn { iters_per_unit: u64 },
}

#[derive(Debug, Clone)]
pub struct TransportConfig {
    pub sched: SchedMode,
    pub seed: u64,
    /// Time from a kill until every rank observes it.
    pub detection_latency: Time,
    /// Extra random delivery delay in steps, on top of one step.
    pub wire_jitter: Time,
    pub in_flight: InFlightPolicy,
    pub compute: ComputeModel,
    pub step_limit: u64,
    pub wall_timeout: Duration,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            sched: SchedMode::Deterministic,
            seed: 0,
            detection_latency: 5,
            wire_jitter: 0,
            in_flight: InFlightPolicy::Random,
            compute: ComputeModel::Logical,
            step_limit: 50_000_000,
            wall_timeout: Duration::from_secs(120),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KillTrigger {
    /// Before the given scheduler step (deterministic mode only).
    Step(u64),
    /// Once useful time (time outside the error handler) reaches the value.
    UsefulTime(Time),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Victim {
    Rank(PhysRank),
    /// The rank the scheduler picked for the triggering step.
    Scheduled,
    /// Uniform over ranks still alive.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedKill {
    pub trigger: KillTrigger,
    pub victim: Victim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KillEvent {
    pub time: Time,
    pub useful: Time,
    pub victim: PhysRank,
}

#[derive(Debug, Clone)]
pub struct RunReport<T> {
    /// Program results by physical rank; `None` for killed ranks.
    pub outputs: Vec<Option<T>>,
    pub interrupted: Option<Interrupted>,
    pub kills: Vec<KillEvent>,
    pub end_time: Time,
    /// Time during which at least one rank was inside the error handler.
    pub handler_time: Time,
    pub useful_time: Time,
    pub steps: u64,
    /// Digest of the scheduling decisions; equal digests mean equal runs.
    pub schedule_digest: u64,
}

impl<T> RunReport<T> {
    /// Useful time at which the job was lost, if it was.
    pub fn interruption_useful_time(&self) -> Option<Time> {
        self.interrupted
            .as_ref()
            .map(|i| self.kills[i.dead.max(1) - 1].useful)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Block {
    Runnable,
    Activity(u64),
    Until(Time),
}

#[derive(Debug)]
struct Wired {
    at: Time,
    seq: u64,
    handle: u64,
    env: Envelope,
}

impl PartialEq for Wired {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Wired {}
impl PartialOrd for Wired {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Wired {
    // Reversed: BinaryHeap pops the earliest delivery first.
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

#[derive(Debug)]
enum Clock {
    Logical(Time),
    Wall(Instant),
}

pub(crate) struct State {
    cfg: TransportConfig,
    clock: Clock,
    mailboxes: Vec<VecDeque<Envelope>>,
    wire: BinaryHeap<Wired>,
    last_at: HashMap<(PhysRank, PhysRank), Time>,
    sends: HashMap<u64, (SendStatus, PhysRank, CommId)>,
    next_handle: u64,
    seq: u64,
    dead: Vec<bool>,
    kills: Vec<KillEvent>,
    revoked: Vec<HashSet<CommId>>,
    epoch: Vec<u64>,
    activity: Vec<u64>,
    pub(crate) block: Vec<Block>,
    done: Vec<bool>,
    exited: Vec<bool>,
    handled: Vec<usize>,
    finished: bool,
    pub(crate) aborted: bool,
    in_handler: Vec<bool>,
    handler_count: usize,
    handler_acc: Time,
    handler_since: Time,
    wire_rng: ChaCha8Rng,
}

impl State {
    fn new(n: usize, cfg: TransportConfig) -> Self {
        let clock = match cfg.sched {
            SchedMode::Deterministic => Clock::Logical(0),
            SchedMode::Threaded => Clock::Wall(Instant::now()),
        };
        let wire_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ WIRE_STREAM);
        Self {
            cfg,
            clock,
            mailboxes: vec![VecDeque::new(); n],
            wire: BinaryHeap::new(),
            last_at: HashMap::new(),
            sends: HashMap::new(),
            next_handle: 1,
            seq: 0,
            dead: vec![false; n],
            kills: Vec::new(),
            revoked: vec![HashSet::new(); n],
            epoch: vec![0; n],
            activity: vec![0; n],
            block: vec![Block::Runnable; n],
            done: vec![false; n],
            exited: vec![false; n],
            handled: vec![0; n],
            finished: false,
            aborted: false,
            in_handler: vec![false; n],
            handler_count: 0,
            handler_acc: 0,
            handler_since: 0,
            wire_rng,
        }
    }

    pub(crate) fn size(&self) -> usize {
        self.dead.len()
    }

    pub(crate) fn now(&self) -> Time {
        match self.clock {
            Clock::Logical(t) => t,
            Clock::Wall(start) => start.elapsed().as_micros() as Time,
        }
    }

    pub(crate) fn set_now(&mut self, t: Time) {
        if let Clock::Logical(now) = &mut self.clock {
            *now = t;
        }
    }

    pub(crate) fn handler_time(&self) -> Time {
        let open = if self.handler_count > 0 {
            self.now().saturating_sub(self.handler_since)
        } else {
            0
        };
        self.handler_acc + open
    }

    pub(crate) fn useful_now(&self) -> Time {
        self.now().saturating_sub(self.handler_time())
    }

    pub(crate) fn in_handler_any(&self) -> bool {
        self.handler_count > 0
    }

    pub(crate) fn is_dead(&self, r: PhysRank) -> bool {
        self.dead[r]
    }

    pub(crate) fn is_exited(&self, r: PhysRank) -> bool {
        self.exited[r]
    }

    pub(crate) fn kills(&self) -> &[KillEvent] {
        &self.kills
    }

    pub(crate) fn visible_count(&self) -> usize {
        let now = self.now();
        let lat = self.cfg.detection_latency;
        self.kills.iter().take_while(|k| k.time + lat <= now).count()
    }

    /// Absolute time at which the next not-yet-visible kill becomes visible.
    pub(crate) fn next_detection(&self) -> Option<Time> {
        let now = self.now();
        let lat = self.cfg.detection_latency;
        self.kills.iter().map(|k| k.time + lat).find(|&t| t > now)
    }

    pub(crate) fn next_wire(&self) -> Option<Time> {
        self.wire.peek().map(|w| w.at)
    }

    pub(crate) fn activity(&self, r: PhysRank) -> u64 {
        self.activity[r]
    }

    fn bump(&mut self, r: PhysRank) {
        self.activity[r] = self.activity[r].wrapping_add(1);
    }

    pub(crate) fn bump_all(&mut self) {
        for a in &mut self.activity {
            *a = a.wrapping_add(1);
        }
    }

    pub(crate) fn runnable(&self, r: PhysRank) -> bool {
        match self.block[r] {
            Block::Runnable => true,
            Block::Activity(snap) => self.activity[r] != snap,
            Block::Until(t) => self.now() >= t,
        }
    }

    fn handle(&mut self) -> u64 {
        let h = self.next_handle;
        self.next_handle += 1;
        h
    }

    fn transmit(&mut self, env: Envelope, handle: u64) {
        match self.clock {
            Clock::Wall(_) => self.deliver(env, handle),
            Clock::Logical(now) => {
                let jitter = if self.cfg.wire_jitter > 0 {
                    self.wire_rng.gen_range(0..=self.cfg.wire_jitter)
                } else {
                    0
                };
                let key = (env.src, env.dst);
                let floor = self.last_at.get(&key).copied().unwrap_or(0);
                let at = (now + 1 + jitter).max(floor);
                self.last_at.insert(key, at);
                self.seq += 1;
                self.wire.push(Wired {
                    at,
                    seq: self.seq,
                    handle,
                    env,
                });
            }
        }
    }

    fn set_status(&mut self, handle: u64, status: SendStatus, src: PhysRank) {
        if let Some(entry) = self.sends.get_mut(&handle) {
            entry.0 = status;
            self.bump(src);
        }
    }

    fn deliver(&mut self, env: Envelope, handle: u64) {
        let (src, dst) = (env.src, env.dst);
        if self.dead[dst] || (comm_epoch(env.comm) < self.epoch[dst] && env.tag != TAG_REVOKE) {
            self.set_status(handle, SendStatus::Lost, src);
            return;
        }
        if env.kind == MsgKind::Control && env.tag == TAG_REVOKE {
            self.set_status(handle, SendStatus::Delivered, src);
            let members = decode_members(&env.payload);
            self.mark_revoked(dst, env.comm, &members);
            return;
        }
        self.mailboxes[dst].push_back(env);
        self.bump(dst);
        self.set_status(handle, SendStatus::Delivered, src);
    }

    pub(crate) fn deliver_due(&mut self) {
        let now = self.now();
        while self.wire.peek().is_some_and(|w| w.at <= now) {
            let w = self.wire.pop().expect("peeked");
            self.deliver(w.env, w.handle);
        }
    }

    fn mark_revoked(&mut self, at: PhysRank, comm: CommId, members: &[PhysRank]) {
        if !self.revoked[at].insert(comm) {
            return;
        }
        self.bump(at);
        let payload = encode_members(members);
        for &m in members {
            if m != at && !self.dead[m] {
                let env = Envelope {
                    src: at,
                    dst: m,
                    kind: MsgKind::Control,
                    comm,
                    tag: TAG_REVOKE,
                    send_id: 0,
                    payload: payload.clone(),
                };
                self.transmit(env, 0);
            }
        }
    }

    pub(crate) fn kill(&mut self, victim: PhysRank) {
        if self.dead[victim] {
            return;
        }
        let useful = self.useful_now();
        self.set_recovering(victim, false);
        self.dead[victim] = true;
        self.kills.push(KillEvent {
            time: self.now(),
            useful,
            victim,
        });
        self.mailboxes[victim].clear();
        let policy = self.cfg.in_flight;
        let wire = std::mem::take(&mut self.wire).into_vec();
        let mut kept = Vec::with_capacity(wire.len());
        for w in wire {
            let keep = w.env.src != victim
                || match policy {
                    InFlightPolicy::Deliver => true,
                    InFlightPolicy::Drop => false,
                    InFlightPolicy::Random => self.wire_rng.gen_bool(0.5),
                };
            if keep {
                kept.push(w);
            } else {
                self.sends.remove(&w.handle);
            }
        }
        self.wire = kept.into();
        self.block[victim] = Block::Runnable;
    }

    pub(crate) fn set_recovering(&mut self, r: PhysRank, on: bool) {
        if self.in_handler[r] == on {
            return;
        }
        self.in_handler[r] = on;
        let now = self.now();
        if on {
            if self.handler_count == 0 {
                self.handler_since = now;
            }
            self.handler_count += 1;
        } else {
            self.handler_count -= 1;
            if self.handler_count == 0 {
                self.handler_acc += now.saturating_sub(self.handler_since);
            }
        }
    }

    pub(crate) fn mark_exited(&mut self, r: PhysRank) {
        self.exited[r] = true;
        self.set_recovering(r, false);
        self.check_finished();
    }

    /// The run is over once every live rank finished its program, every kill
    /// is visible and every live rank has handled all of them.
    pub(crate) fn check_finished(&mut self) {
        if self.finished {
            return;
        }
        let visible = self.visible_count();
        if visible != self.kills.len() {
            return;
        }
        let all = (0..self.size())
            .filter(|&r| !self.dead[r])
            .all(|r| self.exited[r] || (self.done[r] && self.handled[r] == visible));
        if all {
            self.finished = true;
            self.bump_all();
        }
    }

    pub(crate) fn is_finished(&self) -> bool {
        self.finished
    }

    pub(crate) fn live_candidates(&self) -> Vec<PhysRank> {
        (0..self.size())
            .filter(|&r| !self.dead[r] && !self.exited[r])
            .collect()
    }
}

fn encode_members(members: &[PhysRank]) -> Vec<u8> {
    members
        .iter()
        .flat_map(|&m| (m as u32).to_le_bytes())
        .collect()
}

fn decode_members(bytes: &[u8]) -> Vec<PhysRank> {
    bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as PhysRank)
        .collect()
}

const WIRE_STREAM: u64 = 0x7769_7265_5eed_0f01;

pub(crate) struct Shared {
    state: Mutex<State>,
}

impl Shared {
    pub(crate) fn new(n: usize, cfg: TransportConfig) -> Arc<Self> {
        Arc::new(Self {
            state: Mutex::new(State::new(n, cfg)),
        })
    }

    pub(crate) fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// A rank's handle on the transport.
#[derive(Clone)]
pub struct Endpoint {
    shared: Arc<Shared>,
    me: PhysRank,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint").field("me", &self.me).finish()
    }
}

impl Endpoint {
    pub(crate) fn new(shared: Arc<Shared>, me: PhysRank) -> Self {
        Self { shared, me }
    }

    pub fn rank(&self) -> PhysRank {
        self.me
    }

    pub fn world_size(&self) -> usize {
        self.shared.lock().size()
    }

    pub fn now(&self) -> Time {
        self.shared.lock().now()
    }

    pub fn config(&self) -> TransportConfig {
        self.shared.lock().cfg.clone()
    }

    pub fn post_send(
        &self,
        dst: PhysRank,
        kind: MsgKind,
        comm: CommId,
        tag: u64,
        send_id: SendId,
        payload: Vec<u8>,
    ) -> SendHandle {
        let mut st = self.shared.lock();
        let h = st.handle();
        st.sends.insert(h, (SendStatus::OnWire, dst, comm));
        let env = Envelope {
            src: self.me,
            dst,
            kind,
            comm,
            tag,
            send_id,
            payload,
        };
        st.transmit(env, h);
        SendHandle(h)
    }

    pub fn test_send(&self, h: SendHandle) -> Test<()> {
        let mut st = self.shared.lock();
        let Some(&(status, dst, comm)) = st.sends.get(&h.0) else {
            // Dropped at the sender's kill or already reaped.
            return Test::Incomplete;
        };
        if st.revoked[self.me].contains(&comm) {
            return Test::Revoked;
        }
        match status {
            SendStatus::Delivered => {
                st.sends.remove(&h.0);
                Test::Complete(())
            }
            SendStatus::OnWire | SendStatus::Lost => {
                let visible = st.visible_count();
                if st.kills[..visible].iter().any(|k| k.victim == dst) {
                    Test::PeerDead
                } else {
                    Test::Incomplete
                }
            }
        }
    }

    /// Stops tracking a send whose completion no longer matters.
    pub fn forget(&self, h: SendHandle) {
        self.shared.lock().sends.remove(&h.0);
    }

    pub fn post_recv(&self, src: PhysRank, kind: MsgKind, comm: CommId, tag: u64) -> RecvHandle {
        RecvHandle {
            src,
            kind,
            comm,
            tag,
        }
    }

    pub fn test_recv(&self, h: &RecvHandle) -> Test<Envelope> {
        let mut st = self.shared.lock();
        let me = self.me;
        let pos = st.mailboxes[me]
            .iter()
            .position(|e| e.src == h.src && e.kind == h.kind && e.comm == h.comm && e.tag == h.tag);
        if let Some(i) = pos {
            let env = st.mailboxes[me].remove(i).expect("index from position");
            return Test::Complete(env);
        }
        if st.revoked[me].contains(&h.comm) {
            return Test::Revoked;
        }
        let visible = st.visible_count();
        if st.kills[..visible].iter().any(|k| k.victim == h.src) {
            Test::PeerDead
        } else {
            Test::Incomplete
        }
    }

    /// Marks `comm` revoked here and floods the revocation to `members`.
    pub fn revoke(&self, comm: CommId, members: &[PhysRank]) {
        self.shared.lock().mark_revoked(self.me, comm, members);
    }

    pub fn is_revoked(&self, comm: CommId) -> bool {
        self.shared.lock().revoked[self.me].contains(&comm)
    }

    pub fn probe_failures(&self) -> FailureNotice {
        let st = self.shared.lock();
        let visible = st.visible_count();
        FailureNotice {
            dead: st.kills[..visible].iter().map(|k| k.victim).collect(),
            observed_at: st.now(),
        }
    }

    /// Visible dead ranks in kill order. Every rank sees a prefix of the same
    /// sequence.
    pub fn visible_dead(&self) -> Vec<PhysRank> {
        let st = self.shared.lock();
        let visible = st.visible_count();
        st.kills[..visible].iter().map(|k| k.victim).collect()
    }

    pub fn visible_count(&self) -> usize {
        self.shared.lock().visible_count()
    }

    /// Moves this rank to `epoch` and discards queued traffic of older epochs.
    pub fn set_epoch(&self, epoch: u64) {
        let mut st = self.shared.lock();
        let me = self.me;
        st.epoch[me] = epoch;
        st.mailboxes[me].retain(|e| comm_epoch(e.comm) >= epoch);
    }

    pub fn set_recovering(&self, on: bool) {
        self.shared.lock().set_recovering(self.me, on);
    }

    pub fn set_handled(&self, n: usize) {
        let mut st = self.shared.lock();
        st.handled[self.me] = n;
        st.check_finished();
    }

    pub fn mark_done(&self) {
        let mut st = self.shared.lock();
        st.done[self.me] = true;
        st.check_finished();
    }

    pub fn finished(&self) -> bool {
        let mut st = self.shared.lock();
        st.check_finished();
        st.finished
    }

    fn park(&self, b: Block) -> Pause {
        self.shared.lock().block[self.me] = b;
        Pause(false)
    }

    /// Gives other ranks a turn.
    pub fn yield_now(&self) -> impl Future<Output = ()> {
        Pause(false)
    }

    /// Suspends until something addressed to this rank happens.
    pub fn idle(&self) -> impl Future<Output = ()> {
        let snap = self.shared.lock().activity(self.me);
        self.park(Block::Activity(snap))
    }

    pub fn sleep_until(&self, t: Time) -> impl Future<Output = ()> {
        self.park(Block::Until(t))
    }

    /// Local work of `units` time units.
    pub async fn compute(&self, units: Time) {
        if units == 0 {
            return;
        }
        let (model, start) = {
            let st = self.shared.lock();
            (st.cfg.compute, st.now())
        };
        if let ComputeModel::Burn { iters_per_unit } = model {
            burn(units.saturating_mul(iters_per_unit));
        }
        let end = start + units;
        while self.now() < end {
            self.sleep_until(end).await;
        }
    }
}

/// Busy CPU kernel standing in for application computation.
pub fn burn(iters: u64) -> u64 {
    let mut x = 0x9e37_79b9_7f4a_7c15u64;
    for i in 0..iters {
        x = std::hint::black_box(x.rotate_left(5) ^ i).wrapping_mul(0x2545_f491_4f6c_dd1d);
    }
    x
}

struct Pause(bool);

impl Future for Pause {
    type Output = ();
    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<()> {
        if self.0 {
            Poll::Ready(())
        } else {
            self.0 = true;
            Poll::Pending
        }
    }
}

pub type RankFuture<'a, T> = Pin<Box<dyn Future<Output = Result<T, Interrupted>> + 'a>>;

/// Runs `program` on `n` ranks under the configured scheduler.
pub fn spawn_world<T, F, Fut>(
    n: usize,
    cfg: TransportConfig,
    kills: &[PlannedKill],
    program: F,
) -> Result<RunReport<T>, RuntimeError>
where
    T: Send,
    F: Fn(Endpoint) -> Fut + Sync,
    Fut: Future<Output = Result<T, Interrupted>>,
{
    assert!(n >= 1, "a world needs at least one rank");
    match cfg.sched {
        SchedMode::Deterministic => det::run(n, cfg, kills, program),
        SchedMode::Threaded => threaded::run(n, cfg, kills, program),
    }
}
