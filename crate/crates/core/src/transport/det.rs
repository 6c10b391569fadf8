//! Deterministic logical-time scheduler.
//!
//! One rank is polled per step, chosen uniformly among runnable ranks by a
//! seeded RNG. Each step first delivers due envelopes and applies due kills.
//! The clock advances one unit per step; when every rank is blocked it jumps
//! to the next timer, delivery, detection or timed kill.

use std::future::Future;
use std::pin::Pin;
use std::task::{Context, Poll, Waker};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    Block, Endpoint, KillTrigger, PlannedKill, RunReport, Shared, State, TransportConfig, Victim,
};
use crate::error::{Interrupted, RuntimeError};
use crate::{PhysRank, Time};

const KILL_STREAM: u64 = 0x6b69_6c6c;

type Task<'a, T> = Pin<Box<dyn Future<Output = Result<T, Interrupted>> + 'a>>;

pub(crate) fn run<T, F, Fut>(
    n: usize,
    cfg: TransportConfig,
    plan: &[PlannedKill],
    program: F,
) -> Result<RunReport<T>, RuntimeError>
where
    F: Fn(Endpoint) -> Fut,
    Fut: Future<Output = Result<T, Interrupted>>,
{
    let step_limit = cfg.step_limit;
    let mut pick_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut kill_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ KILL_STREAM);
    let shared = Shared::new(n, cfg);
    let mut tasks: Vec<Option<Task<'_, T>>> = (0..n)
        .map(|r| Some(Box::pin(program(Endpoint::new(shared.clone(), r))) as Task<'_, T>))
        .collect();
    let mut outputs: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let mut pending: Vec<PlannedKill> = plan.to_vec();
    let mut interrupted = None;
    let mut steps = 0u64;
    let mut digest = 0xcbf2_9ce4_8422_2325u64;
    let mut seen_visible = 0usize;
    let mut cx = Context::from_waker(Waker::noop());

    loop {
        let mut st = shared.lock();
        st.deliver_due();
        let visible = st.visible_count();
        if visible != seen_visible {
            seen_visible = visible;
            st.bump_all();
            st.check_finished();
        }
        if !st.is_finished() {
            let mut victims = Vec::new();
            pending.retain(|k| match k.trigger {
                KillTrigger::UsefulTime(t) if st.useful_now() >= t => {
                    victims.push(k.victim);
                    false
                }
                _ => true,
            });
            for v in victims {
                if let Some(victim) = resolve(&st, v, None, &mut kill_rng) {
                    st.kill(victim);
                    tasks[victim] = None;
                }
            }
        }
        if tasks.iter().all(Option::is_none) {
            break;
        }
        let runnable: Vec<PhysRank> = (0..n)
            .filter(|&r| tasks[r].is_some() && st.runnable(r))
            .collect();
        if runnable.is_empty() {
            match next_event(&st, &tasks, &pending) {
                Some(t) => {
                    st.set_now(t);
                    continue;
                }
                None => {
                    let blocked = (0..n).filter(|&r| tasks[r].is_some()).collect();
                    return Err(RuntimeError::Deadlock {
                        time: st.now(),
                        blocked,
                    });
                }
            }
        }
        let r = runnable[pick_rng.gen_range(0..runnable.len())];
        steps += 1;
        if steps > step_limit {
            return Err(RuntimeError::StepLimit(step_limit));
        }
        digest = (digest ^ r as u64).wrapping_mul(0x0100_0000_01b3);
        if !st.is_finished() {
            let mut victims = Vec::new();
            pending.retain(|k| match k.trigger {
                KillTrigger::Step(s) if s == steps => {
                    victims.push(k.victim);
                    false
                }
                _ => true,
            });
            let mut killed_picked = false;
            for v in victims {
                if let Some(victim) = resolve(&st, v, Some(r), &mut kill_rng) {
                    st.kill(victim);
                    killed_picked |= victim == r;
                    tasks[victim] = None;
                }
            }
            if killed_picked {
                let now = st.now();
                st.set_now(now + 1);
                continue;
            }
        }
        st.block[r] = Block::Runnable;
        drop(st);

        let task = tasks[r].as_mut().expect("runnable rank has a task");
        let polled = task.as_mut().poll(&mut cx);
        let mut st = shared.lock();
        if let Poll::Ready(result) = polled {
            tasks[r] = None;
            match result {
                Ok(v) => {
                    outputs[r] = Some(v);
                    st.mark_exited(r);
                }
                Err(e) => {
                    st.mark_exited(r);
                    interrupted = Some(e);
                    st.aborted = true;
                }
            }
        }
        let now = st.now();
        st.set_now(now + 1);
        if interrupted.is_some() {
            break;
        }
    }

    let st = shared.lock();
    let end_time = st.now();
    let handler_time = st.handler_time();
    let kills = st.kills().to_vec();
    drop(st);
    drop(tasks);
    Ok(RunReport {
        outputs,
        interrupted,
        kills,
        end_time,
        handler_time,
        useful_time: end_time.saturating_sub(handler_time),
        steps,
        schedule_digest: digest,
    })
}

fn resolve(
    st: &State,
    v: Victim,
    scheduled: Option<PhysRank>,
    rng: &mut ChaCha8Rng,
) -> Option<PhysRank> {
    match v {
        Victim::Rank(r) => (!st.is_dead(r) && !st.is_exited(r)).then_some(r),
        Victim::Scheduled => scheduled,
        Victim::Uniform => {
            let live = st.live_candidates();
            (!live.is_empty()).then(|| live[rng.gen_range(0..live.len())])
        }
    }
}

fn next_event<T>(st: &State, tasks: &[Option<Task<'_, T>>], pending: &[PlannedKill]) -> Option<Time> {
    let now = st.now();
    let mut best: Option<Time> = None;
    let mut consider = |t: Time| {
        if t > now {
            best = Some(best.map_or(t, |b| b.min(t)));
        }
    };
    for (r, task) in tasks.iter().enumerate() {
        if task.is_some() {
            if let Block::Until(t) = st.block[r] {
                consider(t);
            }
        }
    }
    if let Some(t) = st.next_wire() {
        consider(t.max(now + 1));
    }
    if let Some(t) = st.next_detection() {
        consider(t);
    }
    if !st.in_handler_any() && !st.is_finished() {
        let useful = st.useful_now();
        for k in pending {
            if let KillTrigger::UsefulTime(t) = k.trigger {
                consider(now + t.saturating_sub(useful).max(1));
            }
        }
    }
    best
}
