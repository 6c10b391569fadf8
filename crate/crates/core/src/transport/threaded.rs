//! One OS thread per rank over a wall clock measured in microseconds.
//!
//! Each thread drives its rank's future with a no-op waker and checks its
//! dead flag between polls. The calling thread acts as the fault injector.

use std::future::Future;
use std::sync::atomic::{AtomicBool, Ordering};
use std::task::{Context, Poll, Waker};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Block, Endpoint, KillTrigger, PlannedKill, RunReport, Shared, TransportConfig, Victim};
use crate::error::{Interrupted, RuntimeError};

pub(crate) fn run<T, F, Fut>(
    n: usize,
    cfg: TransportConfig,
    plan: &[PlannedKill],
    program: F,
) -> Result<RunReport<T>, RuntimeError>
where
    T: Send,
    F: Fn(Endpoint) -> Fut + Sync,
    Fut: Future<Output = Result<T, Interrupted>>,
{
    let mut timed = Vec::new();
    for k in plan {
        match (k.trigger, k.victim) {
            (KillTrigger::UsefulTime(t), v @ (Victim::Rank(_) | Victim::Uniform)) => timed.push((t, v)),
            (trigger, victim) => {
                return Err(RuntimeError::UnsupportedTrigger(format!("{trigger:?} / {victim:?}")))
            }
        }
    }
    timed.sort_by_key(|&(t, _)| t);
    let timeout = cfg.wall_timeout;
    let mut kill_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6b69_6c6c);
    let shared = Shared::new(n, cfg);
    let timed_out = AtomicBool::new(false);
    let started = Instant::now();

    let (outputs, interrupted, panicked) = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .map(|r| {
                let ep = Endpoint::new(shared.clone(), r);
                let shared = shared.clone();
                let program = &program;
                s.spawn(move || drive(r, &shared, program(ep)))
            })
            .collect();

        let mut next = 0;
        while handles.iter().any(|h| !h.is_finished()) {
            if started.elapsed() > timeout {
                timed_out.store(true, Ordering::SeqCst);
                shared.lock().aborted = true;
                break;
            }
            let mut st = shared.lock();
            st.check_finished();
            while next < timed.len() && !st.is_finished() && st.useful_now() >= timed[next].0 {
                let victim = match timed[next].1 {
                    Victim::Rank(r) => Some(r),
                    _ => {
                        let live = st.live_candidates();
                        (!live.is_empty()).then(|| live[kill_rng.gen_range(0..live.len())])
                    }
                };
                if let Some(v) = victim {
                    st.kill(v);
                    st.bump_all();
                }
                next += 1;
            }
            drop(st);
            std::thread::sleep(Duration::from_micros(50));
        }

        let mut outputs = Vec::with_capacity(n);
        let mut interrupted = None;
        let mut panicked = None;
        for (r, h) in handles.into_iter().enumerate() {
            match h.join() {
                Ok(Some(Ok(v))) => outputs.push(Some(v)),
                Ok(Some(Err(e))) => {
                    interrupted.get_or_insert(e);
                    outputs.push(None);
                }
                Ok(None) => outputs.push(None),
                Err(_) => {
                    panicked.get_or_insert(r);
                    outputs.push(None);
                }
            }
        }
        (outputs, interrupted, panicked)
    });

    if let Some(r) = panicked {
        return Err(RuntimeError::RankPanicked(r));
    }
    let st = shared.lock();
    if timed_out.load(Ordering::SeqCst) {
        let blocked = (0..n).filter(|&r| !st.is_dead(r) && !st.is_exited(r)).collect();
        return Err(RuntimeError::Deadlock {
            time: st.now(),
            blocked,
        });
    }
    let end_time = st.now();
    let handler_time = st.handler_time();
    Ok(RunReport {
        outputs,
        interrupted,
        kills: st.kills().to_vec(),
        end_time,
        handler_time,
        useful_time: end_time.saturating_sub(handler_time),
        steps: 0,
        schedule_digest: 0,
    })
}

fn drive<T, Fut>(r: usize, shared: &Shared, fut: Fut) -> Option<Result<T, Interrupted>>
where
    Fut: Future<Output = Result<T, Interrupted>>,
{
    let mut fut = std::pin::pin!(fut);
    let mut cx = Context::from_waker(Waker::noop());
    let mut idle_polls = 0u32;
    let mut seen_visible = 0usize;
    loop {
        {
            let mut st = shared.lock();
            if st.is_dead(r) || st.aborted {
                return None;
            }
            st.block[r] = Block::Runnable;
        }
        if let Poll::Ready(out) = fut.as_mut().poll(&mut cx) {
            let mut st = shared.lock();
            if st.is_dead(r) {
                return None;
            }
            st.mark_exited(r);
            if out.is_err() {
                st.aborted = true;
            }
            return Some(out);
        }
        let blocked = {
            let st = shared.lock();
            let visible = st.visible_count();
            let changed = visible != seen_visible;
            seen_visible = visible;
            !changed && !st.runnable(r)
        };
        if blocked {
            idle_polls = idle_polls.saturating_add(1);
            if idle_polls > 64 {
                std::thread::sleep(Duration::from_micros(20));
            } else {
                std::thread::yield_now();
            }
        } else {
            idle_polls = 0;
        }
    }
}
