use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ftrep_core::rank::Delivery;
use ftrep_core::scalar::ReduceOp;
use ftrep_core::transport::{spawn_world, InFlightPolicy, KillTrigger, PlannedKill, RunReport, Victim};
use ftrep_core::{Endpoint, FtMode, Interrupted, Placement, Rank, RankStats, TransportConfig, WorldLayout};

type Out = (u64, Vec<Delivery>, RankStats);

async fn ring(ep: Endpoint, layout: WorldLayout, iters: usize) -> Result<Out, Interrupted> {
    let mut r = Rank::new(ep, layout, FtMode::Full);
    let n = r.user_size();
    let me = r.user_rank();
    let mut acc = me as u64 + 1;
    for i in 0..iters {
        let next = (me + 1) % n;
        let prev = (me + n - 1) % n;
        let req = r.ft_isend(next, 7, &acc.to_le_bytes()).await;
        let got = r.ft_recv(prev, 7).await?;
        r.ft_wait(req).await?;
        acc = acc.wrapping_mul(31).wrapping_add(u64::from_le_bytes(got.try_into().unwrap()));
        r.ft_send(prev, 8, &[i as u8]).await?;
        r.ft_recv(next, 8).await?;
        let s = r.ft_allreduce(&[acc as i64], ReduceOp::Sum).await?;
        acc ^= s[0] as u64;
        if i % 2 == 1 {
            r.ft_barrier().await?;
        }
    }
    r.finalize().await?;
    Ok((acc, r.trace().to_vec(), r.stats().clone()))
}

fn run(n_comp: usize, deg: f64, seed: u64, in_flight: InFlightPolicy, kills: &[PlannedKill]) -> RunReport<Out> {
    let layout = WorldLayout::build(n_comp, deg).unwrap();
    let cfg = TransportConfig {
        seed,
        in_flight,
        wire_jitter: seed % 3,
        ..TransportConfig::default()
    };
    spawn_world(layout.world_size(), cfg, kills, |ep| ring(ep, layout.clone(), 3))
        .unwrap_or_else(|e| panic!("{e} with kills {kills:?} seed {seed}"))
}

fn placement(n: usize, deg: f64) -> Placement {
    Placement::initial(WorldLayout::build(n, deg).unwrap())
}

/// Final result and delivery trace per user rank, checking that surviving
/// incarnations of a user agree.
fn by_user(report: &RunReport<Out>, place: &Placement) -> BTreeMap<usize, (u64, Vec<Delivery>)> {
    let mut m = BTreeMap::new();
    for (p, o) in report.outputs.iter().enumerate() {
        if let Some((acc, trace, _)) = o {
            let u = place.caller(p).unwrap().user;
            let mut t = trace.clone();
            t.sort();
            if let Some(prev) = m.insert(u, (*acc, t.clone())) {
                assert_eq!(prev, (*acc, t), "incarnations of user {u} disagree");
            }
        }
    }
    m
}

fn at_step(s: u64, v: usize) -> PlannedKill {
    PlannedKill {
        trigger: KillTrigger::Step(s),
        victim: Victim::Rank(v),
    }
}

#[test]
fn failure_free_results_do_not_depend_on_degree() {
    let want = by_user(&run(4, 0.0, 1, InFlightPolicy::Random, &[]), &placement(4, 0.0));
    for deg in [0.25, 0.5, 1.0] {
        let rep = run(4, deg, 2, InFlightPolicy::Random, &[]);
        assert_eq!(by_user(&rep, &placement(4, deg)), want);
    }
}

#[test]
fn every_single_kill_point_is_survived_with_full_replication() {
    let place = placement(4, 1.0);
    let base = run(4, 1.0, 1, InFlightPolicy::Random, &[]);
    let want = by_user(&base, &place);
    let (mut killed, mut resends, mut suppressed) = (0, 0, 0);
    for victim in 0..8 {
        for s in 1..=base.steps {
            let rep = run(4, 1.0, 1, InFlightPolicy::Random, &[at_step(s, victim)]);
            assert!(rep.interrupted.is_none(), "victim {victim} step {s}");
            assert_eq!(by_user(&rep, &place), want, "victim {victim} step {s}");
            killed += rep.kills.len();
            for (_, _, st) in rep.outputs.iter().flatten() {
                resends += st.resends;
                suppressed += st.skipped + st.duplicates_dropped;
            }
        }
    }
    assert!(killed > 0 && resends > 0 && suppressed > 0);
}

#[test]
fn unreplicated_kill_interrupts_and_replicated_kill_does_not() {
    let place = placement(4, 0.5);
    let base = run(4, 0.5, 3, InFlightPolicy::Drop, &[]);
    let want = by_user(&base, &place);
    for victim in 0..6 {
        for s in (1..base.steps).step_by(7) {
            let rep = run(4, 0.5, 3, InFlightPolicy::Drop, &[at_step(s, victim)]);
            let user = place.caller(victim).unwrap().user;
            if place.layout().has_replica(user) {
                assert!(rep.interrupted.is_none(), "victim {victim} step {s}");
                assert_eq!(by_user(&rep, &place), want);
            } else if rep.kills.len() == 1 {
                let i = rep.interrupted.expect("unreplicated death interrupts");
                assert_eq!((i.user, i.dead), (user, 1));
            }
        }
    }
}

#[test]
fn random_double_kills_keep_exactly_once_delivery() {
    let place = placement(4, 1.0);
    let base = run(4, 1.0, 5, InFlightPolicy::Random, &[]);
    let want = by_user(&base, &place);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut doubles = 0;
    for trial in 0..150 {
        let a = rng.gen_range(0..8);
        let b = loop {
            let b = rng.gen_range(0..8);
            if b % 4 != a % 4 {
                break b;
            }
        };
        let s1 = rng.gen_range(1..base.steps);
        let s2 = s1 + rng.gen_range(0..base.steps / 2);
        let policy = [InFlightPolicy::Deliver, InFlightPolicy::Drop, InFlightPolicy::Random][trial % 3];
        let rep = run(4, 1.0, 5 + trial as u64, policy, &[at_step(s1, a), at_step(s2, b)]);
        if rep.kills.len() < 2 {
            continue;
        }
        assert!(rep.interrupted.is_none(), "trial {trial}");
        assert_eq!(by_user(&rep, &place), want, "trial {trial}: kills {a}@{s1} {b}@{s2}");
        doubles += 1;
    }
    assert!(doubles > 100, "only {doubles} runs saw both kills");
}

#[test]
fn promoted_replica_reports_promotion() {
    let rep = run(2, 1.0, 1, InFlightPolicy::Random, &[at_step(20, 0)]);
    let (_, _, stats) = rep.outputs[2].as_ref().unwrap();
    assert!(stats.promoted);
    assert!(stats.handler_runs >= 1);
    let (_, _, other) = rep.outputs[1].as_ref().unwrap();
    assert!(!other.promoted);
}

#[test]
fn threaded_scheduler_survives_timed_kill() {
    let layout = WorldLayout::build(3, 1.0).unwrap();
    let place = Placement::initial(layout.clone());
    let want = by_user(&run(3, 1.0, 1, InFlightPolicy::Random, &[]), &place);
    let cfg = TransportConfig {
        sched: ftrep_core::SchedMode::Threaded,
        detection_latency: 200,
        ..TransportConfig::default()
    };
    for victim in [1, 4] {
        let kills = [PlannedKill {
            trigger: KillTrigger::UsefulTime(20),
            victim: Victim::Rank(victim),
        }];
        let rep = spawn_world(6, cfg.clone(), &kills, |ep| ring(ep, layout.clone(), 3)).unwrap();
        assert_eq!(rep.kills.len(), 1);
        assert!(rep.interrupted.is_none());
        assert_eq!(by_user(&rep, &place), want);
    }
}
