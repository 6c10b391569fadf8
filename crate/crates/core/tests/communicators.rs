use std::collections::BTreeSet;

use ftrep_core::communicator::CommunicatorSet;
use ftrep_core::recovery::repair_plan;
use ftrep_core::{Placement, WorldLayout};

/// Expected survivor order: live computational processes or their replicas
/// in user order, then replicas whose partners both survive.
fn expected_order(initial: &Placement, dead: &BTreeSet<usize>) -> Option<Vec<usize>> {
    let l = initial.layout();
    let mut front = Vec::new();
    for u in 0..l.n_comp() {
        let live: Vec<usize> = initial.incarnations(u).into_iter().filter(|p| !dead.contains(p)).collect();
        front.push(*live.first()?);
    }
    let back = initial
        .replicas()
        .iter()
        .copied()
        .filter(|&r| !dead.contains(&r) && !dead.contains(&initial.cmp_phys(initial.caller(r).unwrap().user)));
    Some(front.into_iter().chain(back).collect())
}

fn check(initial: &Placement, kills: &[usize]) -> bool {
    let dead: BTreeSet<usize> = kills.iter().copied().collect();
    let want = expected_order(initial, &dead);
    match repair_plan(initial, kills) {
        Ok(plan) => {
            let want = want.unwrap_or_else(|| panic!("{kills:?} should be fatal"));
            assert_eq!(plan.order, want, "{kills:?}");
            let place = plan.placement();
            let comms = CommunicatorSet::build(&place, kills.len() as u64);
            let errs = comms.validate(&place, &dead);
            assert!(errs.is_empty(), "{kills:?}: {errs:?}");
            let n = place.layout().n_comp();
            for (&cmp, &rep) in &plan.promotions {
                let pos = place.position_of(rep).unwrap();
                assert!(pos < n);
                assert_eq!(pos, initial.position_of(cmp).unwrap());
            }
            true
        }
        Err(e) => {
            assert!(want.is_none(), "{kills:?} is survivable but got {e:?}");
            false
        }
    }
}

#[test]
fn all_single_and_double_failures() {
    let mut survivable = 0;
    for n in 1..=8 {
        for r in 0..=n {
            let initial = Placement::initial(WorldLayout::build(n, r as f64 / n as f64).unwrap());
            let w = initial.layout().world_size();
            for a in 0..w {
                survivable += check(&initial, &[a]) as usize;
                for b in (0..w).filter(|&b| b != a) {
                    survivable += check(&initial, &[a, b]) as usize;
                }
            }
        }
    }
    assert!(survivable > 1000);
}
