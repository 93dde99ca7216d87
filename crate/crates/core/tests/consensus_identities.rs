use nalgebra::Vector2;
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use swarm_pddp::consensus::{
    apply_globals, check_stop, outgoing_copies, residuals, CopySnapshot, Family, StopCriteria,
};
use swarm_pddp::net::{build_topology, GlobalMessage, MessageBus, NeighborhoodSize, Topology};
use swarm_pddp::scenarios::builtin;

mod oracles;
use oracles::{at_consensus, dual_update_deviation, family_norms, global_average_deviation, random_state, rel_dev, v3};

#[test]
fn global_average_matches_summation() {
    let mut rng = StdRng::seed_from_u64(0xc0_5e45);
    for case in 0..100 {
        let before = random_state(&mut rng);
        let (worst, mut state, mut bus) = global_average_deviation(&before, case);
        assert!(worst <= 1e-12, "case {case}: {worst:e}");

        let posts = state
            .agents
            .iter()
            .map(|a| {
                Some(GlobalMessage {
                    about: a.id,
                    z: a.z.clone(),
                    s: a.s,
                })
            })
            .collect();
        let inboxes = bus.exchange_globals(case, posts).unwrap();
        apply_globals(&mut state, &inboxes).unwrap();
        for a in &state.agents {
            for (b, &j) in a.neighbors.iter().enumerate() {
                assert_eq!(a.z_stack[b], state.agents[j].z);
                assert_eq!(a.s_stack[b], state.agents[j].s);
            }
        }
    }
}

#[test]
fn dual_update_matches_summation() {
    let mut rng = StdRng::seed_from_u64(0xd0a1_0001);
    for case in 0..100 {
        let worst = dual_update_deviation(&random_state(&mut rng));
        assert!(worst <= 1e-12, "case {case}: {worst:e}");
    }
}

#[test]
fn residuals_match_field_sums() {
    let mut rng = StdRng::seed_from_u64(0x7e51_d0a1);
    for _ in 0..100 {
        let prev = random_state(&mut rng);
        let mut state = prev.clone();
        // move the copies only
        for a in &mut state.agents {
            for u in &mut a.u_tilde {
                *u += rng.gen_range(-0.1..0.1);
            }
            for blk in a.x_stack.iter_mut().chain(a.z_stack.iter_mut()) {
                for p in blk {
                    *p += v3(&mut rng, 2.0);
                }
            }
            for t in a.t_stack.iter_mut().chain(a.s_stack.iter_mut()) {
                *t += rng.gen_range(-0.2..0.2);
            }
        }
        let report = residuals(&state, &CopySnapshot::take(&prev));
        for f in Family::ALL {
            let (p, d) = family_norms(&state, &prev, f);
            let r = report.family(f);
            assert!(rel_dev(r.primal, p) <= 1e-12, "{f:?} primal");
            assert!(rel_dev(r.dual, d) <= 1e-12, "{f:?} dual");
        }
    }
}

#[test]
fn residuals_vanish_at_consensus() {
    let mut rng = StdRng::seed_from_u64(0x2e40);
    let criteria = StopCriteria {
        eps_abs: 0.0,
        eps_rel: 0.0,
        max_iter: 1,
    };
    for _ in 0..100 {
        let state = at_consensus(random_state(&mut rng));
        let report = residuals(&state, &CopySnapshot::take(&state));
        for r in &report.families {
            assert_eq!(r.primal, 0.0, "{:?}", r.family);
            assert_eq!(r.dual, 0.0, "{:?}", r.family);
        }
        assert!(check_stop(&report, &criteria));
    }
}

fn topology_strategy() -> impl Strategy<Value = (Vec<Vector2<f64>>, usize)> {
    (2usize..12).prop_flat_map(|m| {
        (
            prop::collection::vec((0.0..500.0f64, 0.0..500.0f64).prop_map(|(x, y)| Vector2::new(x, y)), m),
            1..=m,
        )
    })
}

proptest! {
    #[test]
    fn deemed_sets_are_the_transpose((pos, size) in topology_strategy()) {
        let t = build_topology(&pos, NeighborhoodSize::Count(size)).unwrap();
        for i in 0..t.m {
            prop_assert_eq!(t.neighbor_sets[i].len(), size);
            prop_assert_eq!(t.neighbor_sets[i][0], i);
            for j in 0..t.m {
                prop_assert_eq!(t.neighbor_sets[j].contains(&i), t.deemed_sets[i].contains(&j));
            }
        }
        let rebuilt = Topology::from_neighbor_sets(t.neighbor_sets.clone()).unwrap();
        prop_assert_eq!(rebuilt, t);
    }
}

#[test]
fn ring_formation_message_counts() {
    let cfg = builtin(3).unwrap();
    let topology = cfg.topology().unwrap();
    let per_round: usize = topology.neighbor_sets.iter().map(Vec::len).sum();
    assert_eq!(per_round, 16 * 5);
    let mut bus = MessageBus::new(topology.clone()).with_trace();
    let mut rng = StdRng::seed_from_u64(3);
    let posts = (0..16)
        .map(|j| {
            let mut a = random_state(&mut rng).agents.swap_remove(0);
            a.id = j;
            a.neighbors = topology.neighbor_sets[j].clone();
            let b = a.neighbors.len();
            a.x_stack = vec![a.x_stack[0].clone(); b];
            a.y = vec![a.y[0].clone(); b];
            a.t_stack = vec![9.0; b];
            a.eta = vec![0.0; b];
            Some(outgoing_copies(&a))
        })
        .collect();
    let inboxes = bus.exchange_copies(1, posts).unwrap();
    assert_eq!(inboxes.iter().map(Vec::len).sum::<usize>(), per_round);
    assert_eq!(bus.trace().unwrap().len(), per_round);
    for (i, inbox) in inboxes.iter().enumerate() {
        let senders: Vec<usize> = inbox.iter().map(|c| c.from).collect();
        assert_eq!(senders, topology.deemed_sets[i]);
    }
}
