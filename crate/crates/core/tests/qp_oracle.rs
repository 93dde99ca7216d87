use nalgebra::{DMatrix, DVector, Vector3};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use swarm_pddp::qp::{project_box, solve_qp, solve_state_safe, solve_time_safe, LinearRow};

mod oracles;
use oracles::{enumerate_qp, quadratic, state_instance, state_objective, state_qp, time_instance, time_qp};

#[test]
fn state_safe_matches_enumeration() {
    let mut rng = StdRng::seed_from_u64(0x0a11_5afe);
    for case in 0..500 {
        let inst = state_instance(&mut rng);
        let sol = solve_state_safe(&inst.own, &inst.stack, &inst.constraints).unwrap();
        assert!(!sol.infeasible, "case {case}");
        let (h, g, rows) = state_qp(&inst);
        let (x, _) = enumerate_qp(&h, &g, &[], &rows).expect("anchor is feasible");
        let oracle: Vec<Vector3<f64>> = (0..inst.stack.len())
            .map(|b| Vector3::new(x[2 * b], x[2 * b + 1], 0.0))
            .collect();
        let want = state_objective(&inst, &oracle);
        let got = state_objective(&inst, &sol.stack);
        assert!(
            (got - want).abs() <= 1e-6 * (1.0 + want.abs()),
            "case {case}: {got} vs {want}"
        );
        for (r, row) in rows.iter().enumerate() {
            let xs = DVector::from_iterator(2 * inst.stack.len(), sol.stack.iter().flat_map(|p| [p.x, p.y]));
            assert!(row.coeffs.dot(&xs) - row.rhs > -1e-8, "case {case} row {r}");
        }
        // headings are the weighted averages
        let w0 = inst.own.weight + inst.stack[0].weight;
        let h0 = (inst.own.weight * inst.own.target.z + inst.stack[0].weight * inst.stack[0].target.z) / w0;
        assert!((sol.stack[0].z - h0).abs() < 1e-12);
    }
}

#[test]
fn time_safe_matches_enumeration() {
    let mut rng = StdRng::seed_from_u64(0x0a11_713e);
    for case in 0..500 {
        let inst = time_instance(&mut rng);
        let sol = solve_time_safe(&inst.own, &inst.stack, inst.seq.as_ref(), inst.bounds).unwrap();
        assert!(!sol.infeasible, "case {case}");
        let (h, g, eq, ineq) = time_qp(&inst);
        assert!(eq.len() + ineq.len() <= 4);
        let (_, want) = enumerate_qp(&h, &g, &eq, &ineq).expect("feasible by construction");
        let x = DVector::from_column_slice(&sol.stack);
        let got = quadratic(&h, &g, &x);
        assert!(
            (got - want).abs() <= 1e-6 * (1.0 + want.abs()),
            "case {case}: {got} vs {want}"
        );
        assert!(sol.stack[0] >= inst.bounds.0 - 1e-9 && sol.stack[0] <= inst.bounds.1 + 1e-9);
    }
}

#[test]
fn general_qp_satisfies_kkt() {
    let mut rng = StdRng::seed_from_u64(0x0a11_0c0c);
    for case in 0..200 {
        let n = rng.gen_range(1..=4);
        let l = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.5;
        let g = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
        let anchor = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
        let ineq: Vec<LinearRow> = (0..rng.gen_range(0..=4))
            .map(|_| {
                let a = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
                let rhs = a.dot(&anchor) - rng.gen_range(0.0..1.0);
                LinearRow::new(a, rhs)
            })
            .collect();
        let sol = solve_qp(&h, &g, &[], &ineq).unwrap();
        assert!(sol.feasible);
        let mut grad = &h * &sol.x + &g;
        for (row, &m) in ineq.iter().zip(&sol.ineq_multipliers) {
            assert!(m >= 0.0);
            let slack = row.coeffs.dot(&sol.x) - row.rhs;
            assert!(slack > -1e-8, "case {case}");
            assert!((m * slack).abs() < 1e-7, "complementarity, case {case}");
            grad -= &row.coeffs * m;
        }
        assert!(grad.amax() < 1e-7, "stationarity, case {case}: {}", grad.amax());
        let (_, want) = enumerate_qp(&h, &g, &[], &ineq).unwrap();
        assert!((sol.objective - want).abs() <= 1e-6 * (1.0 + want.abs()));
    }
}

proptest! {
    #[test]
    fn box_projection_is_idempotent_and_inside(
        v in prop::collection::vec(-10.0..10.0f64, 1..8),
        lo in -5.0..0.0f64,
        width in 0.0..6.0f64,
    ) {
        let lo_v = vec![lo; v.len()];
        let hi_v = vec![lo + width; v.len()];
        let p = project_box(&v, &lo_v, &hi_v);
        prop_assert_eq!(project_box(&p, &lo_v, &hi_v), p.clone());
        for (x, y) in v.iter().zip(&p) {
            prop_assert!(*y >= lo && *y <= lo + width);
            if *x >= lo && *x <= lo + width {
                prop_assert_eq!(x, y);
            }
        }
    }
}
