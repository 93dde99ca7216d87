//! Independent reference computations shared by the test targets.
#![allow(dead_code, clippy::needless_range_loop)]

use nalgebra::{DMatrix, DVector, Matrix3, RowVector3, Vector2, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use swarm_pddp::consensus::{
    dual_update_all, outgoing_copies, step3_global, AgentVars, ConsensusState, Family, Penalties,
};
use swarm_pddp::model::{AgentState, AgentTrajectory, Control, Dynamics, Integrator, StepJacobians, Unicycle};
use swarm_pddp::net::{build_topology, MessageBus, NeighborhoodSize};
use swarm_pddp::pddp::{backward_pass, solve_local, Bounds, CostWeights, SolveOptions};
use swarm_pddp::penalty::SpectralSnapshot;
use swarm_pddp::qp::{HalfPlane, LinearRow, SafeConstraint, TimeSequenceSpec, WeightedPoint, WeightedScalar};
use swarm_pddp::Result;

// ---------------------------------------------------------------- LQR

/// Time-invariant `x' = A x + B u`, independent of the final time.
pub struct LinearStep {
    pub a: Matrix3<f64>,
    pub b: Vector3<f64>,
    pub n: usize,
}

impl Dynamics for LinearStep {
    fn n_steps(&self) -> usize {
        self.n
    }

    fn step(&self, x: &Vector3<f64>, u: f64, _t_final: f64) -> Result<Vector3<f64>> {
        Ok(self.a * x + self.b * u)
    }

    fn jacobians(&self, _x: &Vector3<f64>, _u: f64, _t_final: f64) -> Result<StepJacobians> {
        Ok(StepJacobians {
            f_x: self.a,
            f_u: self.b,
            f_theta: Vector3::zeros(),
        })
    }
}

/// Unicycle linearized about straight flight on `heading`.
pub fn linearized_unicycle(heading: f64, t_final: f64, n: usize) -> LinearStep {
    let v = 30.0;
    let h = t_final / n as f64;
    let mut a = Matrix3::identity();
    a[(0, 2)] = -h * v * heading.sin();
    a[(1, 2)] = h * v * heading.cos();
    LinearStep {
        a,
        b: Vector3::new(0.0, 0.0, h),
        n,
    }
}

/// Finite-horizon discrete Riccati recursion. Returns gains `K_k` with `u_k = -K_k x_k`.
pub fn riccati_gains(sys: &LinearStep, q: &Matrix3<f64>, r: f64, q_final: &Matrix3<f64>) -> Vec<RowVector3<f64>> {
    let mut p = *q_final;
    let mut gains = vec![RowVector3::zeros(); sys.n];
    for k in (0..sys.n).rev() {
        let bp = sys.b.transpose() * p;
        let denom = r + (bp * sys.b)[0];
        let gain = (bp * sys.a) / denom;
        p = q + sys.a.transpose() * p * sys.a - sys.a.transpose() * p * sys.b * gain;
        p = 0.5 * (p + p.transpose());
        gains[k] = gain;
    }
    gains
}

pub fn zero_rollout<D: Dynamics>(sys: &D, x0: AgentState, t_final: f64) -> AgentTrajectory {
    sys.rollout(&x0, &vec![Control::new(0.0); sys.n_steps()], t_final)
        .unwrap()
}

pub struct LqrComparison {
    pub control_error: f64,
    pub gain_error: f64,
    pub t_final_kept: bool,
}

/// Solves a tracking LQR with the local solver and compares against Riccati.
pub fn lqr_comparison() -> LqrComparison {
    let t_final = 9.0;
    let sys = linearized_unicycle(0.3, t_final, 100);
    let weights = CostWeights {
        w_terminal: [25.0, 25.0, 25.0],
        r_control: 1.0,
        w_state: [0.5, 0.5, 2.0],
        target: AgentState::new(0.0, 0.0, 0.0),
    };
    let x0 = AgentState::new(-40.0, 25.0, 0.4);
    let init = zero_rollout(&sys, x0, t_final);
    let opts = SolveOptions {
        epsilon: 1e-14,
        max_inner: 5,
        alpha: 1.0,
        freeze_theta: true,
        ..SolveOptions::default()
    };
    let sol = solve_local(&sys, &init, &weights, None, &Bounds::unbounded(), &opts).unwrap();

    let q = Matrix3::from_diagonal(&Vector3::from(weights.w_state));
    let qf = Matrix3::from_diagonal(&Vector3::from(weights.w_terminal));
    let gains = riccati_gains(&sys, &q, weights.r_control, &qf);
    let mut x = x0.to_vector();
    let mut control_error: f64 = 0.0;
    for (k, gain) in gains.iter().enumerate() {
        let u = -(gain * x)[0];
        control_error = control_error.max((u - sol.trajectory.controls[k].omega).abs());
        x = sys.a * x + sys.b * u;
    }
    let pass = backward_pass(&sys, &sol.trajectory, &weights, None, 0.0, true).unwrap();
    let gain_error = gains
        .iter()
        .enumerate()
        .map(|(k, g)| (pass.feedback[k] + g).abs().max())
        .fold(0.0, f64::max);
    LqrComparison {
        control_error,
        gain_error,
        t_final_kept: sol.trajectory.t_final == t_final,
    }
}

// ----------------------------------------------------------- Jacobians

/// Central difference of the step map along coordinate `dir` of (x, u, t).
pub fn central(sys: &Unicycle, x: &Vector3<f64>, u: f64, t: f64, dir: usize) -> Vector3<f64> {
    let mut args = [x[0], x[1], x[2], u, t];
    let h = 1e-6 * args[dir].abs().max(1.0);
    let eval = |args: [f64; 5]| {
        sys.step(&Vector3::new(args[0], args[1], args[2]), args[3], args[4])
            .unwrap()
    };
    args[dir] += h;
    let plus = eval(args);
    args[dir] -= 2.0 * h;
    let minus = eval(args);
    (plus - minus) / (2.0 * h)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Worst relative Jacobian error over random samples of state, turn rate and final time.
pub fn jacobian_worst_error(integrator: Integrator, samples: usize, seed: u64) -> f64 {
    let sys = Unicycle::new(swarm_pddp::model::DynamicsParams {
        integrator,
        ..Default::default()
    })
    .unwrap();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let x = Vector3::new(
            rng.gen_range(-600.0..600.0),
            rng.gen_range(-600.0..600.0),
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        );
        let u = rng.gen_range(-sys.params.omega_max..sys.params.omega_max);
        let t = rng.gen_range(5.0..15.0);
        let jac = sys.jacobians(&x, u, t).unwrap();
        for dir in 0..5 {
            let fd = central(&sys, &x, u, t, dir);
            let col = match dir {
                0..=2 => jac.f_x.column(dir).into_owned(),
                3 => jac.f_u,
                _ => jac.f_theta,
            };
            for r in 0..3 {
                worst = worst.max(rel_err(col[r], fd[r]));
            }
        }
    }
    worst
}

// ------------------------------------------------------------------ QP

/// Brute-force convex QP: minimize over every subset of active inequalities
/// and keep the best feasible face minimizer.
pub fn enumerate_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    eq: &[LinearRow],
    ineq: &[LinearRow],
) -> Option<(DVector<f64>, f64)> {
    let n = g.len();
    let mut best: Option<(DVector<f64>, f64)> = None;
    for mask in 0u32..(1 << ineq.len()) {
        let rows: Vec<&LinearRow> = eq
            .iter()
            .chain(
                ineq.iter()
                    .enumerate()
                    .filter(|(i, _)| mask & (1 << i) != 0)
                    .map(|(_, r)| r),
            )
            .collect();
        let m = rows.len();
        if m > 0 {
            let a = DMatrix::from_fn(m, n, |r, c| rows[r].coeffs[c]);
            if a.clone().svd(false, false).rank(1e-9) < m {
                continue;
            }
        }
        let mut kkt = DMatrix::zeros(n + m, n + m);
        let mut rhs = DVector::zeros(n + m);
        kkt.view_mut((0, 0), (n, n)).copy_from(h);
        for c in 0..n {
            rhs[c] = -g[c];
        }
        for (r, row) in rows.iter().enumerate() {
            for c in 0..n {
                kkt[(n + r, c)] = row.coeffs[c];
                kkt[(c, n + r)] = row.coeffs[c];
            }
            rhs[n + r] = row.rhs;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        let feasible = eq.iter().all(|r| (r.coeffs.dot(&x) - r.rhs).abs() < 1e-8)
            && ineq.iter().all(|r| r.coeffs.dot(&x) - r.rhs > -1e-8);
        if !feasible {
            continue;
        }
        let f = 0.5 * x.dot(&(h * &x)) + g.dot(&x);
        if best.as_ref().is_none_or(|(_, b)| f < *b) {
            best = Some((x, f));
        }
    }
    best
}

fn unit(rng: &mut StdRng) -> Vector2<f64> {
    let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    Vector2::new(a.cos(), a.sin())
}

/// Position subproblem with up to three blocks and four half-planes.
pub struct StateInstance {
    pub own: WeightedPoint,
    pub stack: Vec<WeightedPoint>,
    pub constraints: Vec<SafeConstraint>,
}

pub fn state_instance(rng: &mut StdRng) -> StateInstance {
    let blocks = rng.gen_range(1..=3);
    let point = |rng: &mut StdRng| WeightedPoint {
        target: Vector3::new(
            rng.gen_range(-50.0..50.0),
            rng.gen_range(-50.0..50.0),
            rng.gen_range(-1.0..1.0),
        ),
        weight: rng.gen_range(0.1..5.0),
    };
    let own = point(rng);
    let stack: Vec<WeightedPoint> = (0..blocks).map(|_| point(rng)).collect();
    // a point every constraint admits
    let anchor: Vec<Vector2<f64>> = (0..blocks)
        .map(|_| Vector2::new(rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0)))
        .collect();
    let count = rng.gen_range(1..=4);
    let constraints = (0..count)
        .map(|_| {
            let normal = unit(rng);
            let slack = rng.gen_range(0.0..20.0);
            if blocks > 1 && rng.gen_bool(0.5) {
                let block = rng.gen_range(1..blocks);
                let offset = normal.dot(&(anchor[0] - anchor[block])) - slack;
                SafeConstraint::Pair {
                    block,
                    plane: HalfPlane { normal, offset },
                }
            } else {
                SafeConstraint::Own(HalfPlane {
                    normal,
                    offset: normal.dot(&anchor[0]) - slack,
                })
            }
        })
        .collect();
    StateInstance {
        own,
        stack,
        constraints,
    }
}

/// Dense form of the position subproblem, built independently of the solver.
pub fn state_qp(inst: &StateInstance) -> (DMatrix<f64>, DVector<f64>, Vec<LinearRow>) {
    let b = inst.stack.len();
    let mut h = DMatrix::zeros(2 * b, 2 * b);
    let mut g = DVector::zeros(2 * b);
    let mut add = |blk: usize, p: &WeightedPoint| {
        for d in 0..2 {
            h[(2 * blk + d, 2 * blk + d)] += p.weight;
            g[2 * blk + d] -= p.weight * p.target[d];
        }
    };
    add(0, &inst.own);
    for (blk, p) in inst.stack.iter().enumerate() {
        add(blk, p);
    }
    let rows = inst
        .constraints
        .iter()
        .map(|c| {
            let mut coeffs = DVector::zeros(2 * b);
            let plane = match c {
                SafeConstraint::Own(p) => p,
                SafeConstraint::Pair { block, plane } => {
                    coeffs[2 * block] = -plane.normal.x;
                    coeffs[2 * block + 1] = -plane.normal.y;
                    plane
                }
            };
            coeffs[0] = plane.normal.x;
            coeffs[1] = plane.normal.y;
            LinearRow::new(coeffs, plane.offset)
        })
        .collect();
    (h, g, rows)
}

pub fn state_objective(inst: &StateInstance, stack: &[Vector3<f64>]) -> f64 {
    let sq = |p: &Vector3<f64>, q: &WeightedPoint| 0.5 * q.weight * (p.xy() - q.target.xy()).norm_squared();
    sq(&stack[0], &inst.own) + stack.iter().zip(&inst.stack).map(|(p, q)| sq(p, q)).sum::<f64>()
}

/// Final-time subproblem with bounds and at most one sequence row.
pub struct TimeInstance {
    pub own: WeightedScalar,
    pub stack: Vec<WeightedScalar>,
    pub seq: Option<TimeSequenceSpec>,
    pub bounds: (f64, f64),
}

pub fn time_instance(rng: &mut StdRng) -> TimeInstance {
    let blocks = rng.gen_range(1..=3);
    let scalar = |rng: &mut StdRng| WeightedScalar {
        target: rng.gen_range(8.0..11.0),
        weight: rng.gen_range(0.1..5.0),
    };
    let own = scalar(rng);
    let stack: Vec<WeightedScalar> = (0..blocks).map(|_| scalar(rng)).collect();
    let bounds = (rng.gen_range(8.0..9.5), rng.gen_range(9.5..11.0));
    let seq = (blocks > 1 && rng.gen_bool(0.7)).then(|| {
        let col = rng.gen_range(1..blocks);
        let relax = if rng.gen_bool(0.3) {
            0.0
        } else {
            rng.gen_range(0.0..0.05)
        };
        TimeSequenceSpec::from_pairs(blocks, &[(col, rng.gen_range(-0.3..0.3))], relax)
    });
    TimeInstance {
        own,
        stack,
        seq,
        bounds,
    }
}

/// Dense form: `(H, g, equalities, inequalities)`.
pub fn time_qp(inst: &TimeInstance) -> (DMatrix<f64>, DVector<f64>, Vec<LinearRow>, Vec<LinearRow>) {
    let blocks = inst.stack.len();
    let mut h = DMatrix::zeros(blocks, blocks);
    let mut g = DVector::zeros(blocks);
    h[(0, 0)] += inst.own.weight;
    g[0] -= inst.own.weight * inst.own.target;
    for (j, s) in inst.stack.iter().enumerate() {
        h[(j, j)] += s.weight;
        g[j] -= s.weight * s.target;
    }
    let e0 = DVector::from_fn(blocks, |i, _| if i == 0 { 1.0 } else { 0.0 });
    let mut ineq = vec![
        LinearRow::new(e0.clone(), inst.bounds.0),
        LinearRow::new(-e0, -inst.bounds.1),
    ];
    let mut eq = Vec::new();
    if let Some(s) = &inst.seq {
        let a = DVector::from_column_slice(&s.matrix_a[0]);
        if s.relax[0] == 0.0 {
            eq.push(LinearRow::new(a, s.t_delta[0]));
        } else {
            ineq.push(LinearRow::new(a.clone(), s.t_delta[0] - s.relax[0]));
            ineq.push(LinearRow::new(-a, -(s.t_delta[0] + s.relax[0])));
        }
    }
    (h, g, eq, ineq)
}

pub fn quadratic(h: &DMatrix<f64>, g: &DVector<f64>, x: &DVector<f64>) -> f64 {
    0.5 * x.dot(&(h * x)) + g.dot(x)
}

// ----------------------------------------------------------- consensus

pub const STEPS: usize = 6;

pub fn v3(rng: &mut StdRng, scale: f64) -> Vector3<f64> {
    Vector3::new(
        rng.gen_range(-scale..scale),
        rng.gen_range(-scale..scale),
        rng.gen_range(-1.0..1.0),
    )
}

fn path(rng: &mut StdRng, scale: f64) -> Vec<Vector3<f64>> {
    (0..=STEPS).map(|_| v3(rng, scale)).collect()
}

/// Small swarm with random trajectories, copies, duals and penalties.
pub fn random_state(rng: &mut StdRng) -> ConsensusState {
    let m = rng.gen_range(2..=6);
    let positions: Vec<Vector2<f64>> = (0..m)
        .map(|_| Vector2::new(rng.gen_range(0.0..300.0), rng.gen_range(0.0..300.0)))
        .collect();
    let size = rng.gen_range(1..=m);
    let topology = build_topology(&positions, NeighborhoodSize::Count(size)).unwrap();
    let agents = (0..m)
        .map(|i| {
            let neighbors = topology.neighbor_sets[i].clone();
            let b = neighbors.len();
            let traj = AgentTrajectory {
                states: path(rng, 200.0).iter().map(AgentState::from_vector).collect(),
                controls: (0..STEPS).map(|_| Control::new(rng.gen_range(-0.5..0.5))).collect(),
                t_final: rng.gen_range(8.0..11.0),
            };
            AgentVars {
                id: i,
                neighbors,
                traj,
                u_tilde: (0..STEPS).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                x_stack: (0..b).map(|_| path(rng, 200.0)).collect(),
                t_stack: (0..b).map(|_| rng.gen_range(8.0..11.0)).collect(),
                z: path(rng, 200.0),
                s: rng.gen_range(8.0..11.0),
                z_stack: (0..b).map(|_| path(rng, 200.0)).collect(),
                s_stack: (0..b).map(|_| rng.gen_range(8.0..11.0)).collect(),
                zeta: (0..STEPS).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                lambda: path(rng, 3.0),
                nu: rng.gen_range(-3.0..3.0),
                y: (0..b).map(|_| path(rng, 3.0)).collect(),
                eta: (0..b).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                pen: Penalties {
                    tau: rng.gen_range(0.05..5.0),
                    rho: rng.gen_range(0.05..5.0),
                    mu: rng.gen_range(0.05..5.0),
                    sigma: rng.gen_range(0.05..5.0),
                    gamma: rng.gen_range(0.05..5.0),
                },
            }
        })
        .collect();
    ConsensusState { topology, agents }
}

/// Relative deviation used by the identity checks.
pub fn rel_dev(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}

/// Runs the global step through the bus and returns the worst deviation
/// from the holder-average formula, together with the updated state.
pub fn global_average_deviation(before: &ConsensusState, round: usize) -> (f64, ConsensusState, MessageBus) {
    let m = before.agents.len();
    let mut state = before.clone();
    let mut bus = MessageBus::new(state.topology.clone());
    let posts = state.agents.iter().map(|a| Some(outgoing_copies(a))).collect();
    let inboxes = bus.exchange_copies(round, posts).unwrap();
    step3_global(&mut state, &inboxes, round).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..m {
        // every j that lists i contributes its copy of i plus scaled dual
        let holders: Vec<(usize, usize)> = (0..m)
            .filter_map(|j| before.agents[j].neighbors.iter().position(|&x| x == i).map(|b| (j, b)))
            .collect();
        assert!(!holders.is_empty());
        let count = holders.len() as f64;
        for k in 0..=STEPS {
            for d in 0..3 {
                let mut acc = 0.0;
                for &(j, b) in &holders {
                    let aj = &before.agents[j];
                    acc += aj.x_stack[b][k][d] + aj.y[b][k][d] / aj.pen.mu;
                }
                worst = worst.max(rel_dev(state.agents[i].z[k][d], acc / count));
            }
        }
        let s: f64 = holders
            .iter()
            .map(|&(j, b)| before.agents[j].t_stack[b] + before.agents[j].eta[b] / before.agents[j].pen.gamma)
            .sum();
        worst = worst.max(rel_dev(state.agents[i].s, s / count));
    }
    (worst, state, bus)
}

/// Worst deviation of the dual ascent from the field-by-field formula.
/// Infinite if the penalties changed.
pub fn dual_update_deviation(before: &ConsensusState) -> f64 {
    let mut state = before.clone();
    dual_update_all(&mut state);
    let mut worst: f64 = 0.0;
    for (a, old) in state.agents.iter().zip(&before.agents) {
        let p = old.pen;
        if a.pen != p {
            return f64::INFINITY;
        }
        for k in 0..STEPS {
            let want = old.zeta[k] + p.tau * (old.traj.controls[k].omega - old.u_tilde[k]);
            worst = worst.max(rel_dev(a.zeta[k], want));
        }
        for k in 0..=STEPS {
            let x = old.traj.states[k];
            let local = [x.x, x.y, x.heading];
            for d in 0..3 {
                let want = old.lambda[k][d] + p.rho * (local[d] - old.x_stack[0][k][d]);
                worst = worst.max(rel_dev(a.lambda[k][d], want));
            }
        }
        for b in 0..old.neighbors.len() {
            for k in 0..=STEPS {
                for d in 0..3 {
                    let want = old.y[b][k][d] + p.mu * (old.x_stack[b][k][d] - old.z_stack[b][k][d]);
                    worst = worst.max(rel_dev(a.y[b][k][d], want));
                }
            }
            let want = old.eta[b] + p.gamma * (old.t_stack[b] - old.s_stack[b]);
            worst = worst.max(rel_dev(a.eta[b], want));
        }
        worst = worst.max(rel_dev(a.nu, old.nu + p.sigma * (old.traj.t_final - old.t_stack[0])));
    }
    worst
}

/// Sum of squares over every agent for one family, computed field by field.
pub fn family_norms(state: &ConsensusState, prev: &ConsensusState, f: Family) -> (f64, f64) {
    let mut p2 = 0.0;
    let mut d2 = 0.0;
    for (a, o) in state.agents.iter().zip(&prev.agents) {
        let pen = a.pen.get(f);
        let mut add = |x: f64, c: f64, c_old: f64| {
            p2 += (x - c).powi(2);
            d2 += (pen * (c - c_old)).powi(2);
        };
        match f {
            Family::U => {
                for k in 0..STEPS {
                    add(a.traj.controls[k].omega, a.u_tilde[k], o.u_tilde[k]);
                }
            }
            Family::X => {
                for k in 0..=STEPS {
                    let x = a.traj.states[k].to_vector();
                    for d in 0..3 {
                        add(x[d], a.x_stack[0][k][d], o.x_stack[0][k][d]);
                    }
                }
            }
            Family::XStack => {
                for b in 0..a.neighbors.len() {
                    for k in 0..=STEPS {
                        for d in 0..3 {
                            add(a.x_stack[b][k][d], a.z_stack[b][k][d], o.z_stack[b][k][d]);
                        }
                    }
                }
            }
            Family::T => add(a.traj.t_final, a.t_stack[0], o.t_stack[0]),
            Family::TStack => {
                for b in 0..a.neighbors.len() {
                    add(a.t_stack[b], a.s_stack[b], o.s_stack[b]);
                }
            }
        }
    }
    (p2.sqrt(), d2.sqrt())
}

/// Copies set equal to the local variables and the globals.
pub fn at_consensus(mut state: ConsensusState) -> ConsensusState {
    for a in &mut state.agents {
        a.u_tilde = a.traj.controls.iter().map(|c| c.omega).collect();
        a.x_stack[0] = a.traj.states.iter().map(AgentState::to_vector).collect();
        a.t_stack[0] = a.traj.t_final;
        a.z_stack.clone_from(&a.x_stack);
        a.s_stack.clone_from(&a.t_stack);
    }
    state
}

// ------------------------------------------------------------- penalty

/// Snapshot whose primal moves with slope `a` against the half-step dual and
/// whose copy moves with slope `b` against the dual.
pub fn linear_snapshot(n: usize, a: f64, b: f64, dual_hat: &[f64], dual: &[f64]) -> SpectralSnapshot {
    SpectralSnapshot {
        n,
        primal: dual_hat.iter().map(|l| a * l + 3.0).collect(),
        copy: dual.iter().map(|l| -b * l - 1.5).collect(),
        dual: dual.to_vec(),
        dual_hat: dual_hat.to_vec(),
    }
}
