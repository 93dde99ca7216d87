//! Distributed PDDP: consensus ADMM around per-agent PDDP solves.
//!
//! Each iteration runs three optimization steps and a dual update:
//!
//! 1. every agent re-solves its own trajectory against its safe copies,
//! 2. every agent projects its local trajectory and its neighbors' globals
//!    onto the linearized safety constraints (the "safe copies"),
//! 3. every agent averages the copies others hold of it into its global.
//!
//! Messages between agents go through [`MessageBus`]; residuals and the
//! stopping test gather global state and are telemetry, not agent logic.

use std::time::Instant;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AgentState, AgentTrajectory, Control, Dynamics, Unicycle};
use crate::net::{CopyMessage, GlobalMessage, MessageBus, Topology};
use crate::pddp::{solve_local, AugmentedTerms, Bounds, SolveOptions};
use crate::penalty::{PenaltyScheme, PenaltyUpdate, SchemeState};
use crate::qp::{
    linearize_keepin, linearize_keepout, solve_state_safe, solve_time_safe, HalfPlane, SafeConstraint, WeightedPoint,
    WeightedScalar,
};
use crate::scenarios::ScenarioConfig;

/// The five penalty parameters of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Penalties {
    pub tau: f64,
    pub rho: f64,
    pub mu: f64,
    pub sigma: f64,
    pub gamma: f64,
}

impl Penalties {
    pub fn get(&self, f: Family) -> f64 {
        match f {
            Family::U => self.tau,
            Family::X => self.rho,
            Family::XStack => self.mu,
            Family::T => self.sigma,
            Family::TStack => self.gamma,
        }
    }

    pub fn set(&mut self, f: Family, v: f64) {
        match f {
            Family::U => self.tau = v,
            Family::X => self.rho = v,
            Family::XStack => self.mu = v,
            Family::T => self.sigma = v,
            Family::TStack => self.gamma = v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if Family::ALL
            .iter()
            .all(|&f| self.get(f) > 0.0 && self.get(f).is_finite())
        {
            Ok(())
        } else {
            Err(Error::Config("penalties must be positive and finite".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopCriteria {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
}

/// Variable families, each with its own constraint, dual and penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `u = u~`, dual zeta, penalty tau.
    U,
    /// `x = x~`, dual lambda, penalty rho.
    X,
    /// `x~^a = z^a`, dual y, penalty mu.
    XStack,
    /// `t = t~`, dual nu, penalty sigma.
    T,
    /// `t~^a = s^a`, dual eta, penalty gamma.
    TStack,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::U, Family::X, Family::XStack, Family::T, Family::TStack];

    pub fn name(&self) -> &'static str {
        match self {
            Family::U => "u",
            Family::X => "x",
            Family::XStack => "x_stack",
            Family::T => "t",
            Family::TStack => "t_stack",
        }
    }
}

/// Everything one agent holds. Stack blocks follow `N_i`, self first.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentVars {
    pub id: usize,
    pub neighbors: Vec<usize>,
    pub traj: AgentTrajectory,
    pub u_tilde: Vec<f64>,
    pub x_stack: Vec<Vec<Vector3<f64>>>,
    pub t_stack: Vec<f64>,
    pub z: Vec<Vector3<f64>>,
    pub s: f64,
    pub z_stack: Vec<Vec<Vector3<f64>>>,
    pub s_stack: Vec<f64>,
    pub zeta: Vec<f64>,
    pub lambda: Vec<Vector3<f64>>,
    pub nu: f64,
    pub y: Vec<Vec<Vector3<f64>>>,
    pub eta: Vec<f64>,
    pub pen: Penalties,
}

impl AgentVars {
    pub fn x_tilde(&self) -> &[Vector3<f64>] {
        &self.x_stack[0]
    }

    pub fn t_tilde(&self) -> f64 {
        self.t_stack[0]
    }

    fn states(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.traj.states.iter().map(AgentState::to_vector)
    }

    pub fn augmented_terms(&self) -> AugmentedTerms {
        AugmentedTerms {
            x_tilde: self.x_stack[0].clone(),
            u_tilde: self.u_tilde.clone(),
            t_tilde: self.t_stack[0],
            lambda: self.lambda.clone(),
            zeta: self.zeta.clone(),
            nu: self.nu,
            rho: self.pen.rho,
            tau: self.pen.tau,
            sigma: self.pen.sigma,
        }
    }

    /// Flattened (primal, copy, dual) triple of a family, as used by the
    /// residuals and the penalty schemes.
    pub fn family_vectors(&self, f: Family) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let flat = |v: &mut dyn Iterator<Item = Vector3<f64>>| v.flat_map(|p| [p.x, p.y, p.z]).collect::<Vec<f64>>();
        match f {
            Family::U => (
                self.traj.controls.iter().map(|c| c.omega).collect(),
                self.u_tilde.clone(),
                self.zeta.clone(),
            ),
            Family::X => (
                flat(&mut self.states()),
                flat(&mut self.x_stack[0].iter().copied()),
                flat(&mut self.lambda.iter().copied()),
            ),
            Family::XStack => (
                flat(&mut self.x_stack.iter().flatten().copied()),
                flat(&mut self.z_stack.iter().flatten().copied()),
                flat(&mut self.y.iter().flatten().copied()),
            ),
            Family::T => (vec![self.traj.t_final], vec![self.t_stack[0]], vec![self.nu]),
            Family::TStack => (self.t_stack.clone(), self.s_stack.clone(), self.eta.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusState {
    pub topology: Topology,
    pub agents: Vec<AgentVars>,
}

/// Knobs of the engine that are not part of the problem statement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineOptions {
    /// Inner PDDP solve used in step 1.
    pub inner: SolveOptions,
    /// Plain DDP used for the warm start.
    pub warm_start: SolveOptions,
    /// Constant turn rate of the warm-start initial guess. A small nonzero
    /// value picks a consistent side for head-on encounters.
    pub warm_start_turn_bias: f64,
    /// Constraints are linearized only within this multiple of `d_o` of activity.
    pub activation_factor: f64,
    /// Worker threads; `None` uses the rayon default.
    pub threads: Option<usize>,
    pub record_bus_trace: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            inner: SolveOptions::default(),
            warm_start: SolveOptions {
                freeze_theta: true,
                max_inner: 200,
                line_search: true,
                alpha: 1.0,
                epsilon: 1e-8,
                ..SolveOptions::default()
            },
            warm_start_turn_bias: 1e-3,
            activation_factor: 2.0,
            threads: None,
            record_bus_trace: false,
        }
    }
}

fn bounds(scenario: &ScenarioConfig) -> Bounds {
    Bounds::symmetric(scenario.dynamics.omega_max, scenario.t_bounds.0, scenario.t_bounds.1)
}

/// Plain per-agent DDP ignoring every coupling, then copies, stacks and
/// globals initialized from the result with zero duals.
pub fn warm_start(scenario: &ScenarioConfig, topology: &Topology, opts: &EngineOptions) -> Result<ConsensusState> {
    let dynamics = Unicycle::new(scenario.dynamics)?;
    let n = scenario.dynamics.n_steps;
    let b = bounds(scenario);
    let trajs: Vec<AgentTrajectory> = (0..scenario.m())
        .into_par_iter()
        .map(|i| {
            let wrap = |e| Error::WarmStart {
                agent: i,
                source: Box::new(e),
            };
            let guess = vec![Control::new(opts.warm_start_turn_bias); n];
            let init = dynamics
                .rollout(&scenario.agents[i].initial, &guess, scenario.t_guess)
                .map_err(wrap)?;
            let sol =
                solve_local(&dynamics, &init, &scenario.weights_for(i), None, &b, &opts.warm_start).map_err(wrap)?;
            Ok(sol.trajectory)
        })
        .collect::<Result<_>>()?;

    let as_vecs = |t: &AgentTrajectory| t.states.iter().map(AgentState::to_vector).collect::<Vec<_>>();
    let agents = (0..scenario.m())
        .map(|i| {
            let set = topology.neighbor_sets[i].clone();
            let x_stack: Vec<Vec<Vector3<f64>>> = set.iter().map(|&j| as_vecs(&trajs[j])).collect();
            let t_stack: Vec<f64> = set.iter().map(|&j| trajs[j].t_final).collect();
            let nb = set.len();
            AgentVars {
                id: i,
                traj: trajs[i].clone(),
                u_tilde: trajs[i].controls.iter().map(|c| c.omega).collect(),
                z: x_stack[0].clone(),
                s: t_stack[0],
                z_stack: x_stack.clone(),
                s_stack: t_stack.clone(),
                x_stack,
                t_stack,
                zeta: vec![0.0; n],
                lambda: vec![Vector3::zeros(); n + 1],
                nu: 0.0,
                y: vec![vec![Vector3::zeros(); n + 1]; nb],
                eta: vec![0.0; nb],
                pen: scenario.penalties,
                neighbors: set,
            }
        })
        .collect();
    Ok(ConsensusState {
        topology: topology.clone(),
        agents,
    })
}

/// Step 1: augmented PDDP per agent. Returns the ids whose inner solve did not converge.
pub fn step1_all(state: &mut ConsensusState, scenario: &ScenarioConfig, opts: &SolveOptions) -> Result<Vec<usize>> {
    let dynamics = Unicycle::new(scenario.dynamics)?;
    let b = bounds(scenario);
    let flags: Vec<Option<usize>> = state
        .agents
        .par_iter_mut()
        .map(|a| {
            let aug = a.augmented_terms();
            match solve_local(&dynamics, &a.traj, &scenario.weights_for(a.id), Some(&aug), &b, opts) {
                Ok(sol) => {
                    a.traj = sol.trajectory;
                    (!sol.converged).then_some(a.id)
                }
                Err(e) => {
                    log::warn!("agent {}: inner solve failed ({e}); keeping previous trajectory", a.id);
                    Some(a.id)
                }
            }
        })
        .collect();
    Ok(flags.into_iter().flatten().collect())
}

fn perturbed_keepout(p: &Vector2<f64>, c: &Vector2<f64>, r: f64) -> Result<HalfPlane> {
    match linearize_keepout(p, c, r) {
        Err(Error::DegenerateLinearization) => linearize_keepout(&(p + Vector2::new(1e-6, 0.0)), c, r),
        other => other,
    }
}

/// Linearized constraints of one instant, about the nominal block positions.
pub fn safe_constraints(
    scenario: &ScenarioConfig,
    nominal: &[Vector2<f64>],
    activation_factor: f64,
) -> Result<Vec<SafeConstraint>> {
    let margin = activation_factor * scenario.d_obstacle_safe;
    let p0 = nominal[0];
    let mut out = Vec::new();
    for o in &scenario.obstacles {
        let r = o.radius + scenario.d_obstacle_safe;
        if (p0 - o.center).norm() < r + margin {
            out.push(SafeConstraint::Own(perturbed_keepout(&p0, &o.center, r)?));
        }
    }
    for (block, pb) in nominal.iter().enumerate().skip(1) {
        let diff = p0 - pb;
        let d = diff.norm();
        if d < scenario.d_collision + margin {
            let plane = perturbed_keepout(&diff, &Vector2::zeros(), scenario.d_collision)?;
            out.push(SafeConstraint::Pair { block, plane });
        }
        if d > scenario.d_comm - margin {
            let plane = linearize_keepin(&diff, &Vector2::zeros(), scenario.d_comm)?;
            out.push(SafeConstraint::Pair { block, plane });
        }
    }
    Ok(out)
}

/// Step 2: safe copies of states, controls and times. Returns the number of
/// QPs that fell back to a least-violation solution.
pub fn step2_all(state: &mut ConsensusState, scenario: &ScenarioConfig, activation_factor: f64) -> Result<usize> {
    let topology = &state.topology;
    let omega_max = scenario.dynamics.omega_max;
    let counts: Vec<usize> = state
        .agents
        .par_iter_mut()
        .map(|a| -> Result<usize> {
            let mut infeasible = 0;
            let p = a.pen;
            let n = a.traj.n_steps();
            for k in 0..=n {
                let x = a.traj.states[k].to_vector();
                let own = WeightedPoint {
                    target: x + a.lambda[k] / p.rho,
                    weight: p.rho,
                };
                let stack: Vec<WeightedPoint> = (0..a.neighbors.len())
                    .map(|b| WeightedPoint {
                        target: a.z_stack[b][k] - a.y[b][k] / p.mu,
                        weight: p.mu,
                    })
                    .collect();
                let nominal: Vec<Vector2<f64>> = a.x_stack.iter().map(|blk| blk[k].xy()).collect();
                let cons = safe_constraints(scenario, &nominal, activation_factor)?;
                let sol = solve_state_safe(&own, &stack, &cons)?;
                infeasible += sol.infeasible as usize;
                for (blk, v) in sol.stack.into_iter().enumerate() {
                    a.x_stack[blk][k] = v;
                }
            }
            for k in 0..n {
                a.u_tilde[k] = (a.traj.controls[k].omega + a.zeta[k] / p.tau).clamp(-omega_max, omega_max);
            }
            let own = WeightedScalar {
                target: a.traj.t_final + a.nu / p.sigma,
                weight: p.sigma,
            };
            let stack: Vec<WeightedScalar> = (0..a.neighbors.len())
                .map(|b| WeightedScalar {
                    target: a.s_stack[b] - a.eta[b] / p.gamma,
                    weight: p.gamma,
                })
                .collect();
            let rows = scenario.time_rows(topology, a.id);
            let sol = solve_time_safe(&own, &stack, rows.as_ref(), scenario.t_bounds)?;
            infeasible += sol.infeasible as usize;
            a.t_stack = sol.stack;
            Ok(infeasible)
        })
        .collect::<Result<_>>()?;
    let total = counts.iter().sum();
    if total > 0 {
        log::debug!("{total} safe-copy QPs fell back to least violation");
    }
    Ok(total)
}

/// Messages agent `j` sends to each member of `N_j` about that member.
pub fn outgoing_copies(a: &AgentVars) -> Vec<CopyMessage> {
    a.neighbors
        .iter()
        .enumerate()
        .map(|(b, &about)| CopyMessage {
            about,
            from: a.id,
            state_copy: a.x_stack[b].clone(),
            time_copy: a.t_stack[b],
            dual_y: a.y[b].clone(),
            dual_eta: a.eta[b],
            mu: a.pen.mu,
            gamma: a.pen.gamma,
        })
        .collect()
}

/// Step 3: `z_i` and `s_i` from the copies held by the agents in `P_i`.
pub fn step3_global(state: &mut ConsensusState, inboxes: &[Vec<CopyMessage>], round: usize) -> Result<()> {
    for (i, a) in state.agents.iter_mut().enumerate() {
        let msgs = &inboxes[i];
        let senders: Vec<usize> = msgs.iter().map(|m| m.from).collect();
        if senders != state.topology.deemed_sets[i] || msgs.iter().any(|m| m.about != i) {
            let missing = state.topology.deemed_sets[i]
                .iter()
                .find(|j| !senders.contains(j))
                .copied()
                .unwrap_or(i);
            return Err(Error::Synchronization { round, agent: missing });
        }
        let count = msgs.len() as f64;
        for k in 0..a.z.len() {
            let sum = msgs
                .iter()
                .fold(Vector3::zeros(), |acc, m| acc + m.state_copy[k] + m.dual_y[k] / m.mu);
            a.z[k] = sum / count;
        }
        a.s = msgs.iter().map(|m| m.time_copy + m.dual_eta / m.gamma).sum::<f64>() / count;
    }
    Ok(())
}

/// Refreshes each agent's view of its neighbors' globals.
pub fn apply_globals(state: &mut ConsensusState, inboxes: &[Vec<GlobalMessage>]) -> Result<()> {
    for (i, a) in state.agents.iter_mut().enumerate() {
        for (b, &j) in a.neighbors.iter().enumerate() {
            let msg = inboxes[i]
                .iter()
                .find(|g| g.about == j)
                .ok_or(Error::Synchronization { round: 0, agent: j })?;
            a.z_stack[b].clone_from(&msg.z);
            a.s_stack[b] = msg.s;
        }
    }
    Ok(())
}

pub fn dual_update_all(state: &mut ConsensusState) {
    state.agents.par_iter_mut().for_each(|a| {
        let p = a.pen;
        for k in 0..a.zeta.len() {
            a.zeta[k] += p.tau * (a.traj.controls[k].omega - a.u_tilde[k]);
        }
        for k in 0..a.lambda.len() {
            a.lambda[k] += p.rho * (a.traj.states[k].to_vector() - a.x_stack[0][k]);
        }
        for b in 0..a.y.len() {
            for k in 0..a.y[b].len() {
                a.y[b][k] += p.mu * (a.x_stack[b][k] - a.z_stack[b][k]);
            }
            a.eta[b] += p.gamma * (a.t_stack[b] - a.s_stack[b]);
        }
        a.nu += p.sigma * (a.traj.t_final - a.t_stack[0]);
    });
}

/// Copy-side iterates of the previous iteration, needed for dual residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct CopySnapshot {
    pub copies: Vec<[Vec<f64>; 5]>,
}

impl CopySnapshot {
    pub fn take(state: &ConsensusState) -> Self {
        Self {
            copies: state
                .agents
                .iter()
                .map(|a| Family::ALL.map(|f| a.family_vectors(f).1))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyResidual {
    pub family: Family,
    pub primal: f64,
    pub dual: f64,
    /// `max(|primal iterate|, |copy iterate|)`.
    pub primal_scale: f64,
    /// Norm of the stacked dual variable.
    pub dual_scale: f64,
    pub dim: usize,
}

impl FamilyResidual {
    pub fn primal_threshold(&self, c: &StopCriteria) -> f64 {
        (self.dim as f64).sqrt() * c.eps_abs + c.eps_rel * self.primal_scale
    }

    pub fn dual_threshold(&self, c: &StopCriteria) -> f64 {
        (self.dim as f64).sqrt() * c.eps_abs + c.eps_rel * self.dual_scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub families: Vec<FamilyResidual>,
}

impl ResidualReport {
    pub fn family(&self, f: Family) -> &FamilyResidual {
        self.families
            .iter()
            .find(|r| r.family == f)
            .expect("all families present")
    }
}

/// Primal and dual residuals of every family. Each agent's dual block is
/// scaled by that agent's own penalty.
pub fn residuals(state: &ConsensusState, prev: &CopySnapshot) -> ResidualReport {
    let families = Family::ALL
        .iter()
        .enumerate()
        .map(|(fi, &f)| {
            let mut r = FamilyResidual {
                family: f,
                primal: 0.0,
                dual: 0.0,
                primal_scale: 0.0,
                dual_scale: 0.0,
                dim: 0,
            };
            let (mut p2, mut d2, mut a2, mut c2, mut l2) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (a, old) in state.agents.iter().zip(&prev.copies) {
                let (primal, copy, dual) = a.family_vectors(f);
                let pen = a.pen.get(f);
                for ((x, c), o) in primal.iter().zip(&copy).zip(&old[fi]) {
                    p2 += (x - c) * (x - c);
                    d2 += (pen * (c - o)).powi(2);
                    a2 += x * x;
                    c2 += c * c;
                }
                l2 += dual.iter().map(|v| v * v).sum::<f64>();
                r.dim += primal.len();
            }
            r.primal = p2.sqrt();
            r.dual = d2.sqrt();
            r.primal_scale = a2.sqrt().max(c2.sqrt());
            r.dual_scale = l2.sqrt();
            r
        })
        .collect();
    ResidualReport { families }
}

/// True iff all ten inequalities hold.
pub fn check_stop(report: &ResidualReport, criteria: &StopCriteria) -> bool {
    report
        .families
        .iter()
        .all(|r| r.primal <= r.primal_threshold(criteria) && r.dual <= r.dual_threshold(criteria))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub final_times: Vec<f64>,
    pub residuals: ResidualReport,
    pub penalties: Vec<Penalties>,
    /// Largest `|x - x~|` over agents, instants and position components.
    pub max_copy_gap: f64,
    pub inner_nonconverged: usize,
    pub qp_infeasible: usize,
    pub na_restart: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Timings {
    pub warm_start_s: f64,
    pub iterations_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwarmSolution {
    pub scenario: String,
    pub scheme: String,
    pub converged: bool,
    pub iterations: usize,
    pub trajectories: Vec<AgentTrajectory>,
    pub warm_start: Vec<AgentTrajectory>,
    pub trace: Vec<IterationRecord>,
    pub penalty_updates: Vec<PenaltyUpdate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bus_trace: Option<Vec<String>>,
    /// Wall-clock only; never serialized so artifacts stay reproducible.
    #[serde(skip)]
    pub timings: Timings,
}

fn max_copy_gap(state: &ConsensusState) -> f64 {
    state
        .agents
        .iter()
        .flat_map(|a| {
            a.traj
                .states
                .iter()
                .zip(&a.x_stack[0])
                .map(|(s, c)| (s.x - c.x).abs().max((s.y - c.y).abs()))
        })
        .fold(0.0, f64::max)
}

/// One full iteration of steps 1-3 plus the dual update.
pub struct IterationOutcome {
    pub inner_nonconverged: usize,
    pub qp_infeasible: usize,
}

/// The whole distributed algorithm.
pub fn run(scenario: &ScenarioConfig, scheme: PenaltyScheme, opts: &EngineOptions) -> Result<SwarmSolution> {
    scenario.validate_params()?;
    let topology = scenario.topology()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidParams(e.to_string()))?;
    pool.install(|| run_inner(scenario, &topology, scheme, opts))
}

fn run_inner(
    scenario: &ScenarioConfig,
    topology: &Topology,
    scheme: PenaltyScheme,
    opts: &EngineOptions,
) -> Result<SwarmSolution> {
    let t0 = Instant::now();
    let mut state = warm_start(scenario, topology, opts)?;
    let warm: Vec<AgentTrajectory> = state.agents.iter().map(|a| a.traj.clone()).collect();
    let t_warm = t0.elapsed().as_secs_f64();

    let mut bus = MessageBus::new(topology.clone());
    if opts.record_bus_trace {
        bus = bus.with_trace();
    }
    let mut scheme_state = SchemeState::new(scheme, &state);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for n in 1..=scenario.stop.max_iter {
        iterations = n;
        let prev = CopySnapshot::take(&state);
        scheme_state.begin_iteration(&state);

        let nonconv = step1_all(&mut state, scenario, &opts.inner)?;
        scheme_state.after_step1(&state, n);
        let infeasible = step2_all(&mut state, scenario, opts.activation_factor)?;
        scheme_state.after_step2(&state, n);

        let posts = state.agents.iter().map(|a| Some(outgoing_copies(a))).collect();
        let inboxes = bus.exchange_copies(n, posts)?;
        step3_global(&mut state, &inboxes, n)?;
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
        let inboxes = bus.exchange_globals(n, posts)?;
        apply_globals(&mut state, &inboxes)?;
        dual_update_all(&mut state);

        let report = residuals(&state, &prev);
        let stop = check_stop(&report, &scenario.stop);
        let mut record = IterationRecord {
            iteration: n,
            final_times: state.agents.iter().map(|a| a.traj.t_final).collect(),
            residuals: report,
            penalties: state.agents.iter().map(|a| a.pen).collect(),
            max_copy_gap: max_copy_gap(&state),
            inner_nonconverged: nonconv.len(),
            qp_infeasible: infeasible,
            na_restart: false,
        };
        log::debug!(
            "iter {n}: times {:?} gap {:.3e} stop {stop}",
            record.final_times,
            record.max_copy_gap
        );
        if stop {
            trace.push(record);
            converged = true;
            break;
        }
        record.na_restart = scheme_state.end_iteration(&mut state, &record.residuals, n);
        trace.push(record);
    }

    let t_total = t0.elapsed().as_secs_f64();
    Ok(SwarmSolution {
        scenario: scenario.name.clone(),
        scheme: scheme.name().to_string(),
        converged,
        iterations,
        trajectories: state.agents.iter().map(|a| a.traj.clone()).collect(),
        warm_start: warm,
        trace,
        penalty_updates: scheme_state.into_updates(),
        bus_trace: bus.trace().map(|t| t.to_vec()),
        timings: Timings {
            warm_start_s: t_warm,
            iterations_s: t_total - t_warm,
            total_s: t_total,
        },
    })
}
