//! Parameterized differential dynamic programming.
//!
//! Optimizes a control sequence together with the scalar final time. The
//! same solver handles the plain problem and the consensus-augmented one,
//! where quadratic penalties pull the local trajectory toward its safe copies.

use nalgebra::{Matrix3, RowVector3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AgentState, AgentTrajectory, Control, Dynamics};

/// Quadratic tracking weights. Matrices are diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub w_terminal: [f64; 3],
    pub r_control: f64,
    pub w_state: [f64; 3],
    pub target: AgentState,
}

impl CostWeights {
    pub fn with_target(&self, target: AgentState) -> Self {
        Self { target, ..*self }
    }

    fn w_terminal(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.w_terminal))
    }

    fn w_state(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.w_state))
    }
}

/// Consensus terms added to the local objective.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedTerms {
    pub x_tilde: Vec<Vector3<f64>>,
    pub u_tilde: Vec<f64>,
    pub t_tilde: f64,
    pub lambda: Vec<Vector3<f64>>,
    pub zeta: Vec<f64>,
    pub nu: f64,
    pub rho: f64,
    pub tau: f64,
    pub sigma: f64,
}

impl AugmentedTerms {
    /// Terms that sit exactly at consensus with `traj` and carry zero duals.
    pub fn at_consensus(traj: &AgentTrajectory, rho: f64, tau: f64, sigma: f64) -> Self {
        Self {
            x_tilde: traj.states.iter().map(AgentState::to_vector).collect(),
            u_tilde: traj.controls.iter().map(|c| c.omega).collect(),
            t_tilde: traj.t_final,
            lambda: vec![Vector3::zeros(); traj.states.len()],
            zeta: vec![0.0; traj.controls.len()],
            nu: 0.0,
            rho,
            tau,
            sigma,
        }
    }

    /// Constant part of the completed squares, `|lambda|^2/2rho + |zeta|^2/2tau + nu^2/2sigma`.
    /// Subtracting it gives the augmented Lagrangian in its linear-plus-quadratic form.
    pub fn dual_offset(&self) -> f64 {
        let l: f64 = self.lambda.iter().map(|v| v.norm_squared()).sum();
        let z: f64 = self.zeta.iter().map(|v| v * v).sum();
        l / (2.0 * self.rho) + z / (2.0 * self.tau) + self.nu * self.nu / (2.0 * self.sigma)
    }

    fn check(&self, n: usize) -> Result<()> {
        let lens = [
            ("x_tilde", self.x_tilde.len(), n + 1),
            ("lambda", self.lambda.len(), n + 1),
            ("u_tilde", self.u_tilde.len(), n),
            ("zeta", self.zeta.len(), n),
        ];
        for (what, got, expected) in lens {
            if got != expected {
                return Err(Error::LengthMismatch { what, expected, got });
            }
        }
        if !(self.rho > 0.0 && self.tau > 0.0 && self.sigma > 0.0) {
            return Err(Error::InvalidParams("augmented penalties must be > 0".into()));
        }
        Ok(())
    }
}

/// Box limits on the turn rate and on the final time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub u_min: f64,
    pub u_max: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Bounds {
    pub fn symmetric(omega_max: f64, t_min: f64, t_max: f64) -> Self {
        Self {
            u_min: -omega_max,
            u_max: omega_max,
            t_min,
            t_max,
        }
    }

    pub fn unbounded() -> Self {
        Self {
            u_min: f64::NEG_INFINITY,
            u_max: f64::INFINITY,
            t_min: f64::MIN_POSITIVE,
            t_max: f64::INFINITY,
        }
    }
}

/// Second-order expansion of the value function at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueExpansion {
    pub v: f64,
    pub v_x: Vector3<f64>,
    pub v_theta: f64,
    pub v_xx: Matrix3<f64>,
    pub v_xtheta: Vector3<f64>,
    pub v_thetatheta: f64,
}

/// Second-order expansion of the action-value function at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QExpansion {
    pub q_x: Vector3<f64>,
    pub q_u: f64,
    pub q_theta: f64,
    pub q_xx: Matrix3<f64>,
    pub q_uu: f64,
    pub q_thetatheta: f64,
    pub q_xu: Vector3<f64>,
    pub q_xtheta: Vector3<f64>,
    pub q_utheta: f64,
}

/// Output of one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    /// Feedforward terms `k_k`.
    pub feedforward: Vec<f64>,
    /// State feedback rows `K_k`.
    pub feedback: Vec<RowVector3<f64>>,
    /// Parameter coupling `M_k`.
    pub theta_coupling: Vec<f64>,
    /// Full (undamped) final-time increment.
    pub delta_theta_star: f64,
    /// Value expansion at the initial instant.
    pub value0: ValueExpansion,
}

impl GainSchedule {
    pub fn zeros(n: usize) -> Self {
        Self {
            feedforward: vec![0.0; n],
            feedback: vec![RowVector3::zeros(); n],
            theta_coupling: vec![0.0; n],
            delta_theta_star: 0.0,
            value0: ValueExpansion {
                v: 0.0,
                v_x: Vector3::zeros(),
                v_theta: 0.0,
                v_xx: Matrix3::zeros(),
                v_xtheta: Vector3::zeros(),
                v_thetatheta: 0.0,
            },
        }
    }
}

fn check_traj(traj: &AgentTrajectory) -> Result<()> {
    if traj.states.len() != traj.controls.len() + 1 {
        return Err(Error::LengthMismatch {
            what: "trajectory states",
            expected: traj.controls.len() + 1,
            got: traj.states.len(),
        });
    }
    Ok(())
}

/// Running plus terminal cost, including the consensus penalties when `aug` is given.
pub fn local_cost(traj: &AgentTrajectory, weights: &CostWeights, aug: Option<&AugmentedTerms>) -> Result<f64> {
    check_traj(traj)?;
    let n = traj.n_steps();
    if let Some(a) = aug {
        a.check(n)?;
    }
    let target = weights.target.to_vector();
    let w_s = weights.w_state();
    let w_n = weights.w_terminal();
    let mut cost = 0.0;
    for k in 0..n {
        let x = traj.states[k].to_vector();
        let u = traj.controls[k].omega;
        let e = x - target;
        cost += 0.5 * weights.r_control * u * u + 0.5 * e.dot(&(w_s * e));
        if let Some(a) = aug {
            let dx = x - a.x_tilde[k] + a.lambda[k] / a.rho;
            let du = u - a.u_tilde[k] + a.zeta[k] / a.tau;
            cost += 0.5 * a.rho * dx.norm_squared() + 0.5 * a.tau * du * du;
        }
    }
    let x_n = traj.states[n].to_vector();
    let e = x_n - target;
    cost += 0.5 * e.dot(&(w_n * e));
    if let Some(a) = aug {
        let dx = x_n - a.x_tilde[n] + a.lambda[n] / a.rho;
        let dt = traj.t_final - a.t_tilde + a.nu / a.sigma;
        cost += 0.5 * a.rho * dx.norm_squared() + 0.5 * a.sigma * dt * dt;
    }
    Ok(cost)
}

/// Backward sweep producing feedforward, feedback and parameter gains.
///
/// `reg` is added to `Q_uu` at every step and to `V_thetatheta` at the
/// initial instant. With `freeze_theta` the parameter increment is zero and
/// no definiteness is required of `V_thetatheta`.
pub fn backward_pass<D: Dynamics + ?Sized>(
    dynamics: &D,
    traj: &AgentTrajectory,
    weights: &CostWeights,
    aug: Option<&AugmentedTerms>,
    reg: f64,
    freeze_theta: bool,
) -> Result<GainSchedule> {
    check_traj(traj)?;
    let n = traj.n_steps();
    if n != dynamics.n_steps() {
        return Err(Error::LengthMismatch {
            what: "trajectory steps",
            expected: dynamics.n_steps(),
            got: n,
        });
    }
    if let Some(a) = aug {
        a.check(n)?;
    }
    let t = traj.t_final;
    let target = weights.target.to_vector();
    let w_s = weights.w_state();
    let w_n = weights.w_terminal();

    let x_n = traj.states[n].to_vector();
    let mut v_x = w_n * (x_n - target);
    let mut v_xx = w_n;
    let mut v_theta = 0.0;
    let mut v_thth = 0.0;
    let mut v_xth = Vector3::zeros();
    if let Some(a) = aug {
        v_x += a.rho * (x_n - a.x_tilde[n]) + a.lambda[n];
        v_xx += Matrix3::identity() * a.rho;
        v_theta += a.sigma * (t - a.t_tilde) + a.nu;
        v_thth += a.sigma;
    }

    let mut gains = GainSchedule::zeros(n);
    for k in (0..n).rev() {
        let x = traj.states[k].to_vector();
        let u = traj.controls[k].omega;
        let jac = dynamics.jacobians(&x, u, t)?;

        let mut l_x = w_s * (x - target);
        let mut l_xx = w_s;
        let mut l_u = weights.r_control * u;
        let mut l_uu = weights.r_control;
        if let Some(a) = aug {
            l_x += a.rho * (x - a.x_tilde[k]) + a.lambda[k];
            l_xx += Matrix3::identity() * a.rho;
            l_u += a.tau * (u - a.u_tilde[k]) + a.zeta[k];
            l_uu += a.tau;
        }

        let vxx_fth = v_xx * jac.f_theta + v_xth;
        let q = QExpansion {
            q_x: l_x + jac.f_x.transpose() * v_x,
            q_u: l_u + jac.f_u.dot(&v_x),
            q_theta: v_theta + jac.f_theta.dot(&v_x),
            q_xx: l_xx + jac.f_x.transpose() * v_xx * jac.f_x,
            q_uu: l_uu + jac.f_u.dot(&(v_xx * jac.f_u)),
            q_thetatheta: v_thth + jac.f_theta.dot(&(v_xx * jac.f_theta)) + 2.0 * jac.f_theta.dot(&v_xth),
            q_xu: jac.f_x.transpose() * v_xx * jac.f_u,
            q_xtheta: jac.f_x.transpose() * vxx_fth,
            q_utheta: jac.f_u.dot(&vxx_fth),
        };

        let q_uu = q.q_uu + reg;
        if !(q_uu > 0.0) || !q_uu.is_finite() {
            return Err(Error::SolverFailure { step: k, what: "Q_uu" });
        }
        let inv = 1.0 / q_uu;
        let k_ff = -inv * q.q_u;
        let k_fb = -inv * q.q_xu.transpose();
        let m = -inv * q.q_utheta;

        v_x = q.q_x + q.q_xu * k_ff;
        v_theta = q.q_theta + q.q_utheta * k_ff;
        v_xx = q.q_xx + q.q_xu * k_fb;
        v_xx = 0.5 * (v_xx + v_xx.transpose());
        v_xth = q.q_xtheta + q.q_xu * m;
        v_thth = q.q_thetatheta + q.q_utheta * m;

        gains.feedforward[k] = k_ff;
        gains.feedback[k] = k_fb;
        gains.theta_coupling[k] = m;
    }

    gains.value0 = ValueExpansion {
        v: local_cost(traj, weights, aug)?,
        v_x,
        v_theta,
        v_xx,
        v_xtheta: v_xth,
        v_thetatheta: v_thth,
    };
    if !freeze_theta {
        let curv = v_thth + reg;
        if !(curv > 0.0) || !curv.is_finite() {
            return Err(Error::SolverFailure {
                step: 0,
                what: "V_thetatheta",
            });
        }
        gains.delta_theta_star = -v_theta / curv;
    }
    if !gains.delta_theta_star.is_finite() {
        return Err(Error::NonFinite("parameter increment"));
    }
    Ok(gains)
}

/// Rolls out the damped, clamped update defined by `gains`.
pub fn forward_pass<D: Dynamics + ?Sized>(
    dynamics: &D,
    traj: &AgentTrajectory,
    gains: &GainSchedule,
    alpha: f64,
    bounds: &Bounds,
) -> Result<AgentTrajectory> {
    check_traj(traj)?;
    let n = traj.n_steps();
    if gains.feedforward.len() != n {
        return Err(Error::LengthMismatch {
            what: "gain schedule",
            expected: n,
            got: gains.feedforward.len(),
        });
    }
    let t_new = (traj.t_final + alpha * gains.delta_theta_star).clamp(bounds.t_min, bounds.t_max);
    let d_theta = t_new - traj.t_final;

    let mut states = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n);
    let mut x_new = traj.states[0].to_vector();
    states.push(traj.states[0]);
    for k in 0..n {
        let dx = x_new - traj.states[k].to_vector();
        let du = alpha * gains.feedforward[k] + (gains.feedback[k] * dx)[0] + gains.theta_coupling[k] * d_theta;
        let u = (traj.controls[k].omega + du).clamp(bounds.u_min, bounds.u_max);
        x_new = dynamics.step(&x_new, u, t_new)?;
        states.push(AgentState::from_vector(&x_new));
        controls.push(Control::new(u));
    }
    Ok(AgentTrajectory {
        states,
        controls,
        t_final: t_new,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Relative stopping tolerance; the threshold is `epsilon * (1 + |J|)`.
    pub epsilon: f64,
    pub max_inner: usize,
    pub alpha: f64,
    pub freeze_theta: bool,
    /// Halve the step until the cost decreases (floor `alpha_floor`).
    pub line_search: bool,
    pub alpha_floor: f64,
    pub reg_min: f64,
    pub reg_max: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            max_inner: 10,
            alpha: 0.4,
            freeze_theta: false,
            line_search: false,
            alpha_floor: 1e-3,
            reg_min: 1e-6,
            reg_max: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalSolution {
    pub trajectory: AgentTrajectory,
    pub cost: f64,
    /// Cost of every accepted iterate, starting with the initial guess.
    pub accepted_costs: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Iterates backward and forward passes until the cost change drops below tolerance.
///
/// A candidate is accepted only if it does not increase the cost. Rejections
/// shrink the step (with line search) and then raise the regularization.
pub fn solve_local<D: Dynamics + ?Sized>(
    dynamics: &D,
    init: &AgentTrajectory,
    weights: &CostWeights,
    aug: Option<&AugmentedTerms>,
    bounds: &Bounds,
    opts: &SolveOptions,
) -> Result<LocalSolution> {
    let mut traj = init.clone();
    let mut cost = local_cost(&traj, weights, aug)?;
    let mut accepted_costs = vec![cost];
    let mut reg = 0.0_f64;
    let mut converged = false;
    let mut iterations = 0;
    let offset = aug.map_or(0.0, AugmentedTerms::dual_offset);

    'outer: while iterations < opts.max_inner {
        iterations += 1;
        let tol = opts.epsilon * (1.0 + (cost - offset).abs());
        loop {
            let gains = match backward_pass(dynamics, &traj, weights, aug, reg, opts.freeze_theta) {
                Ok(g) => g,
                Err(Error::SolverFailure { step, what }) => {
                    reg = raise(reg, opts);
                    if reg > opts.reg_max {
                        return Err(Error::SolverFailure { step, what });
                    }
                    continue;
                }
                Err(e) => return Err(e),
            };
            let mut alpha = opts.alpha;
            loop {
                let cand = forward_pass(dynamics, &traj, &gains, alpha, bounds)?;
                let c = local_cost(&cand, weights, aug)?;
                if c <= cost {
                    let decrease = cost - c;
                    traj = cand;
                    cost = c;
                    accepted_costs.push(c);
                    reg = if reg / 10.0 < opts.reg_min { 0.0 } else { reg / 10.0 };
                    if decrease < tol {
                        converged = true;
                        break 'outer;
                    }
                    continue 'outer;
                }
                if c - cost < tol && alpha == opts.alpha && reg == 0.0 {
                    // no measurable progress available from here
                    converged = true;
                    break 'outer;
                }
                if opts.line_search && alpha * 0.5 >= opts.alpha_floor {
                    alpha *= 0.5;
                    continue;
                }
                break;
            }
            reg = raise(reg, opts);
            if reg > opts.reg_max {
                // no descent direction left at any regularization
                converged = true;
                break 'outer;
            }
        }
    }

    Ok(LocalSolution {
        trajectory: traj,
        cost,
        accepted_costs,
        iterations,
        converged,
    })
}

fn raise(reg: f64, opts: &SolveOptions) -> f64 {
    if reg < opts.reg_min {
        opts.reg_min
    } else {
        reg * 10.0
    }
}
