//! Constant-speed unicycle kinematics on a normalized time grid.
//!
//! The final time `t_final` is treated as a parameter: the continuous dynamics
//! are rescaled to the unit interval and integrated with `n_steps` steps of
//! length `1 / n_steps`, so every step advances physical time by
//! `t_final / n_steps`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar pose of one vehicle. Heading is kept unwrapped.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading }
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.heading)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.heading.is_finite()
    }
}

/// Turn-rate command in rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub omega: f64,
}

impl Control {
    pub fn new(omega: f64) -> Self {
        Self { omega }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    /// Constant ground speed, m/s.
    pub speed: f64,
    /// Turn-rate limit, rad/s.
    pub omega_max: f64,
    pub n_steps: usize,
    #[serde(default)]
    pub integrator: Integrator,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        Self {
            speed: 30.0,
            omega_max: 0.5768,
            n_steps: 100,
            integrator: Integrator::Euler,
        }
    }
}

impl DynamicsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return Err(Error::InvalidParams(format!("speed must be > 0, got {}", self.speed)));
        }
        if !(self.omega_max > 0.0 && self.omega_max.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "omega_max must be > 0, got {}",
                self.omega_max
            )));
        }
        if self.n_steps < 2 {
            return Err(Error::InvalidParams(format!(
                "n_steps must be >= 2, got {}",
                self.n_steps
            )));
        }
        Ok(())
    }
}

/// Partial derivatives of one step map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepJacobians {
    pub f_x: Matrix3<f64>,
    pub f_u: Vector3<f64>,
    /// Derivative with respect to the final-time parameter.
    pub f_theta: Vector3<f64>,
}

/// A discrete step map with a scalar control and a scalar time parameter.
///
/// The solver is written against this trait so that it can be exercised on
/// linear test systems as well as on the unicycle.
pub trait Dynamics: Sync {
    fn n_steps(&self) -> usize;

    fn step(&self, x: &Vector3<f64>, u: f64, t_final: f64) -> Result<Vector3<f64>>;

    fn jacobians(&self, x: &Vector3<f64>, u: f64, t_final: f64) -> Result<StepJacobians>;

    fn rollout(&self, x0: &AgentState, controls: &[Control], t_final: f64) -> Result<AgentTrajectory> {
        if controls.len() != self.n_steps() {
            return Err(Error::LengthMismatch {
                what: "rollout controls",
                expected: self.n_steps(),
                got: controls.len(),
            });
        }
        let mut states = Vec::with_capacity(controls.len() + 1);
        let mut x = x0.to_vector();
        states.push(*x0);
        for c in controls {
            x = self.step(&x, c.omega, t_final)?;
            states.push(AgentState::from_vector(&x));
        }
        Ok(AgentTrajectory {
            states,
            controls: controls.to_vec(),
            t_final,
        })
    }
}

/// States, controls and final time of one agent over `N + 1` instants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrajectory {
    pub states: Vec<AgentState>,
    pub controls: Vec<Control>,
    pub t_final: f64,
}

impl AgentTrajectory {
    pub fn n_steps(&self) -> usize {
        self.controls.len()
    }

    pub fn final_state(&self) -> &AgentState {
        self.states.last().expect("trajectory has at least one state")
    }

    /// Physical time of instant `k`.
    pub fn time_at(&self, k: usize) -> f64 {
        self.t_final * (k as f64 / self.n_steps() as f64)
    }
}

/// The unicycle `[V cos h, V sin h, omega]` scaled by the final time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Unicycle {
    pub params: DynamicsParams,
}

impl Unicycle {
    pub fn new(params: DynamicsParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    fn check(x: &Vector3<f64>, u: f64, t_final: f64) -> Result<()> {
        if !(x.iter().all(|v| v.is_finite()) && u.is_finite() && t_final.is_finite()) {
            return Err(Error::NonFinite("step input"));
        }
        if t_final <= 0.0 {
            return Err(Error::InvalidParams(format!("t_final must be > 0, got {t_final}")));
        }
        Ok(())
    }
}

impl Dynamics for Unicycle {
    fn n_steps(&self) -> usize {
        self.params.n_steps
    }

    fn step(&self, x: &Vector3<f64>, u: f64, t_final: f64) -> Result<Vector3<f64>> {
        Self::check(x, u, t_final)?;
        let v = self.params.speed;
        let h = t_final / self.params.n_steps as f64;
        let th = x[2];
        let next = match self.params.integrator {
            Integrator::Euler => x + h * Vector3::new(v * th.cos(), v * th.sin(), u),
            Integrator::Rk4 => {
                // heading is linear in time, so stages 2 and 3 coincide
                let mid = th + 0.5 * h * u;
                let end = th + h * u;
                let c = th.cos() + 4.0 * mid.cos() + end.cos();
                let s = th.sin() + 4.0 * mid.sin() + end.sin();
                Vector3::new(x[0] + h * v / 6.0 * c, x[1] + h * v / 6.0 * s, end)
            }
        };
        Ok(next)
    }

    fn jacobians(&self, x: &Vector3<f64>, u: f64, t_final: f64) -> Result<StepJacobians> {
        Self::check(x, u, t_final)?;
        let v = self.params.speed;
        let n = self.params.n_steps as f64;
        let h = t_final / n;
        let th = x[2];
        let jac = match self.params.integrator {
            Integrator::Euler => {
                let mut f_x = Matrix3::identity();
                f_x[(0, 2)] = -h * v * th.sin();
                f_x[(1, 2)] = h * v * th.cos();
                StepJacobians {
                    f_x,
                    f_u: Vector3::new(0.0, 0.0, h),
                    f_theta: Vector3::new(v * th.cos(), v * th.sin(), u) / n,
                }
            }
            Integrator::Rk4 => {
                let mid = th + 0.5 * h * u;
                let end = th + h * u;
                let c = th.cos() + 4.0 * mid.cos() + end.cos();
                let s = th.sin() + 4.0 * mid.sin() + end.sin();
                let k = h * v / 6.0;
                let mut f_x = Matrix3::identity();
                f_x[(0, 2)] = -k * s;
                f_x[(1, 2)] = k * c;
                let f_u = Vector3::new(
                    -k * (2.0 * h * mid.sin() + h * end.sin()),
                    k * (2.0 * h * mid.cos() + h * end.cos()),
                    h,
                );
                let dc = -2.0 * u * mid.sin() - u * end.sin();
                let ds = 2.0 * u * mid.cos() + u * end.cos();
                let f_theta = Vector3::new(v / 6.0 * c + k * dc, v / 6.0 * s + k * ds, u) / n;
                StepJacobians { f_x, f_u, f_theta }
            }
        };
        Ok(jac)
    }
}

/// Advances `state` by one normalized step.
pub fn step(state: &AgentState, control: Control, t_final: f64, params: &DynamicsParams) -> Result<AgentState> {
    let dynamics = Unicycle::new(*params)?;
    dynamics
        .step(&state.to_vector(), control.omega, t_final)
        .map(|v| AgentState::from_vector(&v))
}

pub fn jacobians(state: &AgentState, control: Control, t_final: f64, params: &DynamicsParams) -> Result<StepJacobians> {
    Unicycle::new(*params)?.jacobians(&state.to_vector(), control.omega, t_final)
}

pub fn rollout(
    x0: &AgentState,
    controls: &[Control],
    t_final: f64,
    params: &DynamicsParams,
) -> Result<AgentTrajectory> {
    Unicycle::new(*params)?.rollout(x0, controls, t_final)
}
