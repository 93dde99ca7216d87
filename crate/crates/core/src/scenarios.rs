//! Scenario definitions, the four benchmark setups, config files and post-hoc validation.

use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::consensus::{Penalties, StopCriteria, SwarmSolution};
use crate::error::{Error, Result};
use crate::model::{AgentState, AgentTrajectory, DynamicsParams, Integrator};
use crate::net::{build_topology, NeighborhoodSize, Topology};
use crate::pddp::CostWeights;
use crate::qp::TimeSequenceSpec;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentSpec {
    pub initial: AgentState,
    pub target: AgentState,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub center: Vector2<f64>,
    pub radius: f64,
}

/// Arrival-time relations between neighbors.
#[derive(Debug, Clone, PartialEq)]
pub enum TimeSequence {
    None,
    Simultaneous,
    /// `gaps[l]` is the required delay of agent `l+1` after agent `l`.
    Intervals {
        gaps: Vec<f64>,
        relax: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub agents: Vec<AgentSpec>,
    pub dynamics: DynamicsParams,
    pub t_guess: f64,
    pub t_bounds: (f64, f64),
    pub obstacles: Vec<Obstacle>,
    pub d_obstacle_safe: f64,
    pub d_collision: f64,
    pub d_comm: f64,
    pub topology_size: NeighborhoodSize,
    pub time_sequence: TimeSequence,
    /// Shared weights; each agent's target replaces `target`.
    pub weights: CostWeights,
    pub stop: StopCriteria,
    pub penalties: Penalties,
}

impl ScenarioConfig {
    pub fn m(&self) -> usize {
        self.agents.len()
    }

    pub fn weights_for(&self, i: usize) -> CostWeights {
        self.weights.with_target(self.agents[i].target)
    }

    pub fn topology(&self) -> Result<Topology> {
        let pos: Vec<Vector2<f64>> = self
            .agents
            .iter()
            .map(|a| Vector2::new(a.initial.x, a.initial.y))
            .collect();
        build_topology(&pos, self.topology_size)
    }

    /// Required `t_i - t_j`, if the scenario relates arrival times at all.
    pub fn arrival_offset(&self, i: usize, j: usize) -> Option<f64> {
        match &self.time_sequence {
            TimeSequence::None => None,
            TimeSequence::Simultaneous => Some(0.0),
            TimeSequence::Intervals { gaps, .. } => {
                let off = |a: usize| gaps[..a].iter().sum::<f64>();
                Some(off(i) - off(j))
            }
        }
    }

    fn relax(&self) -> f64 {
        match &self.time_sequence {
            TimeSequence::Intervals { relax, .. } => *relax,
            _ => 0.0,
        }
    }

    /// Rows pairing agent `i` with each of its neighbors.
    pub fn time_rows(&self, topology: &Topology, i: usize) -> Option<TimeSequenceSpec> {
        let set = &topology.neighbor_sets[i];
        let pairs: Option<Vec<(usize, f64)>> = set
            .iter()
            .enumerate()
            .skip(1)
            .map(|(b, &j)| self.arrival_offset(i, j).map(|d| (b, d)))
            .collect();
        let pairs = pairs?;
        if pairs.is_empty() {
            return None;
        }
        Some(TimeSequenceSpec::from_pairs(set.len(), &pairs, self.relax()))
    }

    pub fn validate_params(&self) -> Result<()> {
        self.dynamics.validate()?;
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.agents.is_empty() {
            return bad("at least one agent is required");
        }
        if !(self.d_collision < self.d_comm) {
            return bad("d_collision_m must be smaller than d_comm_m");
        }
        if !(self.t_bounds.0 > 0.0 && self.t_bounds.0 < self.t_bounds.1) {
            return bad("t_min_s must be positive and below t_max_s");
        }
        if !(self.t_guess >= self.t_bounds.0 && self.t_guess <= self.t_bounds.1) {
            return bad("t_guess_s must lie within the time bounds");
        }
        if self.obstacles.iter().any(|o| !(o.radius > 0.0)) {
            return bad("obstacle radii must be positive");
        }
        if self.d_obstacle_safe < 0.0 || self.d_collision < 0.0 {
            return bad("safety distances must be non-negative");
        }
        if let TimeSequence::Intervals { gaps, relax } = &self.time_sequence {
            if gaps.len() + 1 != self.agents.len() {
                return bad("time_sequence.gaps_s needs one entry per consecutive agent pair");
            }
            if !(*relax >= 0.0) {
                return bad("time_sequence.relax_s must be non-negative");
            }
        }
        let w = &self.weights;
        if !(w.r_control > 0.0) || w.w_terminal.iter().chain(&w.w_state).any(|v| !(*v >= 0.0)) {
            return bad("weights must be non-negative with r_control > 0");
        }
        self.penalties.validate()?;
        if self.stop.eps_abs < 0.0 || self.stop.eps_rel < 0.0 {
            return bad("stopping tolerances must be non-negative");
        }
        if let NeighborhoodSize::Count(c) = self.topology_size {
            if c == 0 || c > self.agents.len() {
                return bad("topology_size must be between 1 and the agent count");
            }
        }
        Ok(())
    }
}

fn deg(d: f64) -> f64 {
    d.to_radians()
}

fn state(x: f64, y: f64, heading_deg: f64) -> AgentState {
    AgentState::new(x, y, deg(heading_deg))
}

fn table1(name: &str) -> ScenarioConfig {
    ScenarioConfig {
        name: name.to_string(),
        agents: Vec::new(),
        dynamics: DynamicsParams {
            speed: 30.0,
            omega_max: 0.5768,
            n_steps: 100,
            integrator: Integrator::Euler,
        },
        t_guess: 9.3,
        t_bounds: (0.1, 20.0),
        obstacles: Vec::new(),
        d_obstacle_safe: 10.0,
        d_collision: 10.0,
        d_comm: 300.0,
        topology_size: NeighborhoodSize::All,
        time_sequence: TimeSequence::None,
        weights: CostWeights {
            w_terminal: [25.0; 3],
            r_control: 1.0,
            w_state: [0.0; 3],
            target: AgentState::default(),
        },
        stop: StopCriteria {
            eps_abs: 1e-3,
            eps_rel: 6e-2,
            max_iter: 300,
        },
        penalties: Penalties {
            tau: 0.2,
            rho: 2.0,
            mu: 1.0,
            sigma: 2.0,
            gamma: 1.0,
        },
    }
}

/// The four benchmark scenarios.
pub fn builtin(id: u8) -> Result<ScenarioConfig> {
    let obstacle = |x: f64, y: f64, r: f64| Obstacle {
        center: Vector2::new(x, y),
        radius: r,
    };
    let cfg = match id {
        1 => {
            let mut c = table1("scenario-1");
            c.agents = vec![
                AgentSpec {
                    initial: state(15.0, 110.0, 0.0),
                    target: state(285.0, 110.0, 0.0),
                },
                AgentSpec {
                    initial: state(15.0, 140.0, 0.0),
                    target: state(285.0, 140.0, 0.0),
                },
                AgentSpec {
                    initial: state(285.0, 110.0, 180.0),
                    target: state(15.0, 110.0, 180.0),
                },
                AgentSpec {
                    initial: state(285.0, 140.0, 180.0),
                    target: state(15.0, 140.0, 180.0),
                },
            ];
            c.obstacles = vec![obstacle(150.0, 125.0, 20.0)];
            c
        }
        2 => {
            let mut c = table1("scenario-2");
            let init = [
                (328.75, 26.5, 60.0),
                (484.0, 95.6, 120.0),
                (587.0, 242.8, 120.0),
                (551.2, 411.85, 180.0),
                (437.5, 538.16, 240.0),
            ];
            let target = [
                (302.6, 275.14, 120.0),
                (324.45, 281.42, 180.0),
                (342.45, 294.8, 210.0),
                (322.84, 310.17, 240.0),
                (312.5, 321.65, 270.0),
            ];
            c.agents = init
                .iter()
                .zip(&target)
                .map(|(a, b)| AgentSpec {
                    initial: state(a.0, a.1, a.2),
                    target: state(b.0, b.1, b.2),
                })
                .collect();
            c.t_guess = 9.0;
            c.d_comm = 380.0;
            c.topology_size = NeighborhoodSize::Count(3);
            c.obstacles = vec![obstacle(400.0, 200.0, 40.0), obstacle(450.0, 380.0, 40.0)];
            c.time_sequence = TimeSequence::Intervals {
                gaps: vec![0.1; 4],
                relax: 0.01,
            };
            c.stop.eps_abs = 5e-4;
            c
        }
        3 => {
            let mut c = table1("scenario-3");
            // the tabulated 270 m spans the formation; agents sit 135 m from the center
            let radius = 135.0;
            c.agents = (0..16)
                .map(|i| {
                    let phi = 22.5 * i as f64;
                    let (s, co) = deg(phi).sin_cos();
                    let heading = deg(phi + 180.0);
                    AgentSpec {
                        initial: AgentState::new(radius * co, radius * s, heading),
                        target: AgentState::new(-radius * co, -radius * s, heading),
                    }
                })
                .collect();
            c.t_guess = 9.2;
            c.d_comm = 120.0;
            c.topology_size = NeighborhoodSize::Count(5);
            c.obstacles = vec![obstacle(0.0, 0.0, 20.0)];
            c.time_sequence = TimeSequence::Simultaneous;
            c
        }
        4 => {
            let mut c = table1("scenario-4");
            c.agents = (1..=20)
                .map(|i| {
                    let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                    let y = 100.0 + 30.0 * (i - 1) as f64;
                    AgentSpec {
                        initial: state(20.0 + 10.0 * sign, y, 0.0),
                        target: state(290.0 + 10.0 * sign, y, 0.0),
                    }
                })
                .collect();
            c.t_guess = 9.2;
            c.d_comm = 170.0;
            c.topology_size = NeighborhoodSize::Count(5);
            c.obstacles = vec![
                obstacle(200.0, 200.0, 15.0),
                obstacle(150.0, 120.0, 20.0),
                obstacle(180.0, 300.0, 20.0),
                obstacle(150.0, 390.0, 20.0),
                obstacle(210.0, 500.0, 20.0),
                obstacle(150.0, 580.0, 15.0),
                obstacle(180.0, 680.0, 20.0),
            ];
            c
        }
        _ => return Err(Error::Config(format!("unknown builtin scenario {id}; expected 1-4"))),
    };
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Config file schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    x_m: f64,
    y_m: f64,
    heading_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentFile {
    initial: StateFile,
    target: StateFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObstacleFile {
    center_m: [f64; 2],
    radius_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DynamicsFile {
    speed_mps: f64,
    omega_max_radps: f64,
    n_steps: usize,
    #[serde(default)]
    integrator: Integrator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsFile {
    w_terminal: [f64; 3],
    r_control: f64,
    w_state: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "lowercase")]
enum TimeSequenceFile {
    None,
    Simultaneous,
    Intervals { gaps_s: Vec<f64>, relax_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    version: u32,
    name: String,
    t_guess_s: f64,
    t_min_s: f64,
    t_max_s: f64,
    d_obstacle_safe_m: f64,
    d_collision_m: f64,
    d_comm_m: f64,
    topology_size: NeighborhoodSize,
    time_sequence: TimeSequenceFile,
    dynamics: DynamicsFile,
    weights: WeightsFile,
    stop: StopCriteria,
    penalties: Penalties,
    agents: Vec<AgentFile>,
    #[serde(default)]
    obstacles: Vec<ObstacleFile>,
}

/// Degrees for the file, snapped to a short decimal when that converts back
/// to the identical radian value.
fn readable_degrees(rad: f64) -> f64 {
    let d = rad.to_degrees();
    let short = (d * 1e9).round() / 1e9;
    if short.to_radians() == rad {
        short
    } else {
        d
    }
}

impl StateFile {
    fn from_state(s: &AgentState) -> Self {
        Self {
            x_m: s.x,
            y_m: s.y,
            heading_deg: readable_degrees(s.heading),
        }
    }

    fn to_state(&self) -> AgentState {
        AgentState::new(self.x_m, self.y_m, self.heading_deg.to_radians())
    }
}

impl ScenarioFile {
    fn from_config(c: &ScenarioConfig) -> Self {
        Self {
            version: CONFIG_VERSION,
            name: c.name.clone(),
            t_guess_s: c.t_guess,
            t_min_s: c.t_bounds.0,
            t_max_s: c.t_bounds.1,
            d_obstacle_safe_m: c.d_obstacle_safe,
            d_collision_m: c.d_collision,
            d_comm_m: c.d_comm,
            topology_size: c.topology_size,
            time_sequence: match &c.time_sequence {
                TimeSequence::None => TimeSequenceFile::None,
                TimeSequence::Simultaneous => TimeSequenceFile::Simultaneous,
                TimeSequence::Intervals { gaps, relax } => TimeSequenceFile::Intervals {
                    gaps_s: gaps.clone(),
                    relax_s: *relax,
                },
            },
            dynamics: DynamicsFile {
                speed_mps: c.dynamics.speed,
                omega_max_radps: c.dynamics.omega_max,
                n_steps: c.dynamics.n_steps,
                integrator: c.dynamics.integrator,
            },
            weights: WeightsFile {
                w_terminal: c.weights.w_terminal,
                r_control: c.weights.r_control,
                w_state: c.weights.w_state,
            },
            stop: c.stop,
            penalties: c.penalties,
            agents: c
                .agents
                .iter()
                .map(|a| AgentFile {
                    initial: StateFile::from_state(&a.initial),
                    target: StateFile::from_state(&a.target),
                })
                .collect(),
            obstacles: c
                .obstacles
                .iter()
                .map(|o| ObstacleFile {
                    center_m: [o.center.x, o.center.y],
                    radius_m: o.radius,
                })
                .collect(),
        }
    }

    fn into_config(self) -> Result<ScenarioConfig> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let cfg = ScenarioConfig {
            name: self.name,
            agents: self
                .agents
                .iter()
                .map(|a| AgentSpec {
                    initial: a.initial.to_state(),
                    target: a.target.to_state(),
                })
                .collect(),
            dynamics: DynamicsParams {
                speed: self.dynamics.speed_mps,
                omega_max: self.dynamics.omega_max_radps,
                n_steps: self.dynamics.n_steps,
                integrator: self.dynamics.integrator,
            },
            t_guess: self.t_guess_s,
            t_bounds: (self.t_min_s, self.t_max_s),
            obstacles: self
                .obstacles
                .iter()
                .map(|o| Obstacle {
                    center: Vector2::new(o.center_m[0], o.center_m[1]),
                    radius: o.radius_m,
                })
                .collect(),
            d_obstacle_safe: self.d_obstacle_safe_m,
            d_collision: self.d_collision_m,
            d_comm: self.d_comm_m,
            topology_size: self.topology_size,
            time_sequence: match self.time_sequence {
                TimeSequenceFile::None => TimeSequence::None,
                TimeSequenceFile::Simultaneous => TimeSequence::Simultaneous,
                TimeSequenceFile::Intervals { gaps_s, relax_s } => TimeSequence::Intervals {
                    gaps: gaps_s,
                    relax: relax_s,
                },
            },
            weights: CostWeights {
                w_terminal: self.weights.w_terminal,
                r_control: self.weights.r_control,
                w_state: self.weights.w_state,
                target: AgentState::default(),
            },
            stop: self.stop,
            penalties: self.penalties,
        };
        cfg.validate_params()?;
        Ok(cfg)
    }
}

/// Serializes a scenario to the TOML config format.
pub fn to_toml(cfg: &ScenarioConfig) -> Result<String> {
    toml::to_string_pretty(&ScenarioFile::from_config(cfg)).map_err(|e| Error::Config(e.to_string()))
}

pub fn from_toml(text: &str) -> Result<ScenarioConfig> {
    let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    file.into_config()
}

pub fn load(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    from_toml(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Tolerance on distance constraints when judging a finished run.
pub const DISTANCE_TOLERANCE: f64 = 0.1;
/// Numerical slack on top of the configured arrival-time relaxation.
pub const TIME_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDistance {
    pub distance: f64,
    pub instant: usize,
    pub pair: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleClearance {
    /// Smallest distance from the obstacle center over all agents and instants.
    pub min_center_distance: f64,
    pub required: f64,
    pub instant: usize,
    pub agent: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGap {
    pub earlier: usize,
    pub later: usize,
    pub required: f64,
    pub actual: f64,
    pub allowed_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub min_pairwise: Option<PairDistance>,
    /// Smallest value of `|p - c| - (r_o + d_o)` over all obstacles.
    pub min_obstacle_clearance: Option<f64>,
    pub obstacles: Vec<ObstacleClearance>,
    pub max_neighbor_distance: Option<PairDistance>,
    pub terminal_position_errors: Vec<f64>,
    pub final_times: Vec<f64>,
    pub time_gaps: Vec<TimeGap>,
    pub converged: bool,
    pub iterations: usize,
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks a finished solution against the true (nonlinear) constraints.
pub fn validate(solution: &SwarmSolution, scenario: &ScenarioConfig) -> Result<ValidationReport> {
    let mut report = validate_trajectories(&solution.trajectories, scenario)?;
    report.converged = solution.converged;
    report.iterations = solution.iterations;
    Ok(report)
}

/// Instants are compared by index; agents with different final times are
/// matched on the normalized grid.
pub fn validate_trajectories(trajs: &[AgentTrajectory], scenario: &ScenarioConfig) -> Result<ValidationReport> {
    let m = scenario.m();
    if trajs.len() != m {
        return Err(Error::LengthMismatch {
            what: "solution trajectories",
            expected: m,
            got: trajs.len(),
        });
    }
    let n = trajs[0].n_steps();
    for t in trajs {
        if t.n_steps() != n || t.states.len() != n + 1 {
            return Err(Error::LengthMismatch {
                what: "trajectory length",
                expected: n + 1,
                got: t.states.len(),
            });
        }
    }
    let topo = scenario.topology()?;
    let pos = |i: usize, k: usize| Vector2::new(trajs[i].states[k].x, trajs[i].states[k].y);
    let mut violations = Vec::new();

    let mut min_pair: Option<PairDistance> = None;
    for i in 0..m {
        for j in i + 1..m {
            for k in 0..=n {
                let d = (pos(i, k) - pos(j, k)).norm();
                if min_pair.as_ref().is_none_or(|p| d < p.distance) {
                    min_pair = Some(PairDistance {
                        distance: d,
                        instant: k,
                        pair: (i, j),
                    });
                }
            }
        }
    }
    if let Some(p) = &min_pair {
        if p.distance < scenario.d_collision - DISTANCE_TOLERANCE {
            violations.push(format!(
                "agents {} and {} are {:.3} m apart at instant {} (minimum {} m)",
                p.pair.0 + 1,
                p.pair.1 + 1,
                p.distance,
                p.instant,
                scenario.d_collision
            ));
        }
    }

    let mut obstacles = Vec::new();
    let mut min_clear: Option<f64> = None;
    for (o_idx, o) in scenario.obstacles.iter().enumerate() {
        let required = o.radius + scenario.d_obstacle_safe;
        let mut best = ObstacleClearance {
            min_center_distance: f64::INFINITY,
            required,
            instant: 0,
            agent: 0,
        };
        for i in 0..m {
            for k in 0..=n {
                let d = (pos(i, k) - o.center).norm();
                if d < best.min_center_distance {
                    best.min_center_distance = d;
                    best.instant = k;
                    best.agent = i;
                }
            }
        }
        let margin = best.min_center_distance - required;
        min_clear = Some(min_clear.map_or(margin, |c: f64| c.min(margin)));
        if margin < -DISTANCE_TOLERANCE {
            violations.push(format!(
                "agent {} is {:.3} m from obstacle {} at instant {} (minimum {} m)",
                best.agent + 1,
                best.min_center_distance,
                o_idx + 1,
                best.instant,
                required
            ));
        }
        obstacles.push(best);
    }

    let mut max_nb: Option<PairDistance> = None;
    for i in 0..m {
        for &j in &topo.neighbor_sets[i][1..] {
            for k in 0..=n {
                let d = (pos(i, k) - pos(j, k)).norm();
                if max_nb.as_ref().is_none_or(|p| d > p.distance) {
                    max_nb = Some(PairDistance {
                        distance: d,
                        instant: k,
                        pair: (i.min(j), i.max(j)),
                    });
                }
            }
        }
    }
    if let Some(p) = &max_nb {
        if p.distance > scenario.d_comm + DISTANCE_TOLERANCE {
            violations.push(format!(
                "neighbors {} and {} are {:.3} m apart at instant {} (maximum {} m)",
                p.pair.0 + 1,
                p.pair.1 + 1,
                p.distance,
                p.instant,
                scenario.d_comm
            ));
        }
    }

    let mut time_gaps = Vec::new();
    let relax = scenario.relax();
    for i in 0..m {
        for &j in &topo.neighbor_sets[i][1..] {
            if j <= i && topo.neighbor_sets[j].contains(&i) {
                continue;
            }
            let (a, b) = (i.min(j), i.max(j));
            if let Some(off) = scenario.arrival_offset(b, a) {
                let gap = TimeGap {
                    earlier: a,
                    later: b,
                    required: off,
                    actual: trajs[b].t_final - trajs[a].t_final,
                    allowed_error: relax + TIME_TOLERANCE,
                };
                if (gap.actual - gap.required).abs() > gap.allowed_error {
                    violations.push(format!(
                        "arrival gap between agents {} and {} is {:.4} s (required {:.4} +/- {:.4} s)",
                        a + 1,
                        b + 1,
                        gap.actual,
                        gap.required,
                        gap.allowed_error
                    ));
                }
                time_gaps.push(gap);
            }
        }
    }

    let (t_lo, t_hi) = scenario.t_bounds;
    for (i, t) in trajs.iter().enumerate() {
        if !(t.t_final >= t_lo && t.t_final <= t_hi) {
            violations.push(format!("agent {} final time {} outside bounds", i + 1, t.t_final));
        }
        if t.states.iter().any(|s| !s.is_finite()) {
            violations.push(format!("agent {} trajectory is not finite", i + 1));
        }
        if t.controls
            .iter()
            .any(|c| c.omega.abs() > scenario.dynamics.omega_max + 1e-12)
        {
            violations.push(format!("agent {} exceeds the turn-rate limit", i + 1));
        }
    }

    Ok(ValidationReport {
        min_pairwise: min_pair,
        min_obstacle_clearance: min_clear,
        obstacles,
        max_neighbor_distance: max_nb,
        terminal_position_errors: trajs
            .iter()
            .zip(&scenario.agents)
            .map(|(t, a)| {
                let f = t.final_state();
                ((f.x - a.target.x).powi(2) + (f.y - a.target.y).powi(2)).sqrt()
            })
            .collect(),
        final_times: trajs.iter().map(|t| t.t_final).collect(),
        time_gaps,
        converged: false,
        iterations: 0,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Control, Dynamics, Unicycle};

    #[test]
    fn builtin_one_matches_table() {
        let c = builtin(1).unwrap();
        assert_eq!(c.m(), 4);
        assert_eq!(c.obstacles[0].center, Vector2::new(150.0, 125.0));
        assert_eq!(c.obstacles[0].radius, 20.0);
        assert_eq!(c.d_comm, 300.0);
        assert_eq!(c.t_guess, 9.3);
    }

    #[test]
    fn builtin_two_settings() {
        let c = builtin(2).unwrap();
        assert_eq!(
            c.time_sequence,
            TimeSequence::Intervals {
                gaps: vec![0.1; 4],
                relax: 0.01
            }
        );
        assert_eq!(c.stop.eps_abs, 5e-4);
        assert_eq!(c.d_comm, 380.0);
    }

    #[test]
    fn builtin_four_first_agent() {
        let c = builtin(4).unwrap();
        assert_eq!(c.agents[0].initial, AgentState::new(10.0, 100.0, 0.0));
        assert_eq!(c.agents[0].target, AgentState::new(280.0, 100.0, 0.0));
        assert_eq!(c.m(), 20);
        assert_eq!(c.obstacles.len(), 7);
    }

    #[test]
    fn unknown_builtin() {
        assert!(builtin(5).is_err());
    }

    #[test]
    fn toml_round_trip() {
        for id in 1..=4 {
            let c = builtin(id).unwrap();
            let text = to_toml(&c).unwrap();
            assert_eq!(from_toml(&text).unwrap(), c, "scenario {id}");
        }
    }

    #[test]
    fn missing_field_is_named() {
        let text = to_toml(&builtin(1).unwrap()).unwrap();
        let cut: String = text
            .lines()
            .filter(|l| !l.starts_with("d_collision_m"))
            .collect::<Vec<_>>()
            .join("\n");
        let err = from_toml(&cut).unwrap_err().to_string();
        assert!(err.contains("d_collision_m"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let text = to_toml(&builtin(1).unwrap())
            .unwrap()
            .replace("d_comm_m", "d_comm_m = 1.0\nd_extra_m");
        let err = from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("d_extra_m"), "{err}");
    }

    #[test]
    fn heading_degrees_converted() {
        let text = to_toml(&builtin(1).unwrap()).unwrap();
        let c = from_toml(&text).unwrap();
        assert_eq!(c.agents[2].initial.heading, std::f64::consts::PI);
    }

    #[test]
    fn parallel_lines_fifteen_metres() {
        let mut c = builtin(1).unwrap();
        c.agents.truncate(2);
        c.agents[1].initial.y = 125.0;
        c.obstacles.clear();
        let dyn_ = Unicycle::new(c.dynamics).unwrap();
        let trajs: Vec<AgentTrajectory> = c
            .agents
            .iter()
            .map(|a| dyn_.rollout(&a.initial, &[Control::default(); 100], 9.0).unwrap())
            .collect();
        let r = validate_trajectories(&trajs, &c).unwrap();
        assert_eq!(r.min_pairwise.as_ref().unwrap().distance, 15.0);
        assert!(r.passed());
    }

    #[test]
    fn obstacle_violation_flagged() {
        let c = builtin(1).unwrap();
        let dyn_ = Unicycle::new(c.dynamics).unwrap();
        // straight lines pass 15 m from the obstacle center
        let trajs: Vec<AgentTrajectory> = c
            .agents
            .iter()
            .map(|a| dyn_.rollout(&a.initial, &[Control::default(); 100], 9.0).unwrap())
            .collect();
        let r = validate_trajectories(&trajs, &c).unwrap();
        assert!(r.min_obstacle_clearance.unwrap() < 0.0);
        assert!(r.violations.iter().any(|v| v.contains("obstacle 1")));
    }
}
