//! Files written by `run`: the solution JSON plus CSV tables.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use swarm_pddp::consensus::SwarmSolution;
use swarm_pddp::scenarios::{from_toml, to_toml, ScenarioConfig, ValidationReport};

pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to re-validate or re-plot a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionFile {
    pub format_version: u32,
    pub generator: String,
    pub seed: u64,
    /// Scenario as TOML text, exactly as it was solved.
    pub config: String,
    pub solution: SwarmSolution,
    pub validation: ValidationReport,
}

impl SolutionFile {
    pub fn new(seed: u64, cfg: &ScenarioConfig, solution: SwarmSolution, validation: ValidationReport) -> Result<Self> {
        Ok(Self {
            format_version: FORMAT_VERSION,
            generator: format!("swarm-pddp {}", env!("CARGO_PKG_VERSION")),
            seed,
            config: to_toml(cfg)?,
            solution,
            validation,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if file.format_version != FORMAT_VERSION {
            anyhow::bail!(
                "{}: unsupported format_version {} (expected {FORMAT_VERSION})",
                path.display(),
                file.format_version
            );
        }
        Ok(file)
    }

    pub fn scenario(&self) -> Result<ScenarioConfig> {
        Ok(from_toml(&self.config)?)
    }
}

#[derive(Serialize)]
struct StateRow {
    agent: usize,
    instant: usize,
    time_s: f64,
    x_m: f64,
    y_m: f64,
    heading_rad: f64,
    /// Empty at the final instant.
    omega_radps: Option<f64>,
}

#[derive(Serialize)]
struct ResidualRow<'a> {
    iteration: usize,
    family: &'a str,
    primal: f64,
    primal_threshold: f64,
    dual: f64,
    dual_threshold: f64,
}

pub fn write_agents_csv(path: &Path, solution: &SwarmSolution) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (i, traj) in solution.trajectories.iter().enumerate() {
        for (k, s) in traj.states.iter().enumerate() {
            w.serialize(StateRow {
                agent: i + 1,
                instant: k,
                time_s: traj.time_at(k),
                x_m: s.x,
                y_m: s.y,
                heading_rad: s.heading,
                omega_radps: traj.controls.get(k).map(|c| c.omega),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_residuals_csv(path: &Path, solution: &SwarmSolution, cfg: &ScenarioConfig) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for rec in &solution.trace {
        for r in &rec.residuals.families {
            w.serialize(ResidualRow {
                iteration: rec.iteration,
                family: r.family.name(),
                primal: r.primal,
                primal_threshold: r.primal_threshold(&cfg.stop),
                dual: r.dual,
                dual_threshold: r.dual_threshold(&cfg.stop),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes JSON and CSVs into `dir`. Returns the paths written.
pub fn write_run(dir: &Path, file: &SolutionFile, cfg: &ScenarioConfig) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let json = dir.join("solution.json");
    let mut text = serde_json::to_string_pretty(file)?;
    text.push('\n');
    fs::write(&json, text).with_context(|| format!("writing {}", json.display()))?;
    let agents = dir.join("agents.csv");
    write_agents_csv(&agents, &file.solution)?;
    let residuals = dir.join("residuals.csv");
    write_residuals_csv(&residuals, &file.solution, cfg)?;
    let mut out = vec![json, agents, residuals];
    if let Some(trace) = &file.solution.bus_trace {
        let path = dir.join("messages.csv");
        let mut text = String::from("round,kind,sender,receiver,digest\n");
        for line in trace {
            text.push_str(line);
            text.push('\n');
        }
        fs::write(&path, text)?;
        out.push(path);
    }
    Ok(out)
}
