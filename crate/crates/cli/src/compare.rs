//! Scheme comparison: every scenario against every scheme, iteration counts
//! and reduction relative to the fixed-penalty baseline.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use swarm_pddp::penalty::PenaltyScheme;
use swarm_pddp::scenarios::{builtin, load, ScenarioConfig};

use crate::{engine_options, solve, CompareArgs, RunRecord};

/// Result of one scenario/scheme cell. Repeats are averaged.
#[derive(Debug, Clone)]
pub enum Cell {
    Done {
        iterations: usize,
        converged: bool,
        wall_time_s: f64,
        valid: bool,
    },
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct CompareTable {
    pub scenarios: Vec<String>,
    pub schemes: Vec<PenaltyScheme>,
    /// `cells[scenario][scheme]`
    pub cells: Vec<Vec<Cell>>,
    pub records: Vec<RunRecord>,
}

#[derive(Serialize)]
struct Row<'a> {
    scenario: &'a str,
    scheme: &'a str,
    iterations: Option<usize>,
    converged: Option<bool>,
    valid: Option<bool>,
    wall_time_s: Option<f64>,
    reduction_vs_fixed_pct: Option<f64>,
    error: Option<&'a str>,
}

impl CompareTable {
    fn fixed_iterations(&self, row: usize) -> Option<usize> {
        let col = self.schemes.iter().position(|s| *s == PenaltyScheme::Fixed)?;
        match &self.cells[row][col] {
            Cell::Done {
                iterations,
                converged: true,
                ..
            } => Some(*iterations),
            _ => None,
        }
    }

    /// Percentage fewer iterations than fixed; only between converged runs.
    pub fn reduction(&self, row: usize, col: usize) -> Option<f64> {
        let base = self.fixed_iterations(row)?;
        match &self.cells[row][col] {
            Cell::Done {
                iterations,
                converged: true,
                ..
            } => Some(100.0 * (base as f64 - *iterations as f64) / base as f64),
            _ => None,
        }
    }

    pub fn to_text(&self) -> String {
        let name_w = self.scenarios.iter().map(|s| s.len()).max().unwrap_or(8).max(8);
        let mut out = String::new();
        let _ = write!(out, "{:<name_w$}", "scenario");
        for s in &self.schemes {
            let _ = write!(out, " {:>18}", s.name());
        }
        out.push('\n');
        for (r, name) in self.scenarios.iter().enumerate() {
            let _ = write!(out, "{name:<name_w$}");
            for c in 0..self.schemes.len() {
                let text = match &self.cells[r][c] {
                    Cell::Failed(_) => "error".to_string(),
                    Cell::Done {
                        iterations, converged, ..
                    } => {
                        let mut t = if *converged {
                            iterations.to_string()
                        } else {
                            format!(">{iterations}")
                        };
                        if let Some(p) = self.reduction(r, c).filter(|_| self.schemes[c] != PenaltyScheme::Fixed) {
                            let _ = write!(t, " ({p:+.1}%)");
                        }
                        t
                    }
                };
                let _ = write!(out, " {text:>18}");
            }
            out.push('\n');
        }
        for (r, name) in self.scenarios.iter().enumerate() {
            for (c, cell) in self.cells[r].iter().enumerate() {
                if let Cell::Failed(e) = cell {
                    let _ = writeln!(out, "{name} / {}: {e}", self.schemes[c]);
                }
            }
        }
        out
    }

    pub fn write_csv(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("compare.csv");
        let mut w = csv::Writer::from_path(&path)?;
        for (r, name) in self.scenarios.iter().enumerate() {
            for (c, scheme) in self.schemes.iter().enumerate() {
                let row = match &self.cells[r][c] {
                    Cell::Done {
                        iterations,
                        converged,
                        wall_time_s,
                        valid,
                    } => Row {
                        scenario: name,
                        scheme: scheme.name(),
                        iterations: Some(*iterations),
                        converged: Some(*converged),
                        valid: Some(*valid),
                        wall_time_s: Some(*wall_time_s),
                        reduction_vs_fixed_pct: self.reduction(r, c),
                        error: None,
                    },
                    Cell::Failed(e) => Row {
                        scenario: name,
                        scheme: scheme.name(),
                        iterations: None,
                        converged: None,
                        valid: None,
                        wall_time_s: None,
                        reduction_vs_fixed_pct: None,
                        error: Some(e),
                    },
                };
                w.serialize(row)?;
            }
        }
        w.flush()?;
        Ok(path)
    }
}

/// Error text collapsed onto one line for the table and the CSV.
fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn run_cell(cfg: &ScenarioConfig, scheme: PenaltyScheme, repeats: usize, records: &mut Vec<RunRecord>) -> Cell {
    let opts = match engine_options(false) {
        Ok(o) => o,
        Err(e) => return Cell::Failed(one_line(&format!("{e:#}"))),
    };
    let mut wall = 0.0;
    let mut first: Option<RunRecord> = None;
    for _ in 0..repeats.max(1) {
        match solve(cfg, scheme, &opts) {
            Ok((_, rec)) => {
                wall += rec.wall_time_s;
                first.get_or_insert(rec.clone());
                records.push(rec);
            }
            Err(e) => return Cell::Failed(one_line(&format!("{e:#}"))),
        }
    }
    // iteration counts are deterministic, only wall time varies
    let rec = first.expect("at least one repeat");
    Cell::Done {
        iterations: rec.iterations,
        converged: rec.converged,
        wall_time_s: wall / repeats.max(1) as f64,
        valid: rec.validation.passed,
    }
}

/// Runs the grid. Failures are recorded per cell and never abort the table.
pub fn cmd_compare(args: &CompareArgs) -> Result<CompareTable> {
    if args.scenarios.is_empty() && args.configs.is_empty() {
        anyhow::bail!("compare needs at least one scenario");
    }
    if args.schemes.len() < 2 {
        anyhow::bail!("compare needs at least two schemes");
    }
    let mut configs: Vec<Result<ScenarioConfig, String>> = Vec::new();
    let mut names = Vec::new();
    for id in &args.scenarios {
        let cfg = builtin(*id).map_err(|e| one_line(&e.to_string()));
        names.push(match &cfg {
            Ok(c) => c.name.clone(),
            Err(_) => format!("scenario-{id}"),
        });
        configs.push(cfg);
    }
    for path in &args.configs {
        let loaded = load(path).map_err(|e| one_line(&e.to_string()));
        names.push(match &loaded {
            Ok(c) => c.name.clone(),
            Err(_) => path.display().to_string(),
        });
        configs.push(loaded);
    }
    let mut table = CompareTable {
        scenarios: names,
        schemes: args.schemes.clone(),
        cells: Vec::new(),
        records: Vec::new(),
    };
    for cfg in configs {
        let mut row = Vec::new();
        for &scheme in &args.schemes {
            let cell = match &cfg {
                Err(e) => Cell::Failed(e.clone()),
                Ok(c) => {
                    let mut c = c.clone();
                    if let Some(n) = args.max_iter {
                        c.stop.max_iter = n;
                    }
                    log::info!("compare: {} / {}", c.name, scheme);
                    run_cell(&c, scheme, args.repeats, &mut table.records)
                }
            };
            row.push(cell);
        }
        table.cells.push(row);
    }
    Ok(table)
}
