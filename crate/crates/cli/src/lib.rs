//! Batch runner for swarm-pddp: single runs with artifacts, scheme
//! comparison tables and offline validation of saved solutions.

pub mod artifacts;
pub mod compare;
pub mod plot;

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use swarm_pddp::consensus::{run, EngineOptions};
use swarm_pddp::penalty::PenaltyScheme;
use swarm_pddp::scenarios::{builtin, load, validate, validate_trajectories, ScenarioConfig, ValidationReport};

use crate::artifacts::SolutionFile;

pub const SCHEMA_VERSION: u32 = 1;
pub const THREADS_ENV: &str = "SWARM_PDDP_THREADS";

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    Failure = 1,
    NotConverged = 2,
    Invalid = 3,
}

#[derive(Debug, Parser)]
#[command(
    name = "swarm-pddp",
    version,
    about = "Distributed free-final-time trajectory optimization for vehicle swarms"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one scenario and write artifacts.
    Run(RunArgs),
    /// Iteration counts of several schemes across scenarios.
    Compare(CompareArgs),
    /// Check a saved solution against the true constraints.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ScenarioArgs {
    /// Built-in scenario 1-4.
    #[arg(long, conflicts_with = "config")]
    pub scenario: Option<u8>,
    /// Scenario TOML file.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ScenarioArgs {
    pub fn builtin(id: u8) -> Self {
        Self {
            scenario: Some(id),
            config: None,
        }
    }

    pub fn resolve(&self) -> Result<Option<ScenarioConfig>> {
        match (&self.scenario, &self.config) {
            (Some(id), _) => Ok(Some(builtin(*id)?)),
            (None, Some(path)) => Ok(Some(load(path)?)),
            (None, None) => Ok(None),
        }
    }
}

fn parse_scheme(s: &str) -> Result<PenaltyScheme, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = PenaltyScheme::ALL.iter().map(|p| p.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub source: ScenarioArgs,
    /// fixed | rb | rb-inverted | na | ap
    #[arg(long, default_value = "fixed", value_parser = parse_scheme)]
    pub scheme: PenaltyScheme,
    /// Recorded with the artifacts; the solver itself draws no random numbers.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Also write every bus delivery to messages.csv.
    #[arg(long)]
    pub trace: bool,
    #[arg(long = "svg", overrides_with = "no_svg")]
    pub svg: bool,
    #[arg(long = "no-svg")]
    pub no_svg: bool,
}

impl RunArgs {
    pub fn new(source: ScenarioArgs, scheme: PenaltyScheme, out: PathBuf) -> Self {
        Self {
            source,
            scheme,
            seed: 0,
            max_iter: None,
            out,
            trace: false,
            svg: false,
            no_svg: false,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    /// Built-in scenarios, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    pub scenarios: Vec<u8>,
    /// Scenario files compared in addition to the built-ins.
    #[arg(long, value_delimiter = ',')]
    pub configs: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "fixed,ap", value_parser = parse_scheme)]
    pub schemes: Vec<PenaltyScheme>,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Writes compare.csv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub solution: PathBuf,
    /// Overrides the scenario stored in the solution file.
    #[command(flatten)]
    pub source: ScenarioArgs,
}

/// Validation figures carried by a run record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub passed: bool,
    pub min_pairwise_m: Option<f64>,
    pub min_obstacle_clearance_m: Option<f64>,
    pub max_neighbor_distance_m: Option<f64>,
    pub violations: Vec<String>,
}

impl From<&ValidationReport> for ValidationSummary {
    fn from(r: &ValidationReport) -> Self {
        Self {
            passed: r.passed(),
            min_pairwise_m: r.min_pairwise.as_ref().map(|p| p.distance),
            min_obstacle_clearance_m: r.min_obstacle_clearance,
            max_neighbor_distance_m: r.max_neighbor_distance.as_ref().map(|p| p.distance),
            violations: r.violations.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub scenario: String,
    pub scheme: String,
    pub iterations: usize,
    pub wall_time_s: f64,
    pub converged: bool,
    pub final_times: Vec<f64>,
    pub validation: ValidationSummary,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub status: Status,
    pub files: Vec<PathBuf>,
}

/// Engine options with the worker cap taken from the environment.
pub fn engine_options(trace: bool) -> Result<EngineOptions> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| anyhow!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
            if n == 0 {
                return Err(anyhow!("{THREADS_ENV} must be a positive integer, got 0"));
            }
            Some(n)
        }
        Err(_) => None,
    };
    Ok(EngineOptions {
        threads,
        record_bus_trace: trace,
        ..EngineOptions::default()
    })
}

fn status_of(converged: bool, report: &ValidationReport) -> Status {
    if !converged {
        Status::NotConverged
    } else if !report.passed() {
        Status::Invalid
    } else {
        Status::Ok
    }
}

/// Solves a scenario in memory, without writing anything.
pub fn solve(cfg: &ScenarioConfig, scheme: PenaltyScheme, opts: &EngineOptions) -> Result<(SolutionFile, RunRecord)> {
    solve_seeded(cfg, scheme, opts, 0)
}

fn solve_seeded(
    cfg: &ScenarioConfig,
    scheme: PenaltyScheme,
    opts: &EngineOptions,
    seed: u64,
) -> Result<(SolutionFile, RunRecord)> {
    let started = Instant::now();
    let solution = run(cfg, scheme, opts)?;
    let wall = started.elapsed().as_secs_f64();
    let report = validate(&solution, cfg)?;
    let record = RunRecord {
        schema_version: SCHEMA_VERSION,
        scenario: cfg.name.clone(),
        scheme: scheme.name().into(),
        iterations: solution.iterations,
        wall_time_s: wall,
        converged: solution.converged,
        final_times: solution.trajectories.iter().map(|t| t.t_final).collect(),
        validation: ValidationSummary::from(&report),
    };
    Ok((SolutionFile::new(seed, cfg, solution, report)?, record))
}

pub fn cmd_run(args: &RunArgs) -> Result<RunOutcome> {
    let mut cfg = args
        .source
        .resolve()?
        .ok_or_else(|| anyhow!("run needs --scenario or --config"))?;
    if let Some(n) = args.max_iter {
        cfg.stop.max_iter = n;
    }
    let opts = engine_options(args.trace)?;
    log::info!(
        "solving {} with {} (max {} iterations)",
        cfg.name,
        args.scheme,
        cfg.stop.max_iter
    );
    let (file, record) = solve_seeded(&cfg, args.scheme, &opts, args.seed)?;
    let mut files = artifacts::write_run(&args.out, &file, &cfg)?;
    if !args.no_svg {
        let paths = [
            (
                args.out.join("trajectories.svg"),
                plot::trajectories_svg(&file.solution, &cfg),
            ),
            (args.out.join("times.svg"), plot::times_svg(&file.solution)),
        ];
        for (path, text) in paths {
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            files.push(path);
        }
    }
    let status = status_of(record.converged, &file.validation);
    Ok(RunOutcome { record, status, files })
}

#[derive(Debug, Clone)]
pub struct ValidateOutcome {
    pub report: ValidationReport,
    pub status: Status,
}

/// Re-checks the stored trajectories. Convergence does not affect the status.
pub fn cmd_validate(args: &ValidateArgs) -> Result<ValidateOutcome> {
    let file = SolutionFile::read(&args.solution)?;
    let cfg = match args.source.resolve()? {
        Some(c) => c,
        None => file.scenario()?,
    };
    let mut report = validate_trajectories(&file.solution.trajectories, &cfg)?;
    report.converged = file.solution.converged;
    report.iterations = file.solution.iterations;
    let status = if report.passed() { Status::Ok } else { Status::Invalid };
    Ok(ValidateOutcome { report, status })
}

fn print_report(r: &ValidationReport) {
    println!("converged: {} after {} iterations", r.converged, r.iterations);
    if let Some(p) = &r.min_pairwise {
        println!(
            "closest approach: {:.3} m between agents {} and {} at instant {}",
            p.distance,
            p.pair.0 + 1,
            p.pair.1 + 1,
            p.instant
        );
    }
    if let Some(c) = r.min_obstacle_clearance {
        println!("obstacle margin: {c:.3} m");
    }
    if let Some(p) = &r.max_neighbor_distance {
        println!(
            "widest neighbor pair: {:.3} m between agents {} and {} at instant {}",
            p.distance,
            p.pair.0 + 1,
            p.pair.1 + 1,
            p.instant
        );
    }
    let times: Vec<String> = r.final_times.iter().map(|t| format!("{t:.3}")).collect();
    println!("final times [s]: {}", times.join(" "));
    for g in &r.time_gaps {
        println!(
            "gap {}->{}: {:.4} s (required {:.3} +/- {:.3})",
            g.earlier + 1,
            g.later + 1,
            g.actual,
            g.required,
            g.allowed_error
        );
    }
    for v in &r.violations {
        println!("VIOLATION: {v}");
    }
}

fn dispatch(cli: Cli) -> Result<Status> {
    match cli.command {
        Command::Run(args) => {
            let out = cmd_run(&args)?;
            let r = &out.record;
            println!(
                "{} / {}: {} after {} iterations in {:.2} s",
                r.scenario,
                r.scheme,
                if r.converged { "converged" } else { "not converged" },
                r.iterations,
                r.wall_time_s
            );
            let times: Vec<String> = r.final_times.iter().map(|t| format!("{t:.3}")).collect();
            println!("final times [s]: {}", times.join(" "));
            for v in &r.validation.violations {
                println!("VIOLATION: {v}");
            }
            for f in &out.files {
                println!("wrote {}", f.display());
            }
            Ok(out.status)
        }
        Command::Compare(args) => {
            let table = compare::cmd_compare(&args)?;
            print!("{}", table.to_text());
            if let Some(dir) = &args.out {
                let path = table.write_csv(dir)?;
                println!("wrote {}", path.display());
            }
            Ok(Status::Ok)
        }
        Command::Validate(args) => {
            let out = cmd_validate(&args)?;
            print_report(&out.report);
            Ok(out.status)
        }
    }
}

/// Parses `argv`, runs the command and returns the exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { Status::Failure as i32 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(s) => s as i32,
        Err(e) => {
            eprintln!("error: {e:#}");
            Status::Failure as i32
        }
    }
}
