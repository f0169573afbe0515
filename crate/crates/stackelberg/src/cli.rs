//! Command-line front end. Results go to stdout as JSON (or a tab-separated table for `check`),
//! diagnostics to stderr.
//!
//! Exit codes: 0 success, 1 failed check, 2 invalid input, 3 solver failure, 4 missing or stale
//! solution artifacts.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::equilibrium::{rows, solve_equilibrium, Equilibrium, EquilibriumSummary};
use crate::formation::{run_formation_demo, triangle_example, FormationConfig};
use crate::leader_fbsde::stack::{mainrela_residual, LeaderRiccatiStack};
use crate::leader_fbsde::{relations, solve_definite_decoupling, AdjointFeedback, FbsdeLqProblem};
use crate::linalg;
use crate::model::{self, Definiteness, GameSpec, TimeGrid};
use crate::odesolve::MatrixTrajectory;
use crate::simulate::{self, LeaderPolicy, SimConfig, SimResult};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_MISSING: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "stackelberg", version, about = "Leader-follower LQ games under partial observation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads for simulation and per-level solves.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Single-threaded run with a fixed reduction order.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the equilibrium and write Riccati, gain and cost artifacts.
    Solve(SolveArgs),
    /// Monte Carlo run of a solved game.
    Simulate(SimulateArgs),
    /// Formation-control demo.
    Formation(FormationArgs),
    /// Fast invariant suite.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Replace the config's step size (constant coefficients only).
    #[arg(long)]
    pub dt_override: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Directory written by `solve`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub paths: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub antithetic: bool,
    /// Number of paths whose trajectories are written as CSV.
    #[arg(long, default_value_t = 0)]
    pub record: usize,
    #[arg(long)]
    pub dt_override: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FormationArgs {
    /// Formation config; the built-in three-robot example when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2_000)]
    pub paths: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also simulate the zero leader control with best-responding followers.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub dt_override: Option<f64>,
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation(_) | Error::Parse(_) | Error::ShapeMismatch(_) | Error::GridMismatch(_) => EXIT_INVALID,
        _ => EXIT_SOLVER,
    }
}

struct Failure(i32, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(exit_code(&e), e.to_string())
    }
}

fn invalid(e: Error) -> Failure {
    Failure(EXIT_INVALID, e.to_string())
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("STACKELBERG_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).target(env_logger::Target::Stderr).try_init();
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialised: {e}");
        }
    }
    let out = match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Formation(a) => cmd_formation(a),
        Command::Check(a) => cmd_check(a),
    };
    match out {
        Ok(code) => code,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            code
        }
    }
}

/// Loads a game, applying a step-size override.
pub fn load_game(config: &Path, dt_override: Option<f64>) -> Result<GameSpec> {
    let spec = model::load_spec(config)?;
    match dt_override {
        None => Ok(spec),
        Some(dt) if dt > 0.0 && dt.is_finite() => {
            let steps = (spec.grid.t_end / dt).round().max(1.0) as usize;
            spec.with_grid(TimeGrid::new(spec.grid.t_end, steps))
        }
        Some(dt) => Err(Error::Parse(format!("invalid --dt-override {dt}"))),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, &text)?;
    Ok(text)
}

fn write_traj(dir: &Path, name: &str, tr: &MatrixTrajectory) -> Result<()> {
    tr.write_csv(BufWriter::new(File::create(dir.join(name))?))
}

#[derive(Debug, Serialize)]
struct SolveSummary<'a> {
    dims: model::Dims,
    grid: TimeGrid,
    leader_definiteness: Definiteness,
    #[serde(flatten)]
    equilibrium: &'a EquilibriumSummary,
}

fn cmd_solve(a: &SolveArgs) -> std::result::Result<i32, Failure> {
    let spec = load_game(&a.config, a.dt_override).map_err(invalid)?;
    let eq = solve_equilibrium(&spec)?;
    let summary = eq.summary()?;
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    write_artifacts(&eq, &a.out)?;
    let s = SolveSummary { dims: spec.dims, grid: spec.grid, leader_definiteness: spec.leader_definiteness, equilibrium: &summary };
    println!("{}", write_json(&a.out.join("summary.json"), &s)?);
    Ok(EXIT_OK)
}

/// Riccati, gain and covariance trajectories as long-format CSV files.
pub fn write_artifacts(eq: &Equilibrium, dir: &Path) -> Result<()> {
    for (i, f) in eq.followers.iter().enumerate() {
        write_traj(dir, &format!("follower{}_p.csv", i + 1), &f.p)?;
        write_traj(dir, &format!("follower{}_gain.csv", i + 1), &f.gain_state)?;
    }
    write_traj(dir, "filter_sigma.csv", &eq.followers[0].sigma)?;
    write_traj(dir, "leader_sigma_tilde.csv", &eq.covariance.sigma_tilde)?;
    let s = &eq.stack;
    for (name, tr) in [("leader_p1.csv", &s.p1), ("leader_p2.csv", &s.p2), ("leader_p3.csv", &s.p3)] {
        write_traj(dir, name, tr)?;
    }
    let fb = &eq.feedback;
    for (name, tr) in [("leader_gx.csv", &fb.gx), ("leader_gh.csv", &fb.gh), ("leader_affine.csv", &fb.affine)] {
        write_traj(dir, name, tr)?;
    }
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs) -> std::result::Result<i32, Failure> {
    let summary_path = a.out.join("summary.json");
    let stored = fs::read_to_string(&summary_path)
        .map_err(|_| Failure(EXIT_MISSING, format!("{} not found; run `solve` first", summary_path.display())))?;
    let stored: serde_json::Value = serde_json::from_str(&stored)
        .map_err(|e| Failure(EXIT_MISSING, format!("{} is unreadable: {e}", summary_path.display())))?;
    let spec = load_game(&a.config, a.dt_override).map_err(invalid)?;
    if a.paths == 0 {
        return Err(Failure(EXIT_INVALID, "--paths must be positive".into()));
    }
    let eq = solve_equilibrium(&spec)?;
    let gains = serde_json::to_value(rows(eq.feedback.gx.first())).map_err(Error::from)?;
    if stored.pointer("/gain_at_zero/gx") != Some(&gains) || stored.pointer("/grid/steps") != Some(&spec.grid.steps.into()) {
        return Err(Failure(EXIT_MISSING, "solution artifacts do not match this config; rerun `solve`".into()));
    }
    let cfg = SimConfig { paths: a.paths, seed: a.seed, antithetic: a.antithetic, record_paths: a.record, trace: None };
    let r = simulate::run_closed_loop(&eq, &LeaderPolicy::Equilibrium, &cfg)?;
    for (j, tr) in r.trajectories.iter().enumerate() {
        let f = File::create(a.out.join(format!("path{j}.csv"))).map_err(Error::from)?;
        simulate::write_trace_csv(&spec, tr, BufWriter::new(f))?;
    }
    println!("{}", write_json(&a.out.join("sim.json"), &r)?);
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct FormationOutput<'a> {
    initial_error: f64,
    terminal_error: f64,
    sim: &'a SimResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline: Option<SimResult>,
}

fn cmd_formation(a: &FormationArgs) -> std::result::Result<i32, Failure> {
    let cfg = match &a.config {
        Some(p) => FormationConfig::load(p).map_err(invalid)?,
        None => triangle_example(0.3, 500),
    };
    cfg.spec.validate().map_err(invalid)?;
    let obs = cfg.observations().map_err(invalid)?;
    let sim_cfg = SimConfig::new(a.paths.max(1), a.seed);
    let demo = run_formation_demo(&cfg.spec, &obs, &sim_cfg)?;
    let baseline = if a.baseline { Some(demo.zero_leader_baseline(&sim_cfg)?) } else { None };
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    demo.write_trace_csv(BufWriter::new(File::create(a.out.join("formation_trace.csv")).map_err(Error::from)?))?;
    let out = FormationOutput {
        initial_error: demo.initial_error(),
        terminal_error: demo.terminal_error(),
        sim: &demo.sim,
        baseline,
    };
    println!("{}", write_json(&a.out.join("formation.json"), &out)?);
    Ok(EXIT_OK)
}

/// One row of the invariant table.
#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckRow {
    fn at_most(name: &str, value: f64, tolerance: f64) -> Self {
        CheckRow { name: name.into(), value, tolerance, passed: value <= tolerance }
    }
}

fn worst(tr: &[&MatrixTrajectory], f: impl Fn(&linalg::Mat) -> f64) -> f64 {
    tr.iter().flat_map(|t| t.values.iter().map(&f)).fold(0.0, f64::max)
}

/// Largest negative eigenvalue relative to the matrix size.
fn psd_defect(m: &linalg::Mat) -> f64 {
    let s = linalg::sym(m);
    (-linalg::min_eig(&s)).max(0.0) / (1.0 + s.norm())
}

/// The mainrela residual rebuilt from the top level's own blocks, so that any inconsistency
/// between its P̃ and its (P1, P2, P3) shows up.
pub fn top_level_mainrela(p: &FbsdeLqProblem, es: &crate::leader_fbsde::EnlargedSystem, stack: &LeaderRiccatiStack) -> Result<f64> {
    let Some(top) = stack.levels.last() else {
        return Err(Error::PreconditionViolated("no regularization levels".into()));
    };
    let mut worst: f64 = 0.0;
    for k in 0..p.grid.len() {
        let t = p.grid.t(k);
        let mm = relations::m_mats(&es.at(t), &top.tilde_p(k));
        let b = top.blocks(k);
        let r = relations::relations(&p.node(k), &b, t)?;
        worst = worst.max(mainrela_residual(&mm, &r, &b, t)?);
    }
    Ok(worst)
}

/// The invariant suite on a solved equilibrium.
pub fn run_checks(eq: &Equilibrium) -> Vec<CheckRow> {
    let mut rows = Vec::new();
    let ps: Vec<&MatrixTrajectory> = eq.followers.iter().map(|f| &f.p).collect();
    rows.push(CheckRow::at_most("follower Riccati symmetry", worst(&ps, linalg::asym_residual), 1e-10));
    rows.push(CheckRow::at_most("follower Riccati PSD defect", worst(&ps, psd_defect), 1e-10));
    let sig = [&eq.followers[0].sigma, &eq.covariance.sigma_tilde, &eq.covariance.cross_sq];
    rows.push(CheckRow::at_most("covariance symmetry", worst(&sig, linalg::asym_residual), 1e-10));
    rows.push(CheckRow::at_most("covariance PSD defect", worst(&sig, psd_defect), 1e-10));
    rows.push(CheckRow::at_most("leader P1/P3 symmetry", worst(&[&eq.stack.p1, &eq.stack.p3], linalg::asym_residual), 1e-10));
    let rep = &eq.stack.report;
    if !eq.stack.levels.is_empty() {
        rows.push(CheckRow::at_most("block recovery identities", rep.recovery_residual, 1e-10));
        let m = top_level_mainrela(&eq.problem, &eq.enlarged, &eq.stack).unwrap_or(f64::INFINITY);
        rows.push(CheckRow::at_most("mainrela residual", m, 1e-6));
    }
    if eq.problem.definiteness == Definiteness::Definite {
        let gap = solve_definite_decoupling(&eq.problem)
            .map(|dd| {
                let d = AdjointFeedback::from_definite(&dd);
                let f = &eq.feedback;
                d.gx.max_node_diff(&f.gx).max(d.gh.max_node_diff(&f.gh)).max(d.affine.max_node_diff(&f.affine))
            })
            .unwrap_or(f64::INFINITY);
        rows.push(CheckRow::at_most("definite/indefinite gain agreement", gap, 1e-5));
    }
    rows
}

pub fn format_checks(rows: &[CheckRow]) -> String {
    let mut s = String::from("check\tvalue\ttolerance\tstatus\n");
    for r in rows {
        s += &format!("{}\t{:.3e}\t{:.0e}\t{}\n", r.name, r.value, r.tolerance, if r.passed { "PASS" } else { "FAIL" });
    }
    s
}

fn cmd_check(a: &CheckArgs) -> std::result::Result<i32, Failure> {
    let spec = load_game(&a.config, a.dt_override).map_err(invalid)?;
    let eq = solve_equilibrium(&spec)?;
    let rows = run_checks(&eq);
    print!("{}", format_checks(&rows));
    Ok(if rows.iter().all(|r| r.passed) { EXIT_OK } else { EXIT_CHECK_FAILED })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;

    #[test]
    fn healthy_benchmark_passes_every_check() {
        let eq = solve_equilibrium(&model::scalar_benchmark(100)).unwrap();
        let rows = run_checks(&eq);
        assert!(rows.iter().any(|r| r.name.starts_with("definite")));
        assert!(rows.iter().all(|r| r.passed), "{}", format_checks(&rows));
    }

    #[test]
    fn corrupted_p2_fails_the_mainrela_check() {
        let mut eq = solve_equilibrium(&model::scalar_benchmark(100)).unwrap();
        let top = eq.stack.levels.last_mut().unwrap();
        for v in top.p2.values.iter_mut().skip(40).take(5) {
            *v += Mat::from_element(1, 1, 0.05);
        }
        let rows = run_checks(&eq);
        let m = rows.iter().find(|r| r.name == "mainrela residual").unwrap();
        assert!(!m.passed, "{}", format_checks(&rows));
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Validation(vec![])), EXIT_INVALID);
        assert_eq!(exit_code(&Error::NonFinite { t: 0.5 }), EXIT_SOLVER);
        assert_eq!(exit_code(&Error::Parse("x".into())), EXIT_INVALID);
    }

    #[test]
    fn cli_parses_global_flags() {
        let cli = Cli::try_parse_from(["stackelberg", "simulate", "--config", "c.json", "--out", "o", "--paths", "7", "--deterministic"])
            .unwrap();
        assert!(cli.deterministic);
        match cli.command {
            Command::Simulate(a) => assert_eq!(a.paths, 7),
            _ => panic!("wrong subcommand"),
        }
        assert!(Cli::try_parse_from(["stackelberg"]).is_err());
    }
}
