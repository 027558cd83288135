//! Config-driven commands behind the `ccmfg` binary.
//!
//! Each command reads a [`RunConfig`], runs one of the solvers and returns a
//! [`RunReport`]. Reports carry no timing, so the same config, seed and
//! thread count give byte-identical output.

mod config;
mod format;

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::*;
pub use format::{float, to_csv, to_json};

use crate::equilibrium_det::{
    enumerate_multiway, eval_f, iterate_from_seeds, lattice_size, scan_binary, select_social,
    UniformModel, DEFAULT_LATTICE_CAP, SOCIAL_TIE_TOLERANCE,
};
use crate::equilibrium_stoch::{
    discover_equilibria, gaussian_uniqueness, random_split, solve_binary_bisection,
    solve_binary_monotone, solve_broyden, DiscoveryOptions, Distribution, SplitSolution,
    StochasticModel, DEDUP_TOLERANCE,
};
use crate::error::{Error, Result};
use crate::hetero::{
    default_starts, feasibility_bound, picard_multistart, solve_type_tracking, HeteroModel,
    HeteroProblem, PicardOptions,
};
use crate::model::Problem;
use crate::numerics::Trajectory;
use crate::sim_nash::{
    draw_agents, epsilon_nash, median_by_size, simulate_population, uniform_agents, Agent,
    SimulationResult,
};
use crate::tracking::solve_tracking;

/// Cap on the sample used to estimate expected costs of continuum equilibria.
const SOCIAL_SAMPLES: usize = 20_000;
pub const DEFAULT_SIZES: [usize; 3] = [50, 200, 800];
const DEFAULT_AGENTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Det,
    #[default]
    Stoch,
    Hetero,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "det" => Ok(Self::Det),
            "stoch" => Ok(Self::Stoch),
            "hetero" => Ok(Self::Hetero),
            _ => Err(Error::invalid(
                "mode",
                format!("expected det, stoch or hetero, got {s:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSummary {
    pub split: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<usize>>,
    /// `‖F(λ) - λ‖∞`, in counts for finite populations.
    pub residual: f64,
    /// `‖G(x̂) - x̂‖∞` for the equilibrium path.
    pub mean_map_residual: f64,
    /// Mean cost per agent.
    pub social_cost: f64,
    pub method: String,
    pub iterations: usize,
    /// Per-type destination shares, for mixed populations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masses: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessSummary {
    pub projected_variance: f64,
    pub slope: f64,
    pub variance_condition: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
    pub mean_coordinate: f64,
    pub unique: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilitySummary {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub value: f64,
    pub satisfied: bool,
}

/// A path sampled at the grid nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSamples {
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
}

impl PathSamples {
    pub fn of(path: &Trajectory) -> Self {
        Self {
            t: path.grid().nodes(),
            x: path
                .nodes()
                .iter()
                .map(|v| v.iter().copied().collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub agents: usize,
    pub counts: Vec<usize>,
    /// `‖x̄_N - x̂‖∞`.
    pub gap: f64,
    pub mean_cost: f64,
    pub diverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub value: f64,
    pub equilibria: Vec<EquilibriumSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected: Option<usize>,
    /// Largest share of the selected equilibrium.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub majority_share: Option<f64>,
    /// Destinations holding more than 1% of the selected equilibrium.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub populated: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashRow {
    #[serde(rename = "N")]
    pub size: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub min_gain: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashMedian {
    #[serde(rename = "N")]
    pub size: usize,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashSummary {
    pub rows: Vec<NashRow>,
    pub medians: Vec<NashMedian>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub mode: Mode,
    /// The config as run, seed override included.
    pub config: RunConfig,
    pub equilibria: Vec<EquilibriumSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uniqueness: Option<UniquenessSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feasibility: Option<FeasibilitySummary>,
    /// Tracked path of the selected equilibrium.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathSamples>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<SweepEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nash: Option<NashSummary>,
    pub warnings: Vec<String>,
}

impl RunReport {
    fn new(command: &str, mode: Mode, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            mode,
            config: config.clone(),
            equilibria: Vec::new(),
            selected: None,
            uniqueness: None,
            feasibility: None,
            path: None,
            simulation: None,
            sweep: None,
            nash: None,
            warnings: Vec::new(),
        }
    }

    pub fn selected_equilibrium(&self) -> Option<&EquilibriumSummary> {
        self.selected.map(|i| &self.equilibria[i])
    }
}

/// Everything the solvers found for one config.
struct Solved {
    equilibria: Vec<EquilibriumSummary>,
    paths: Vec<Trajectory>,
    selected: Option<usize>,
    uniqueness: Option<UniquenessSummary>,
    feasibility: Option<FeasibilitySummary>,
    warnings: Vec<String>,
}

impl Solved {
    fn empty() -> Self {
        Self {
            equilibria: Vec::new(),
            paths: Vec::new(),
            selected: None,
            uniqueness: None,
            feasibility: None,
            warnings: Vec::new(),
        }
    }

    fn selected_path(&self) -> Result<&Trajectory> {
        self.selected
            .map(|i| &self.paths[i])
            .ok_or(Error::NoEquilibrium)
    }

    fn fill(self, report: &mut RunReport) {
        report.path = self.selected.map(|i| PathSamples::of(&self.paths[i]));
        report.equilibria = self.equilibria;
        report.selected = self.selected;
        report.uniqueness = self.uniqueness;
        report.feasibility = self.feasibility;
        report.warnings.extend(self.warnings);
    }
}

/// Lowest social cost; near-ties go to the lexicographically smallest split.
fn select(equilibria: &[EquilibriumSummary]) -> Option<usize> {
    let best = equilibria
        .iter()
        .map(|e| e.social_cost)
        .fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return (!equilibria.is_empty()).then_some(0);
    }
    let tol = SOCIAL_TIE_TOLERANCE * best.abs().max(1.0);
    equilibria
        .iter()
        .enumerate()
        .filter(|(_, e)| e.social_cost <= best + tol)
        .min_by(|a, b| {
            a.1.split
                .iter()
                .zip(&b.1.split)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .map(|(i, _)| i)
}

/// Mean optimal cost of `states` against `path`.
fn social_cost_uniform(
    problem: &Problem,
    states: &[DVector<f64>],
    path: &Trajectory,
) -> Result<f64> {
    let sol = solve_tracking(problem, path)?;
    let costs: Vec<f64> = states
        .par_iter()
        .map(|x| sol.best_destination(x).1)
        .collect();
    Ok(costs.iter().sum::<f64>() / costs.len() as f64)
}

fn random_counts(n: usize, l: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let split = random_split(l, rng);
    let mut counts: Vec<usize> = split
        .iter()
        .map(|s| (s * n as f64).floor() as usize)
        .collect();
    let short = n - counts.iter().sum::<usize>();
    counts[l - 1] += short;
    counts
}

fn solve_det(config: &RunConfig) -> Result<Solved> {
    let problem = config.problem()?;
    let model = UniformModel::new(problem)?;
    let pop = config.finite_population(None)?;
    let l = model.num_destinations();
    let n = pop.len();
    let cap = config
        .solver
        .lattice_cap
        .map(u128::from)
        .unwrap_or(DEFAULT_LATTICE_CAP);
    let method = match config.solver.method {
        SolverMethod::Auto if l == 2 => SolverMethod::Scan,
        SolverMethod::Auto if lattice_size(n, l) <= cap => SolverMethod::Enumerate,
        SolverMethod::Auto => SolverMethod::Iterate,
        m @ (SolverMethod::Scan | SolverMethod::Enumerate | SolverMethod::Iterate) => m,
        other => {
            return Err(Error::invalid(
                "solver.method",
                format!("{other:?} does not apply to finite populations"),
            ))
        }
    };
    let mut out = Solved::empty();
    let (fixed, name) = match method {
        SolverMethod::Scan => {
            let scan = scan_binary(&model, &pop)?;
            out.warnings.extend(scan.warnings);
            (scan.fixed_points, "scan")
        }
        SolverMethod::Enumerate => (enumerate_multiway(&model, &pop, cap)?, "enumerate"),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.population.rng_seed);
            let mut seeds: Vec<Vec<usize>> = (0..l)
                .map(|j| {
                    let mut c = vec![0; l];
                    c[j] = n;
                    c
                })
                .collect();
            seeds.extend((0..config.solver.seeds).map(|_| random_counts(n, l, &mut rng)));
            let runs =
                iterate_from_seeds(&model, &pop, &seeds, config.solver.max_iter.unwrap_or(1000))?;
            let cycles = runs.iter().filter(|r| r.cycle.is_some()).count();
            if cycles > 0 {
                out.warnings
                    .push(format!("{cycles} seeds ended in a cycle"));
            }
            let mut fixed: Vec<Vec<usize>> =
                runs.into_iter().filter_map(|r| r.fixed_point).collect();
            fixed.sort();
            fixed.dedup();
            (fixed, "iterate")
        }
    };
    if fixed.is_empty() {
        return Ok(out);
    }
    let selection = select_social(&model, &pop, &fixed)?;
    for rep in selection.reports {
        let image = eval_f(&model, &pop, &rep.counts)?;
        let residual = image
            .iter()
            .zip(&rep.counts)
            .map(|(a, b)| a.abs_diff(*b))
            .max()
            .unwrap_or(0) as f64;
        out.warnings.extend(rep.warnings.iter().cloned());
        out.equilibria.push(EquilibriumSummary {
            split: rep.split.clone(),
            counts: Some(rep.counts.clone()),
            residual,
            mean_map_residual: rep.mean_map_residual,
            social_cost: rep.social_cost,
            method: name.to_string(),
            iterations: 0,
            masses: None,
        });
        out.paths.push(rep.path);
    }
    out.selected = Some(selection.selected);
    Ok(out)
}

fn dedup_splits(mut found: Vec<SplitSolution>) -> Vec<SplitSolution> {
    found.sort_by(|a, b| b.split[0].total_cmp(&a.split[0]));
    let mut out: Vec<SplitSolution> = Vec::new();
    for s in found {
        let seen = out.iter().any(|o| {
            o.split
                .iter()
                .zip(&s.split)
                .all(|(x, y)| (x - y).abs() <= DEDUP_TOLERANCE)
        });
        if !seen {
            out.push(s);
        }
    }
    out
}

fn solve_stoch(config: &RunConfig) -> Result<Solved> {
    let problem = config.problem()?;
    let population = config.population()?;
    let st = StochasticModel::new(UniformModel::new(problem.clone())?, population.clone())?;
    let l = st.num_destinations();
    let tol = config.solver.tol.unwrap_or(1e-8);
    let max_iter = config.solver.max_iter.unwrap_or(10_000);
    let seed = config.population.rng_seed;
    let mut out = Solved::empty();
    out.warnings.extend(population.warnings());
    let binary = |what: &str| {
        if l == 2 {
            Ok(())
        } else {
            Err(Error::invalid(
                "solver.method",
                format!("{what} needs exactly two destinations"),
            ))
        }
    };
    let attempts: Vec<Result<SplitSolution>> = match config.solver.method {
        SolverMethod::Auto => discover_equilibria(
            &st,
            &DiscoveryOptions {
                tol,
                max_iter,
                broyden_starts: config.solver.seeds,
                seed,
            },
        )
        .attempts
        .into_iter()
        .map(|a| a.map_err(Error::NotConverged))
        .collect(),
        SolverMethod::Monotone => {
            binary("monotone iteration")?;
            [1.0, 0.5, 0.0]
                .iter()
                .map(|&a| solve_binary_monotone(&st, a, tol, max_iter))
                .collect()
        }
        SolverMethod::Bisection => {
            binary("bisection")?;
            vec![solve_binary_bisection(&st, tol)]
        }
        SolverMethod::Broyden => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..config.solver.seeds.max(1))
                .map(|_| solve_broyden(&st, &random_split(l, &mut rng), tol, max_iter))
                .collect()
        }
        other => {
            return Err(Error::invalid(
                "solver.method",
                format!("{other:?} does not apply to continuum populations"),
            ))
        }
    };
    let mut found = Vec::new();
    for a in attempts {
        match a {
            Ok(s) if s.converged && s.residual < tol => found.push(s),
            Ok(s) => out.warnings.push(format!(
                "{} run stopped at residual {:.3e}",
                s.method.name(),
                s.residual
            )),
            Err(e) => out.warnings.push(e.to_string()),
        }
    }
    let found = dedup_splits(found);
    let states = match population.distribution() {
        Distribution::Empirical(p) => p.states().to_vec(),
        _ => population
            .sample_states(population.mc_samples.min(SOCIAL_SAMPLES), seed)?
            .states()
            .to_vec(),
    };
    for s in found {
        let path = st.candidate_path(&s.split);
        let (induced, _) = st.mean_map(&path)?;
        out.warnings.extend(s.warnings.iter().cloned());
        out.equilibria.push(EquilibriumSummary {
            split: s.split.clone(),
            counts: None,
            residual: s.residual,
            mean_map_residual: induced.sup_distance(&path)?,
            social_cost: social_cost_uniform(&problem, &states, &path)?,
            method: s.method.name().to_string(),
            iterations: s.iterations,
            masses: None,
        });
        out.paths.push(path);
    }
    if l == 2 {
        if let Distribution::Gaussian(g) = population.distribution() {
            let u = gaussian_uniqueness(&st.model, g.mean(), g.cov())?;
            out.uniqueness = Some(UniquenessSummary {
                projected_variance: u.projected_variance,
                slope: u.slope,
                variance_condition: u.variance_condition,
                lower: u.lower,
                upper: u.upper,
                mean_coordinate: u.mean_coordinate,
                unique: u.unique,
            });
        }
    }
    out.selected = select(&out.equilibria);
    Ok(out)
}

fn hetero_model(config: &RunConfig) -> Result<HeteroModel> {
    HeteroModel::new(config.hetero_problem()?, config.population()?)
}

fn social_cost_hetero(model: &HeteroModel, path: &Trajectory) -> Result<f64> {
    let p = &model.problem;
    let mut total = 0.0;
    for (agent, w) in p.types.types().iter().zip(p.types.weights()) {
        let sol = solve_type_tracking(p, agent, Some(path))?;
        let costs: Vec<f64> = model
            .samples()
            .par_iter()
            .map(|x| {
                (0..p.num_destinations())
                    .map(|j| sol.optimal_cost(j, x))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        total += w * costs.iter().sum::<f64>() / costs.len() as f64;
    }
    Ok(total)
}

fn solve_hetero(config: &RunConfig) -> Result<Solved> {
    match config.solver.method {
        SolverMethod::Auto | SolverMethod::Picard => {}
        other => {
            return Err(Error::invalid(
                "solver.method",
                format!("{other:?} does not apply to mixed populations"),
            ))
        }
    }
    let model = hetero_model(config)?;
    let mut out = Solved::empty();
    out.warnings.extend(model.population.warnings());
    let f = feasibility_bound(&model)?;
    if !f.satisfied {
        out.warnings.push(format!(
            "feasibility bound {:.3e} is not below π/2; convergence of the iteration is not guaranteed",
            f.value
        ));
    }
    out.feasibility = Some(FeasibilitySummary {
        k1: f.k1,
        k2: f.k2,
        k3: f.k3,
        value: f.value,
        satisfied: f.satisfied,
    });
    let opts = PicardOptions {
        damping: config.solver.damping.unwrap_or(0.5),
        tol: config.solver.tol.unwrap_or(1e-3),
        max_iter: config.solver.max_iter.unwrap_or(200),
    };
    let starts = default_starts(&model)?;
    let weights = model.problem.types.weights().to_vec();
    for o in picard_multistart(&model, &starts, &opts)? {
        if !o.converged {
            out.warnings
                .push(format!("Picard run stopped at residual {:.3e}", o.residual));
            continue;
        }
        let l = model.problem.num_destinations();
        let split: Vec<f64> = (0..l)
            .map(|j| weights.iter().zip(&o.masses).map(|(w, m)| w * m[j]).sum())
            .collect();
        out.equilibria.push(EquilibriumSummary {
            split,
            counts: None,
            residual: o.residual,
            mean_map_residual: o.residual,
            social_cost: social_cost_hetero(&model, &o.path)?,
            method: "picard".to_string(),
            iterations: o.iterations,
            masses: Some(o.masses.clone()),
        });
        out.paths.push(o.path);
    }
    out.selected = select(&out.equilibria);
    Ok(out)
}

fn solve(config: &RunConfig, mode: Mode) -> Result<Solved> {
    let mut out = match mode {
        Mode::Det => solve_det(config),
        Mode::Stoch => solve_stoch(config),
        Mode::Hetero => solve_hetero(config),
    }?;
    if !config.dynamics()?.is_controllable() {
        out.warnings
            .push("(A, B) is not controllable; basins may be degenerate".to_string());
    }
    Ok(out)
}

/// Equilibria of the config under `mode`. An empty list is a valid outcome.
pub fn cmd_equilibria(config: &RunConfig, mode: Mode) -> Result<RunReport> {
    let mut report = RunReport::new("equilibria", mode, config);
    let solved = solve(config, mode)?;
    if solved.equilibria.is_empty() {
        report.warnings.push("no equilibrium found".to_string());
    }
    solved.fill(&mut report);
    Ok(report)
}

pub fn cmd_hetero(config: &RunConfig) -> Result<RunReport> {
    let mut report = cmd_equilibria(config, Mode::Hetero)?;
    report.command = "hetero".to_string();
    Ok(report)
}

/// Simulation output: the report plus the two CSV tables.
#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub report: RunReport,
    /// `t, agent_id, destination, x_1.., u_1..`, agent-major.
    pub trajectories: String,
    /// `t, mean_1.., tracked_1..`.
    pub mean: String,
}

fn trajectory_csv(sim: &SimulationResult, n: usize, m: usize) -> Result<String> {
    let mut header = vec![
        "t".to_string(),
        "agent_id".to_string(),
        "destination".to_string(),
    ];
    header.extend((1..=n).map(|i| format!("x_{i}")));
    header.extend((1..=m).map(|i| format!("u_{i}")));
    let grid = *sim.mean.grid();
    let times = grid.nodes();
    let rows = sim.agents.iter().enumerate().flat_map(|(id, a)| {
        let path = a.path.as_ref().expect("simulation keeps paths");
        let control = a.control.as_ref().expect("simulation keeps paths");
        times.iter().enumerate().map(move |(k, &t)| {
            let mut row = vec![float(t), id.to_string(), a.destination.to_string()];
            row.extend(path.node(k).iter().map(|&x| float(x)));
            row.extend(control.node(k).iter().map(|&u| float(u)));
            row
        })
    });
    to_csv(&header, rows)
}

fn mean_csv(sim: &SimulationResult, tracked: &Trajectory) -> Result<String> {
    let n = tracked.dim();
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("mean_{i}")));
    header.extend((1..=n).map(|i| format!("tracked_{i}")));
    let grid = *tracked.grid();
    let rows = (0..=grid.steps()).map(|k| {
        let mut row = vec![float(grid.node(k))];
        row.extend(sim.mean.node(k).iter().map(|&x| float(x)));
        row.extend(tracked.node(k).iter().map(|&x| float(x)));
        row
    });
    to_csv(&header, rows)
}

/// Rolls out a finite population against an equilibrium path. With `lambda`
/// the path is the candidate for that split instead of a solved equilibrium.
pub fn cmd_simulate(
    config: &RunConfig,
    mode: Mode,
    lambda: Option<&[f64]>,
    agents: Option<usize>,
) -> Result<SimulationOutput> {
    let mut report = RunReport::new("simulate", mode, config);
    let seed = config.population.rng_seed;
    let (problem, people, path): (HeteroProblem, Vec<Agent>, Trajectory) = match (mode, lambda) {
        (Mode::Det, Some(_)) => {
            return Err(Error::invalid(
                "lambda",
                "fixed splits apply to continuum runs only",
            ))
        }
        (Mode::Det, None) => {
            let solved = solve_det(config)?;
            let path = solved.selected_path()?.clone();
            solved.fill(&mut report);
            if agents.is_some() {
                return Err(Error::invalid(
                    "agents",
                    "finite-population runs simulate the configured population",
                ));
            }
            let pop = config.finite_population(None)?;
            (
                HeteroProblem::from_uniform(&config.problem()?),
                uniform_agents(&pop),
                path,
            )
        }
        (Mode::Stoch, Some(split)) => {
            let st =
                StochasticModel::new(UniformModel::new(config.problem()?)?, config.population()?)?;
            if split.len() != st.num_destinations() {
                return Err(Error::invalid("lambda", "needs one share per destination"));
            }
            if split.iter().any(|s| !(0.0..=1.0).contains(s))
                || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9
            {
                return Err(Error::invalid(
                    "lambda",
                    "shares must lie in [0, 1] and sum to 1",
                ));
            }
            let path = st.candidate_path(split);
            report.path = Some(PathSamples::of(&path));
            let hp = HeteroProblem::from_uniform(&config.problem()?);
            let n = agents.or(config.population.size).unwrap_or(DEFAULT_AGENTS);
            let people = draw_agents(&hp, &config.population()?, n, seed)?;
            (hp, people, path)
        }
        (Mode::Hetero, Some(_)) => {
            return Err(Error::invalid(
                "lambda",
                "fixed splits do not determine a mixed-population path",
            ))
        }
        (_, None) => {
            let solved = solve(config, mode)?;
            let path = solved.selected_path()?.clone();
            solved.fill(&mut report);
            let hp = config.hetero_problem()?;
            let n = agents.or(config.population.size).unwrap_or(DEFAULT_AGENTS);
            let people = draw_agents(&hp, &config.population()?, n, seed)?;
            (hp, people, path)
        }
    };
    let sim = simulate_population(&problem, &people, &path, true)?;
    let diverged = sim.agents.iter().filter(|a| a.diverged).count();
    if diverged > 0 {
        report.warnings.push(format!("{diverged} agents diverged"));
    }
    report.simulation = Some(SimulationSummary {
        agents: sim.len(),
        counts: sim.counts.clone(),
        gap: sim.gap,
        mean_cost: sim.total_cost() / sim.len() as f64,
        diverged,
    });
    let trajectories = trajectory_csv(
        &sim,
        problem.state_dim(),
        problem.types.types()[0].dynamics.control_dim(),
    )?;
    let mean = mean_csv(&sim, &path)?;
    Ok(SimulationOutput {
        report,
        trajectories,
        mean,
    })
}

/// One equilibrium run per parameter value; failures are recorded and the
/// sweep moves on.
pub fn cmd_sweep(
    config: &RunConfig,
    mode: Mode,
    param: SweepParam,
    values: &[f64],
) -> Result<RunReport> {
    if values.is_empty() {
        return Err(Error::invalid("values", "at least one value is required"));
    }
    let mut report = RunReport::new("sweep", mode, config);
    let mut entries = Vec::with_capacity(values.len());
    for &value in values {
        let run = || -> Result<Solved> {
            let c = config.with_parameter(param, value);
            c.validate()?;
            solve(&c, mode)
        };
        let entry = match run() {
            Ok(s) => {
                let selected = s.selected;
                let share =
                    selected.map(|i| s.equilibria[i].split.iter().copied().fold(0.0, f64::max));
                let populated =
                    selected.map(|i| s.equilibria[i].split.iter().filter(|&&x| x > 0.01).count());
                SweepEntry {
                    value,
                    equilibria: s.equilibria,
                    selected,
                    majority_share: share,
                    populated,
                    error: None,
                }
            }
            Err(e) => SweepEntry {
                value,
                equilibria: Vec::new(),
                selected: None,
                majority_share: None,
                populated: None,
                error: Some(e.to_string()),
            },
        };
        entries.push(entry);
    }
    report.sweep = Some(entries);
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct NashOutput {
    pub report: RunReport,
    /// `N, seed, epsilon, min_gain, gap`.
    pub table: String,
}

/// ε_N over population sizes, with seeds `rng_seed, rng_seed + 1, …`.
pub fn cmd_nash(config: &RunConfig, mode: Mode, sizes: &[usize]) -> Result<NashOutput> {
    if mode == Mode::Det {
        return Err(Error::invalid(
            "mode",
            "ε-Nash runs need a continuum equilibrium (stoch or hetero)",
        ));
    }
    let mut report = RunReport::new("nash", mode, config);
    let solved = solve(config, mode)?;
    let path = solved.selected_path()?.clone();
    solved.fill(&mut report);
    let problem = config.hetero_problem()?;
    let base = config.population.rng_seed;
    let seeds: Vec<u64> = (0..config.solver.seeds.max(1) as u64)
        .map(|i| base.wrapping_add(i))
        .collect();
    let reports = epsilon_nash(&problem, &config.population()?, &path, sizes, &seeds)?;
    let rows: Vec<NashRow> = reports
        .iter()
        .map(|r| NashRow {
            size: r.size,
            seed: r.seed,
            epsilon: r.epsilon,
            min_gain: r.min_gain,
            gap: r.gap,
        })
        .collect();
    let medians = median_by_size(&reports, sizes)
        .into_iter()
        .zip(sizes)
        .map(|(median, &size)| NashMedian { size, median })
        .collect();
    let header: Vec<String> = ["N", "seed", "epsilon", "min_gain", "gap"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let table = to_csv(
        &header,
        rows.iter().map(|r| {
            vec![
                r.size.to_string(),
                r.seed.to_string(),
                float(r.epsilon),
                float(r.min_gain),
                float(r.gap),
            ]
        }),
    )?;
    report.nash = Some(NashSummary { rows, medians });
    Ok(NashOutput { report, table })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Equilibria,
    Simulate,
    Sweep,
    Nash,
    Hetero,
}

/// A parsed command line.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: Command,
    pub config: PathBuf,
    pub mode: Option<Mode>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub sizes: Option<Vec<usize>>,
    pub param: Option<SweepParam>,
    pub values: Option<Vec<f64>>,
    pub lambda: Option<Vec<f64>>,
    pub agents: Option<usize>,
}

impl Invocation {
    pub fn new(command: Command, config: impl Into<PathBuf>) -> Self {
        Self {
            command,
            config: config.into(),
            mode: None,
            out: None,
            seed: None,
            sizes: None,
            param: None,
            values: None,
            lambda: None,
            agents: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    NoEquilibrium,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Success => 0,
            Status::NoEquilibrium => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub status: Status,
    /// The JSON report, for printing when no output path was given.
    pub json: String,
    pub written: Vec<PathBuf>,
}

pub fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::invalid("config", format!("cannot read {}: {e}", path.display())))?;
    let mut config = parse_config(&text)?;
    if let Some(s) = seed {
        config.population.rng_seed = s;
    }
    Ok(config)
}

fn sibling(path: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}

fn write(path: &Path, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(path, text)?;
    written.push(path.to_path_buf());
    Ok(())
}

/// Runs a command and writes its files. Errors map to exit code 1 and a
/// missing equilibrium to exit code 2.
pub fn run(inv: &Invocation) -> Result<Outcome> {
    let config = load_config(&inv.config, inv.seed)?;
    let mode = inv.mode.unwrap_or(if inv.command == Command::Hetero {
        Mode::Hetero
    } else {
        Mode::Stoch
    });
    let mut written = Vec::new();
    let (report, extra): (RunReport, Vec<(PathBuf, String)>) = match inv.command {
        Command::Equilibria => (cmd_equilibria(&config, mode)?, Vec::new()),
        Command::Hetero => (cmd_hetero(&config)?, Vec::new()),
        Command::Sweep => {
            let param = inv
                .param
                .ok_or_else(|| Error::invalid("param", "a sweep needs --param"))?;
            let values = inv
                .values
                .as_deref()
                .ok_or_else(|| Error::invalid("values", "a sweep needs --values"))?;
            (cmd_sweep(&config, mode, param, values)?, Vec::new())
        }
        Command::Simulate => {
            let out = inv
                .out
                .as_ref()
                .ok_or_else(|| Error::invalid("out", "simulate needs an output CSV path"))?;
            let sim = cmd_simulate(&config, mode, inv.lambda.as_deref(), inv.agents)?;
            let files = vec![
                (out.clone(), sim.trajectories),
                (sibling(out, "_mean", "csv"), sim.mean),
            ];
            (sim.report, files)
        }
        Command::Nash => {
            let sizes = inv.sizes.clone().unwrap_or_else(|| DEFAULT_SIZES.to_vec());
            let nash = cmd_nash(&config, mode, &sizes)?;
            let files = inv
                .out
                .as_ref()
                .map(|o| vec![(sibling(o, "", "csv"), nash.table)])
                .unwrap_or_default();
            (nash.report, files)
        }
    };
    let json = to_json(&report)?;
    for (path, text) in extra {
        write(&path, &text, &mut written)?;
    }
    if let Some(out) = &inv.out {
        // Never let the report clobber a table written to the same path.
        let target = if inv.command == Command::Simulate || written.contains(out) {
            sibling(out, "", "json")
        } else {
            out.clone()
        };
        write(&target, &json, &mut written)?;
    }
    let status = if report.equilibria.is_empty()
        && matches!(inv.command, Command::Equilibria | Command::Hetero)
    {
        Status::NoEquilibrium
    } else {
        Status::Success
    };
    Ok(Outcome {
        status,
        json,
        written,
    })
}
