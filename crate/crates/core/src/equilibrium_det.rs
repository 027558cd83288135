//! Equilibria of a finite population with known initial states.
//!
//! An equilibrium is a split of the `N` agents over the destinations that
//! reproduces itself: build the candidate mean path from the split, let every
//! agent pick its cheapest destination against that path, and count again.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::basins::{AffineBasins, Classification};
use crate::error::{Error, Result};
use crate::model::Problem;
use crate::numerics::Trajectory;
use crate::tracking::{
    fixed_point_ingredients, geometry_integrals, solve_tracking, FixedPointIngredients,
};

pub const DEFAULT_LATTICE_CAP: u128 = 500_000;

/// Relative tolerance under which two social costs count as tied.
pub const SOCIAL_TIE_TOLERANCE: f64 = 1e-9;

/// Initial states of a finite population.
#[derive(Debug, Clone)]
pub struct PopulationStates {
    states: Vec<DVector<f64>>,
    mean: DVector<f64>,
}

impl PopulationStates {
    pub fn new(states: Vec<DVector<f64>>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::invalid(
                "population.states",
                "at least one agent is required",
            ));
        }
        let n = states[0].len();
        for (i, x) in states.iter().enumerate() {
            if x.len() != n || n == 0 {
                return Err(Error::invalid(
                    format!("population.states[{i}]"),
                    "dimension mismatch",
                ));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(
                    format!("population.states[{i}]"),
                    "entries must be finite",
                ));
            }
        }
        // Summing in a canonical order keeps the mean independent of input order.
        let mut order: Vec<usize> = (0..states.len()).collect();
        order.sort_by(|&a, &b| {
            states[a]
                .iter()
                .zip(states[b].iter())
                .map(|(u, v)| u.total_cmp(v))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut mean = DVector::zeros(n);
        for &i in &order {
            mean += &states[i];
        }
        mean /= states.len() as f64;
        Ok(Self { states, mean })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }
}

/// Basin boundaries as affine functions of the initial mean and the weighted
/// destination: basin `j` under split λ is
/// `n_jk · x ≤ c_jk + a_jk · x̄0 + b_jk · p_λ` for all `k ≠ j`.
#[derive(Debug, Clone)]
pub struct BasinGeometry {
    pub normals: Vec<Vec<DVector<f64>>>,
    pub offsets: Vec<Vec<f64>>,
    pub mean_coupling: Vec<Vec<DVector<f64>>>,
    pub target_coupling: Vec<Vec<DVector<f64>>>,
}

pub fn basin_geometry(problem: &Problem) -> Result<BasinGeometry> {
    let gi = geometry_integrals(problem)?;
    let cost = &problem.cost;
    let (q, r, m) = (
        cost.tracking_weight,
        cost.control_weight,
        cost.terminal_weight,
    );
    let p = &cost.destinations;
    let l = p.len();
    let n = problem.state_dim();
    let zero = DVector::zeros(n);
    let mut normals = vec![vec![zero.clone(); l]; l];
    let mut offsets = vec![vec![0.0; l]; l];
    let mut mean_coupling = vec![vec![zero.clone(); l]; l];
    let mut target_coupling = vec![vec![zero; l]; l];
    let coupling = m * q / r;
    for j in 0..l {
        for k in 0..l {
            if j == k {
                continue;
            }
            normals[j][k] = &gi.transition_to_horizon * (&p[k] - &p[j]) * m;
            let quad = |v: &DVector<f64>| v.dot(&(&gi.gramian * v));
            offsets[j][k] = 0.5 * m * (p[k].norm_squared() - p[j].norm_squared())
                - m * m / (2.0 * r) * (quad(&p[k]) - quad(&p[j]));
            let d = &p[j] - &p[k];
            mean_coupling[j][k] = gi.mean_response.transpose() * &d * coupling;
            target_coupling[j][k] = gi.destination_response.transpose() * &d * coupling;
        }
    }
    Ok(BasinGeometry {
        normals,
        offsets,
        mean_coupling,
        target_coupling,
    })
}

impl BasinGeometry {
    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    pub fn offsets_for(&self, initial_mean: &DVector<f64>, target: &DVector<f64>) -> Vec<Vec<f64>> {
        let l = self.len();
        (0..l)
            .map(|j| {
                (0..l)
                    .map(|k| {
                        if j == k {
                            0.0
                        } else {
                            self.offsets[j][k]
                                + self.mean_coupling[j][k].dot(initial_mean)
                                + self.target_coupling[j][k].dot(target)
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn instantiate(&self, initial_mean: &DVector<f64>, target: &DVector<f64>) -> AffineBasins {
        AffineBasins::new(self.normals.clone(), self.offsets_for(initial_mean, target))
            .expect("square tables")
    }

    /// `ξ_12 · (p_1 - p_2)`, the slope of the binary threshold in the split.
    pub fn binary_slope(&self, destinations: &[DVector<f64>]) -> f64 {
        self.target_coupling[0][1].dot(&(&destinations[0] - &destinations[1]))
    }
}

/// Everything about a problem that does not depend on the population.
#[derive(Debug, Clone)]
pub struct UniformModel {
    pub problem: Problem,
    pub ingredients: FixedPointIngredients,
    pub geometry: BasinGeometry,
}

impl UniformModel {
    pub fn new(problem: Problem) -> Result<Self> {
        let ingredients = fixed_point_ingredients(&problem)?;
        let geometry = basin_geometry(&problem)?;
        Ok(Self {
            problem,
            ingredients,
            geometry,
        })
    }

    pub fn num_destinations(&self) -> usize {
        self.problem.num_destinations()
    }

    pub fn destinations(&self) -> &[DVector<f64>] {
        &self.problem.cost.destinations
    }

    pub fn candidate_path(&self, initial_mean: &DVector<f64>, split: &[f64]) -> Trajectory {
        self.ingredients
            .path(initial_mean, &self.problem.cost.weighted_destination(split))
    }

    pub fn basins(&self, initial_mean: &DVector<f64>, split: &[f64]) -> AffineBasins {
        self.geometry
            .instantiate(initial_mean, &self.problem.cost.weighted_destination(split))
    }

    /// `ξ_12 · (p_1 - p_2)` for two destinations.
    pub fn binary_slope(&self) -> f64 {
        self.geometry.binary_slope(self.destinations())
    }
}

pub fn counts_to_split(counts: &[usize]) -> Vec<f64> {
    let n: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / n as f64).collect()
}

fn check_counts(model: &UniformModel, pop: &PopulationStates, counts: &[usize]) -> Result<()> {
    if counts.len() != model.num_destinations() {
        return Err(Error::invalid(
            "counts",
            format!(
                "expected {} entries, got {}",
                model.num_destinations(),
                counts.len()
            ),
        ));
    }
    if counts.iter().sum::<usize>() != pop.len() {
        return Err(Error::invalid(
            "counts",
            format!("entries must sum to {}", pop.len()),
        ));
    }
    if pop.dim() != model.problem.state_dim() {
        return Err(Error::invalid("population.states", "dimension mismatch"));
    }
    Ok(())
}

pub fn classify_initial_state(basins: &AffineBasins, x0: &DVector<f64>) -> Classification {
    basins.classify(x0)
}

/// Agent projections onto the basin normals, reused across splits.
struct Projected {
    z: Vec<Vec<f64>>,
}

impl Projected {
    fn new(model: &UniformModel, pop: &PopulationStates) -> Self {
        let template = model.basins(pop.mean(), &vec![0.0; model.num_destinations()]);
        Self {
            z: pop.states().iter().map(|x| template.project(x)).collect(),
        }
    }

    fn counts(&self, basins: &AffineBasins) -> (Vec<usize>, usize) {
        let mut counts = vec![0usize; basins.len()];
        let mut fallback = 0;
        for z in &self.z {
            let c = basins.classify_projected(z);
            counts[c.destination] += 1;
            fallback += c.fallback as usize;
        }
        (counts, fallback)
    }
}

fn map_counts(
    model: &UniformModel,
    pop: &PopulationStates,
    proj: &Projected,
    counts: &[usize],
) -> Vec<usize> {
    let basins = model.basins(pop.mean(), &counts_to_split(counts));
    proj.counts(&basins).0
}

/// The best-response count map `F(λ)`.
pub fn eval_f(
    model: &UniformModel,
    pop: &PopulationStates,
    counts: &[usize],
) -> Result<Vec<usize>> {
    check_counts(model, pop, counts)?;
    let proj = Projected::new(model, pop);
    Ok(map_counts(model, pop, &proj, counts))
}

#[derive(Debug, Clone)]
pub struct ScanResult {
    /// Fixed points as counts, in increasing order of the first count.
    pub fixed_points: Vec<Vec<usize>>,
    /// `ξ_12 · (p_1 - p_2)`.
    pub slope: f64,
    pub warnings: Vec<String>,
}

/// All fixed points for two destinations from one sort of the agents.
///
/// With `z` the sorted projections and `thr(α) = c + (α/N) s`, the split with
/// `α` agents at the first destination is a fixed point exactly when
/// `z_α ≤ thr(α) < z_{α+1}`.
pub fn scan_binary(model: &UniformModel, pop: &PopulationStates) -> Result<ScanResult> {
    if model.num_destinations() != 2 {
        return Err(Error::invalid(
            "destinations",
            "the binary scan needs exactly two destinations",
        ));
    }
    if pop.dim() != model.problem.state_dim() {
        return Err(Error::invalid("population.states", "dimension mismatch"));
    }
    let g = &model.geometry;
    let p = model.destinations();
    let n = pop.len();
    let mut z: Vec<f64> = pop
        .states()
        .iter()
        .map(|x| g.normals[0][1].dot(x))
        .collect();
    z.sort_by(f64::total_cmp);
    let c = g.offsets[0][1]
        + g.mean_coupling[0][1].dot(pop.mean())
        + g.target_coupling[0][1].dot(&p[1]);
    let s = model.binary_slope();
    let mut fixed_points = Vec::new();
    for alpha in 0..=n {
        let thr = c + (alpha as f64 / n as f64) * s;
        let inside = z.partition_point(|&v| v <= thr);
        if inside == alpha {
            fixed_points.push(vec![alpha, n - alpha]);
        }
    }
    let mut warnings = Vec::new();
    if s >= 0.0 && fixed_points.is_empty() {
        warnings
            .push("no fixed point found although the threshold slope is non-negative".to_string());
    }
    if s < 0.0 && fixed_points.len() > 1 {
        warnings.push(format!(
            "{} fixed points found although the threshold slope is negative",
            fixed_points.len()
        ));
    }
    Ok(ScanResult {
        fixed_points,
        slope: s,
        warnings,
    })
}

/// Number of splits of `n` agents over `l` destinations.
pub fn lattice_size(n: usize, l: usize) -> u128 {
    if l == 0 {
        return 0;
    }
    // C(n + l - 1, l - 1)
    let mut acc: u128 = 1;
    for i in 1..l as u128 {
        acc = acc * (n as u128 + i) / i;
    }
    acc
}

/// All splits of `n` over `l` slots in lexicographic order.
pub fn lattice(n: usize, l: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, l: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if l == 1 {
            prefix.push(n);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for c in 0..=n {
            prefix.push(c);
            rec(n - c, l - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if l > 0 {
        rec(n, l, &mut Vec::with_capacity(l), &mut out);
    }
    out
}

/// Every fixed point, by checking each split of the lattice.
pub fn enumerate_multiway(
    model: &UniformModel,
    pop: &PopulationStates,
    cap: u128,
) -> Result<Vec<Vec<usize>>> {
    let l = model.num_destinations();
    let size = lattice_size(pop.len(), l);
    if size > cap {
        return Err(Error::LatticeTooLarge { size, cap });
    }
    if pop.dim() != model.problem.state_dim() {
        return Err(Error::invalid("population.states", "dimension mismatch"));
    }
    let proj = Projected::new(model, pop);
    let points = lattice(pop.len(), l);
    Ok(points
        .into_par_iter()
        .filter(|c| map_counts(model, pop, &proj, c) == *c)
        .collect())
}

#[derive(Debug, Clone)]
pub struct IterationOutcome {
    pub seed: Vec<usize>,
    pub fixed_point: Option<Vec<usize>>,
    /// The repeating part of the orbit when the iteration cycles.
    pub cycle: Option<Vec<Vec<usize>>>,
    pub iterations: usize,
}

/// Iterates `λ ← F(λ)` from each seed until it repeats.
pub fn iterate_from_seeds(
    model: &UniformModel,
    pop: &PopulationStates,
    seeds: &[Vec<usize>],
    max_iter: usize,
) -> Result<Vec<IterationOutcome>> {
    let proj = Projected::new(model, pop);
    let mut out = Vec::new();
    for seed in seeds {
        check_counts(model, pop, seed)?;
        let mut orbit = vec![seed.clone()];
        let mut outcome = IterationOutcome {
            seed: seed.clone(),
            fixed_point: None,
            cycle: None,
            iterations: max_iter,
        };
        for it in 1..=max_iter {
            let next = map_counts(model, pop, &proj, orbit.last().expect("non-empty"));
            if let Some(pos) = orbit.iter().position(|c| *c == next) {
                outcome.iterations = it;
                if pos == orbit.len() - 1 {
                    outcome.fixed_point = Some(next);
                } else {
                    outcome.cycle = Some(orbit[pos..].to_vec());
                }
                break;
            }
            orbit.push(next);
        }
        out.push(outcome);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EquilibriumReport {
    pub counts: Vec<usize>,
    pub split: Vec<f64>,
    pub path: Trajectory,
    /// Destination chosen by each agent against `path`.
    pub assignment: Vec<usize>,
    /// Each agent's optimal cost against `path`.
    pub costs: Vec<f64>,
    pub social_cost: f64,
    /// Sup-norm gap between the candidate path and the mean it induces.
    pub mean_map_residual: f64,
    /// Agents whose cost-based choice differs from the basin geometry.
    pub assignment_mismatches: usize,
    pub warnings: Vec<String>,
}

pub fn equilibrium_report(
    model: &UniformModel,
    pop: &PopulationStates,
    counts: &[usize],
) -> Result<EquilibriumReport> {
    check_counts(model, pop, counts)?;
    let split = counts_to_split(counts);
    let path = model.candidate_path(pop.mean(), &split);
    let sol = solve_tracking(&model.problem, &path)?;
    let geometry = model.basins(pop.mean(), &split);
    let mut assignment = Vec::with_capacity(pop.len());
    let mut costs = Vec::with_capacity(pop.len());
    let mut mismatches = 0;
    let mut induced = vec![0usize; counts.len()];
    for x in pop.states() {
        let (k, c) = sol.best_destination(x);
        assignment.push(k);
        costs.push(c);
        induced[k] += 1;
        if geometry.classify(x).destination != k {
            mismatches += 1;
        }
    }
    let social_cost = costs.iter().sum::<f64>() / pop.len() as f64;
    let induced_mean = sol.mean_trajectory(pop.mean(), &counts_to_split(&induced));
    let mean_map_residual = induced_mean.sup_distance(&path)?;
    let mut warnings = sol.warnings();
    if mismatches > 0 {
        warnings.push(format!(
            "{mismatches} agents choose differently under the cost comparison and the basin geometry"
        ));
    }
    Ok(EquilibriumReport {
        counts: counts.to_vec(),
        split,
        path,
        assignment,
        costs,
        social_cost,
        mean_map_residual,
        assignment_mismatches: mismatches,
        warnings,
    })
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub reports: Vec<EquilibriumReport>,
    /// Index into `reports` of the lowest social cost (ties go to the
    /// lexicographically smallest split).
    pub selected: usize,
}

pub fn select_social(
    model: &UniformModel,
    pop: &PopulationStates,
    candidates: &[Vec<usize>],
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::NoEquilibrium);
    }
    let reports = candidates
        .iter()
        .map(|c| equilibrium_report(model, pop, c))
        .collect::<Result<Vec<_>>>()?;
    let mut selected = 0;
    for i in 1..reports.len() {
        let (a, b) = (reports[i].social_cost, reports[selected].social_cost);
        let tol = SOCIAL_TIE_TOLERANCE * a.abs().max(b.abs()).max(1.0);
        if a < b - tol || ((a - b).abs() <= tol && reports[i].counts < reports[selected].counts) {
            selected = i;
        }
    }
    Ok(Selection { reports, selected })
}

/// Mean path induced when every agent best-responds to `reference`, and the
/// resulting counts.
pub fn mean_map_counts(
    problem: &Problem,
    pop: &PopulationStates,
    reference: &Trajectory,
) -> Result<(Trajectory, Vec<usize>)> {
    let sol = solve_tracking(problem, reference)?;
    let basins = sol.basins();
    let mut counts = vec![0usize; problem.num_destinations()];
    for x in pop.states() {
        counts[basins.classify(x).destination] += 1;
    }
    Ok((
        sol.mean_trajectory(pop.mean(), &counts_to_split(&counts)),
        counts,
    ))
}
