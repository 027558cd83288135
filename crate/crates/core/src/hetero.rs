//! Populations mixing several agent types.
//!
//! A type has its own dynamics and its own terminal weight per destination,
//! so the Riccati solution depends on the destination and basins are bounded
//! by quadrics. No finite-dimensional reduction exists; the equilibrium is a
//! fixed point of the path-to-mean map, approached by damped iteration.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::basins::Classification;
use crate::equilibrium_det::UniformModel;
use crate::equilibrium_stoch::{
    discover_equilibria, DiscoveryOptions, Distribution, PopulationSpec, StochasticModel,
};
use crate::error::{Error, Result};
use crate::model::{CostSpec, Dynamics, Problem};
use crate::numerics::{SampledPath, TimeGrid, Trajectory};
use crate::tracking::{sweep, TrackingSolution, Weights};

const CHUNK: usize = 1024;

#[derive(Debug, Clone)]
pub struct AgentType {
    pub dynamics: Dynamics,
    /// Terminal weight for each destination; a small weight is an affinity.
    pub terminal_weights: Vec<f64>,
}

impl AgentType {
    pub fn new(dynamics: Dynamics, terminal_weights: Vec<f64>) -> Result<Self> {
        if terminal_weights.is_empty()
            || terminal_weights
                .iter()
                .any(|m| !(m.is_finite() && *m > 0.0))
        {
            return Err(Error::invalid(
                "hetero.types.M",
                "terminal weights must be positive",
            ));
        }
        Ok(Self {
            dynamics,
            terminal_weights,
        })
    }
}

/// Finite distribution over agent types.
#[derive(Debug, Clone)]
pub struct TypeDistribution {
    types: Vec<AgentType>,
    weights: Vec<f64>,
}

impl TypeDistribution {
    pub fn new(entries: Vec<(AgentType, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid(
                "hetero.types",
                "at least one type is required",
            ));
        }
        let n = entries[0].0.dynamics.state_dim();
        let l = entries[0].0.terminal_weights.len();
        for (i, (t, w)) in entries.iter().enumerate() {
            if !(w.is_finite() && *w > 0.0) {
                return Err(Error::invalid(
                    format!("hetero.types[{i}].weight"),
                    "must be positive",
                ));
            }
            if t.dynamics.state_dim() != n || t.terminal_weights.len() != l {
                return Err(Error::invalid(
                    format!("hetero.types[{i}]"),
                    "dimension mismatch",
                ));
            }
        }
        let total: f64 = entries.iter().map(|e| e.1).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("hetero.types", "weights must sum to 1"));
        }
        let (types, weights) = entries.into_iter().unzip();
        Ok(Self { types, weights })
    }

    pub fn single(t: AgentType) -> Self {
        Self {
            types: vec![t],
            weights: vec![1.0],
        }
    }

    pub fn types(&self) -> &[AgentType] {
        &self.types
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }
}

/// Shared cost data plus the type distribution.
#[derive(Debug, Clone)]
pub struct HeteroProblem {
    pub types: TypeDistribution,
    pub tracking_weight: f64,
    pub control_weight: f64,
    pub destinations: Vec<DVector<f64>>,
    pub grid: TimeGrid,
}

impl HeteroProblem {
    pub fn new(
        types: TypeDistribution,
        tracking_weight: f64,
        control_weight: f64,
        destinations: Vec<DVector<f64>>,
        grid: TimeGrid,
    ) -> Result<Self> {
        // Reuse the uniform validation with a placeholder terminal weight.
        CostSpec::new(
            tracking_weight,
            control_weight,
            1.0,
            grid.horizon(),
            destinations.clone(),
        )?;
        let n = types.types[0].dynamics.state_dim();
        if destinations[0].len() != n {
            return Err(Error::invalid(
                "destinations",
                "dimension differs from the dynamics",
            ));
        }
        if types.types[0].terminal_weights.len() != destinations.len() {
            return Err(Error::invalid(
                "hetero.types.M",
                "one terminal weight per destination is required",
            ));
        }
        Ok(Self {
            types,
            tracking_weight,
            control_weight,
            destinations,
            grid,
        })
    }

    /// The same problem with a single type.
    pub fn from_uniform(problem: &Problem) -> Self {
        let l = problem.num_destinations();
        let t = AgentType {
            dynamics: problem.dynamics.clone(),
            terminal_weights: vec![problem.cost.terminal_weight; l],
        };
        Self {
            types: TypeDistribution::single(t),
            tracking_weight: problem.cost.tracking_weight,
            control_weight: problem.cost.control_weight,
            destinations: problem.cost.destinations.clone(),
            grid: problem.grid,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.destinations[0].len()
    }

    pub fn num_destinations(&self) -> usize {
        self.destinations.len()
    }

    pub fn horizon(&self) -> f64 {
        self.grid.horizon()
    }

    /// Uniform problem for type `i` with terminal weight `m` for all destinations.
    pub fn uniform_problem(&self, i: usize, m: f64) -> Result<Problem> {
        let cost = CostSpec::new(
            self.tracking_weight,
            self.control_weight,
            m,
            self.horizon(),
            self.destinations.clone(),
        )?;
        Problem::new(
            self.types.types[i].dynamics.clone(),
            cost,
            self.grid.steps(),
        )
    }
}

/// One tracking solve per destination for a single type.
#[derive(Debug, Clone)]
pub struct TypeSolution {
    pub per_destination: Vec<TrackingSolution>,
}

impl TypeSolution {
    pub fn optimal_cost(&self, j: usize, x0: &DVector<f64>) -> f64 {
        self.per_destination[j].optimal_cost(0, x0)
    }

    pub fn basins(&self) -> QuadricBasins {
        let l = self.per_destination.len();
        let n = self.per_destination[0].dynamics().state_dim();
        let mut quad = vec![vec![DMatrix::zeros(n, n); l]; l];
        let mut lin = vec![vec![DVector::zeros(n); l]; l];
        let mut cst = vec![vec![0.0; l]; l];
        for j in 0..l {
            for k in 0..l {
                if j != k {
                    let (a, b) = (&self.per_destination[j], &self.per_destination[k]);
                    quad[j][k] = (a.quadratic.first() - b.quadratic.first()) * 0.5;
                    lin[j][k] = a.linear[0].first() - b.linear[0].first();
                    cst[j][k] = a.constant[0].first() - b.constant[0].first();
                }
            }
        }
        QuadricBasins { quad, lin, cst }
    }
}

pub fn solve_type_tracking(
    problem: &HeteroProblem,
    agent: &AgentType,
    reference: Option<&Trajectory>,
) -> Result<TypeSolution> {
    let per_destination = problem
        .destinations
        .iter()
        .zip(&agent.terminal_weights)
        .enumerate()
        .map(|(j, (p, &m))| {
            let w = Weights {
                tracking: problem.tracking_weight,
                control: problem.control_weight,
                terminal: m,
            };
            sweep(
                &agent.dynamics,
                w,
                std::slice::from_ref(p),
                reference,
                &problem.grid,
            )
            .map_err(|e| Error::invalid(format!("destination {j}"), e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TypeSolution { per_destination })
}

/// Basin `j` is `{x : xᵀ Q_jk x + b_jkᵀ x + c_jk ≤ 0 for all k}`, the
/// difference of the optimal costs towards `j` and `k`.
#[derive(Debug, Clone)]
pub struct QuadricBasins {
    pub quad: Vec<Vec<DMatrix<f64>>>,
    pub lin: Vec<Vec<DVector<f64>>>,
    pub cst: Vec<Vec<f64>>,
}

impl QuadricBasins {
    pub fn len(&self) -> usize {
        self.quad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quad.is_empty()
    }

    fn gap(&self, j: usize, k: usize, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.quad[j][k] * x)) + self.lin[j][k].dot(x) + self.cst[j][k]
    }

    pub fn classify(&self, x: &DVector<f64>) -> Classification {
        let l = self.len();
        let worst = |j: usize| {
            (0..l)
                .filter(|&k| k != j)
                .map(|k| self.gap(j, k, x))
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let mut best = (0, f64::INFINITY);
        for j in 0..l {
            let w = worst(j);
            if w <= 0.0 || l == 1 {
                return Classification {
                    destination: j,
                    fallback: false,
                };
            }
            if w < best.1 {
                best = (j, w);
            }
        }
        Classification {
            destination: best.0,
            fallback: true,
        }
    }
}

/// Frozen initial-state sample shared by every evaluation of the mean map.
#[derive(Debug, Clone)]
pub struct HeteroModel {
    pub problem: HeteroProblem,
    pub population: PopulationSpec,
    samples: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct MeanMapOutput {
    pub mean: Trajectory,
    /// `masses[θ][j]`: share of type θ heading to destination `j`.
    pub masses: Vec<Vec<f64>>,
    pub fallbacks: usize,
}

impl HeteroModel {
    pub fn new(problem: HeteroProblem, population: PopulationSpec) -> Result<Self> {
        if population.dim() != problem.state_dim() {
            return Err(Error::invalid(
                "population",
                "dimension differs from the dynamics",
            ));
        }
        let samples = match population.distribution() {
            Distribution::Empirical(p) => p.states().to_vec(),
            _ => population
                .sample_states(population.mc_samples, population.seed)?
                .states()
                .to_vec(),
        };
        Ok(Self {
            problem,
            population,
            samples,
        })
    }

    pub fn samples(&self) -> &[DVector<f64>] {
        &self.samples
    }

    /// Mean path when every agent of every type best-responds to `reference`.
    pub fn mean_map(&self, reference: &Trajectory) -> Result<MeanMapOutput> {
        let p = &self.problem;
        let l = p.num_destinations();
        let n = p.state_dim();
        let s = self.samples.len() as f64;
        let mut total: Option<Trajectory> = None;
        let mut masses = Vec::new();
        let mut fallbacks = 0;
        for (agent, w) in p.types.types.iter().zip(&p.types.weights) {
            let sol = solve_type_tracking(p, agent, Some(reference))?;
            let basins = sol.basins();
            let parts = self
                .samples
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut mass = vec![0.0; l];
                    let mut first = vec![DVector::zeros(n); l];
                    let mut fb = 0;
                    for x in chunk {
                        let c = basins.classify(x);
                        mass[c.destination] += 1.0;
                        first[c.destination] += x;
                        fb += c.fallback as usize;
                    }
                    (mass, first, fb)
                })
                .collect::<Vec<_>>();
            let mut mass = vec![0.0; l];
            let mut first = vec![DVector::zeros(n); l];
            for (m, f, fb) in parts {
                for j in 0..l {
                    mass[j] += m[j];
                    first[j] += &f[j];
                }
                fallbacks += fb;
            }
            for j in 0..l {
                mass[j] /= s;
                first[j] /= s;
                if mass[j] == 0.0 {
                    continue;
                }
                let part = sol.per_destination[j].affine_trajectory(0, &first[j], mass[j]);
                total = Some(match total {
                    None => scale_path(&part, *w),
                    Some(acc) => add_scaled(&acc, &part, *w),
                });
            }
            masses.push(mass);
        }
        Ok(MeanMapOutput {
            mean: total.expect("at least one populated basin"),
            masses,
            fallbacks,
        })
    }
}

fn scale_path(a: &Trajectory, w: f64) -> Trajectory {
    a.map(|x| x * w)
}

fn add_scaled(acc: &Trajectory, part: &Trajectory, w: f64) -> Trajectory {
    SampledPath::from_half_knots(*acc.grid(), |i| acc.half(i) + part.half(i) * w)
        .expect("finite mean")
}

fn blend(a: &Trajectory, b: &Trajectory, w: f64) -> Trajectory {
    SampledPath::from_half_knots(*a.grid(), |i| a.half(i) * (1.0 - w) + b.half(i) * w)
        .expect("finite blend")
}

#[derive(Debug, Clone)]
pub struct PicardOptions {
    /// Weight of the new image in each update, in (0, 1].
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-3,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PicardOutcome {
    pub path: Trajectory,
    /// `‖G(x̂) - x̂‖∞` at the returned path.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Residual before each update.
    pub log: Vec<f64>,
    pub masses: Vec<Vec<f64>>,
}

/// Damped iteration `x̂ ← (1-ω) x̂ + ω G(x̂)` from `start`.
pub fn picard_solve(
    model: &HeteroModel,
    start: &Trajectory,
    opts: &PicardOptions,
) -> Result<PicardOutcome> {
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::invalid("solver.damping", "must lie in (0, 1]"));
    }
    if start.grid() != &model.problem.grid {
        return Err(Error::GridMismatch);
    }
    let mut path = start.clone();
    let mut log = Vec::new();
    let mut best: Option<PicardOutcome> = None;
    for it in 0..=opts.max_iter {
        let image = model.mean_map(&path)?;
        let residual = image.mean.sup_distance(&path)?;
        log.push(residual);
        if best.as_ref().is_none_or(|b| residual < b.residual) {
            best = Some(PicardOutcome {
                path: path.clone(),
                residual,
                iterations: it,
                converged: residual < opts.tol,
                log: Vec::new(),
                masses: image.masses.clone(),
            });
        }
        if residual < opts.tol || it == opts.max_iter {
            break;
        }
        path = blend(&path, &image.mean, opts.damping);
    }
    let mut out = best.expect("at least one evaluation");
    out.iterations = log.len() - 1;
    out.log = log;
    Ok(out)
}

/// Runs [`picard_solve`] from every start and keeps the distinct converged
/// limits (closer than twice the tolerance counts as the same).
pub fn picard_multistart(
    model: &HeteroModel,
    starts: &[Trajectory],
    opts: &PicardOptions,
) -> Result<Vec<PicardOutcome>> {
    let runs = starts
        .iter()
        .map(|s| picard_solve(model, s, opts))
        .collect::<Result<Vec<_>>>()?;
    let mut out: Vec<PicardOutcome> = Vec::new();
    for r in runs {
        let seen = out.iter().any(|o| {
            o.path
                .sup_distance(&r.path)
                .map(|d| d < 2.0 * opts.tol)
                .unwrap_or(false)
        });
        if !r.converged || !seen {
            out.push(r);
        }
    }
    Ok(out)
}

/// Three starting paths built from the uniform problem of the heaviest type
/// with its mean terminal weight: discovered equilibria first, then the
/// consensus paths towards the first and last destinations.
pub fn default_starts(model: &HeteroModel) -> Result<Vec<Trajectory>> {
    let p = &model.problem;
    let (i, _) = p
        .types
        .weights
        .iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |b, (i, &w)| if w > b.1 { (i, w) } else { b },
        );
    let ms = &p.types.types[i].terminal_weights;
    let m = ms.iter().sum::<f64>() / ms.len() as f64;
    let uniform = UniformModel::new(p.uniform_problem(i, m)?)?;
    let st = StochasticModel::new(uniform, model.population.clone())?;
    let found = discover_equilibria(&st, &DiscoveryOptions::default());
    let l = p.num_destinations();
    let mut splits: Vec<Vec<f64>> = found.equilibria.iter().map(|e| e.split.clone()).collect();
    for j in [0, l - 1] {
        let mut e = vec![0.0; l];
        e[j] = 1.0;
        splits.push(e);
    }
    let mut starts: Vec<Trajectory> = Vec::new();
    for s in splits {
        let path = st.candidate_path(&s);
        if starts
            .iter()
            .all(|o| o.sup_distance(&path).map(|d| d > 1e-9).unwrap_or(true))
        {
            starts.push(path);
        }
        if starts.len() == 3 {
            break;
        }
    }
    Ok(starts)
}

#[derive(Debug, Clone)]
pub struct FeasibilityBound {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    /// `√max(k1 + k2, k3) · T`.
    pub value: f64,
    /// `value < π/2`.
    pub satisfied: bool,
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 || m.ncols() == 1 {
        m.norm()
    } else {
        m.clone().svd(false, false).singular_values.max()
    }
}

/// Constants of the sufficient condition for a fixed point of the mean map.
///
/// With `F(s,t)` the closed-loop transition from `s` to `t` of one
/// (type, destination) pair:
/// `k1 = E‖x0‖ Σ_j max ‖F(0,t)‖`,
/// `k2 = Σ_j max ‖(M_j/r) ∫_0^t F(σ,t) B Bᵀ F(σ,T)ᵀ dσ p_j‖`,
/// `k3 = (q/r) Σ_j max ‖Bᵀ F(σ,t)ᵀ‖²`, maxima over types and grid nodes.
pub fn feasibility_bound(model: &HeteroModel) -> Result<FeasibilityBound> {
    let p = &model.problem;
    let grid = p.grid;
    let steps = grid.steps();
    let (q, r) = (p.tracking_weight, p.control_weight);
    let mean_norm =
        model.samples.iter().map(|x| x.norm()).sum::<f64>() / model.samples.len() as f64;
    let l = p.num_destinations();
    let mut max1 = vec![0.0f64; l];
    let mut max2 = vec![0.0f64; l];
    let mut max3 = vec![0.0f64; l];
    for agent in &p.types.types {
        let sol = solve_type_tracking(p, agent, None)?;
        let bt = agent.dynamics.input().transpose();
        for j in 0..l {
            let s = &sol.per_destination[j];
            let tr = s.transition();
            let to_t = tr.to_horizon_at(0);
            let c0 = s.gramian().first();
            let scale = agent.terminal_weights[j] / r;
            // Rows of Bᵀ Φ(σ,T) and columns of Φ(T,t) over the nodes.
            let left: Vec<DMatrix<f64>> =
                (0..=steps).map(|a| &bt * tr.to_horizon_at(2 * a)).collect();
            let right: Vec<DMatrix<f64>> = (0..=steps).map(|a| tr.from_horizon_at(2 * a)).collect();
            for a in 0..=steps {
                let back = &right[a];
                max1[j] = max1[j].max(spectral_norm(&(&to_t * back)));
                let pull =
                    back.transpose() * (c0 - s.gramian().node(a)) * &p.destinations[j] * scale;
                max2[j] = max2[j].max(pull.norm());
            }
            let k3j = (0..=steps)
                .into_par_iter()
                .map(|a| {
                    right
                        .iter()
                        .map(|b| spectral_norm(&(&left[a] * b)))
                        .fold(0.0f64, f64::max)
                })
                .reduce(|| 0.0, f64::max);
            max3[j] = max3[j].max(k3j * k3j);
        }
    }
    let k1 = mean_norm * max1.iter().sum::<f64>();
    let k2 = max2.iter().sum::<f64>();
    let k3 = q / r * max3.iter().sum::<f64>();
    let value = (k1 + k2).max(k3).sqrt() * grid.horizon();
    Ok(FeasibilityBound {
        k1,
        k2,
        k3,
        value,
        satisfied: value < std::f64::consts::FRAC_PI_2,
    })
}
