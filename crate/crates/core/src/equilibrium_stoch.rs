//! Equilibria of a continuum population described by its initial distribution.
//!
//! The split λ now lives on the probability simplex and the count map becomes
//! `F_s(λ)_j = P(x0 ∈ basin j under λ)`. Probabilities come from one of three
//! backends chosen by the population: an exact normal CDF for two
//! destinations with Gaussian initial states, exact counting for an empirical
//! population, and otherwise a frozen Monte Carlo sample that is reused for
//! every λ of a solve.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;

use crate::basins::AffineBasins;
use crate::equilibrium_det::{PopulationStates, UniformModel};
use crate::error::{Error, Result};
use crate::numerics::Trajectory;
use crate::tracking::solve_tracking;

pub const DEFAULT_MC_SAMPLES: usize = 200_000;

/// Fixed points closer than this in the sup norm are the same equilibrium.
pub const DEDUP_TOLERANCE: f64 = 1e-6;

/// Largest drift of the summed probabilities before they are renormalized.
pub const SUM_DRIFT: f64 = 1e-9;

const CHUNK: usize = 2048;

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_tail(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// `P(lo < Z < hi)` for standard normal `Z`, accurate in both tails.
fn normal_interval(lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        0.0
    } else if lo > 0.0 {
        normal_tail(lo) - normal_tail(hi)
    } else {
        normal_cdf(hi) - normal_cdf(lo)
    }
}

/// A Gaussian with a factor `L` such that `L Lᵀ` is the covariance.
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl GaussianComponent {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if n == 0 || cov.shape() != (n, n) {
            return Err(Error::invalid(
                "population.cov",
                format!("expected a {n}x{n} matrix"),
            ));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("population", "entries must be finite"));
        }
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > 1e-12 * scale {
            return Err(Error::invalid(
                "population.cov",
                "covariance must be symmetric",
            ));
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone());
        if eig.eigenvalues.iter().any(|&v| v < -1e-12 * scale) {
            return Err(Error::invalid(
                "population.cov",
                "covariance must be positive semidefinite",
            ));
        }
        let roots = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
        let factor = &eig.eigenvectors * roots;
        Ok(Self {
            mean,
            cov: sym,
            factor,
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.factor * z
    }
}

#[derive(Debug, Clone)]
pub enum Distribution {
    Gaussian(GaussianComponent),
    Empirical(PopulationStates),
    Mixture {
        weights: Vec<f64>,
        components: Vec<GaussianComponent>,
    },
}

/// Initial-state distribution plus the Monte Carlo budget used to evaluate it.
#[derive(Debug, Clone)]
pub struct PopulationSpec {
    distribution: Distribution,
    pub mc_samples: usize,
    pub seed: u64,
    mean: DVector<f64>,
}

impl PopulationSpec {
    pub fn new(distribution: Distribution, mc_samples: usize, seed: u64) -> Result<Self> {
        if mc_samples == 0 {
            return Err(Error::invalid("population.mc_samples", "must be positive"));
        }
        let mean = match &distribution {
            Distribution::Gaussian(g) => g.mean.clone(),
            Distribution::Empirical(p) => p.mean().clone(),
            Distribution::Mixture {
                weights,
                components,
            } => {
                if components.is_empty() || weights.len() != components.len() {
                    return Err(Error::invalid(
                        "population.weights",
                        "one weight per component is required",
                    ));
                }
                if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                    return Err(Error::invalid(
                        "population.weights",
                        "weights must be non-negative",
                    ));
                }
                if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(
                        "population.weights",
                        "weights must sum to 1",
                    ));
                }
                let n = components[0].mean.len();
                if components.iter().any(|c| c.mean.len() != n) {
                    return Err(Error::invalid(
                        "population.components",
                        "dimension mismatch",
                    ));
                }
                components
                    .iter()
                    .zip(weights)
                    .fold(DVector::zeros(n), |acc, (c, w)| acc + &c.mean * *w)
            }
        };
        Ok(Self {
            distribution,
            mc_samples,
            seed,
            mean,
        })
    }

    pub fn gaussian(
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        mc_samples: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::new(
            Distribution::Gaussian(GaussianComponent::new(mean, cov)?),
            mc_samples,
            seed,
        )
    }

    pub fn empirical(states: PopulationStates) -> Result<Self> {
        let n = states.len();
        Self::new(Distribution::Empirical(states), n, 0)
    }

    pub fn distribution(&self) -> &Distribution {
        &self.distribution
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn warnings(&self) -> Vec<String> {
        match self.distribution {
            Distribution::Empirical(_) => {
                vec!["empirical population: the split map may be discontinuous".to_string()]
            }
            _ => Vec::new(),
        }
    }

    /// `n` independent initial states. Agent `i` always gets the same draw for
    /// a given seed, however many agents are drawn.
    pub fn sample_states(&self, n: usize, seed: u64) -> Result<PopulationStates> {
        if n == 0 {
            return Err(Error::invalid(
                "population.N",
                "at least one agent is required",
            ));
        }
        let states = (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                self.draw(&mut rng)
            })
            .collect();
        PopulationStates::new(states)
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        match &self.distribution {
            Distribution::Gaussian(g) => g.draw(rng),
            Distribution::Empirical(p) => p.states()[rng.random_range(0..p.len())].clone(),
            Distribution::Mixture {
                weights,
                components,
            } => {
                let u: f64 = rng.random();
                components[pick(weights, u)].draw(rng)
            }
        }
    }
}

fn pick(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

#[derive(Debug, Clone)]
pub struct Probabilities {
    pub values: Vec<f64>,
    /// Binomial standard error `√(p(1-p)/S)` per entry; zero for exact backends.
    pub error: Vec<f64>,
    /// Set when the entries drifted from summing to one and were rescaled.
    pub renormalized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    NormalCdf,
    Counting,
    MonteCarlo,
}

#[derive(Debug, Clone)]
enum Backend {
    /// Weighted Gaussian components; two destinations only.
    NormalCdf(Vec<(f64, GaussianComponent)>),
    Counting(Vec<DVector<f64>>),
    /// Each sample is a random line `point + w · dir` with `w ~ N(0,1)`; its
    /// contribution to a basin is the normal mass of the basin's interval.
    Lines {
        points: Vec<DVector<f64>>,
        dirs: Vec<DVector<f64>>,
    },
}

/// Frozen evaluator of basin probabilities.
#[derive(Debug, Clone)]
pub struct ProbabilityEngine {
    backend: Backend,
    samples: usize,
}

impl ProbabilityEngine {
    pub fn new(pop: &PopulationSpec, destinations: usize) -> Self {
        let backend = match (&pop.distribution, destinations) {
            (Distribution::Empirical(p), _) => Backend::Counting(p.states().to_vec()),
            (Distribution::Gaussian(g), 2) => Backend::NormalCdf(vec![(1.0, g.clone())]),
            (
                Distribution::Mixture {
                    weights,
                    components,
                },
                2,
            ) => Backend::NormalCdf(
                weights
                    .iter()
                    .copied()
                    .zip(components.iter().cloned())
                    .collect(),
            ),
            _ => lines(pop),
        };
        let samples = match &backend {
            Backend::NormalCdf(_) => 0,
            Backend::Counting(s) => s.len(),
            Backend::Lines { points, .. } => points.len(),
        };
        Self { backend, samples }
    }

    /// The sampling backend regardless of the population kind.
    pub fn monte_carlo(pop: &PopulationSpec) -> Self {
        Self {
            backend: lines(pop),
            samples: pop.mc_samples,
        }
    }

    pub fn kind(&self) -> BackendKind {
        match self.backend {
            Backend::NormalCdf(_) => BackendKind::NormalCdf,
            Backend::Counting(_) => BackendKind::Counting,
            Backend::Lines { .. } => BackendKind::MonteCarlo,
        }
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn probabilities(&self, basins: &AffineBasins) -> Probabilities {
        let l = basins.len();
        let (mut values, error) = match &self.backend {
            Backend::NormalCdf(comps) => {
                let n = basins.normal(0, 1);
                let o = basins.offset(0, 1);
                let first: f64 = comps
                    .iter()
                    .map(|(w, c)| {
                        let var = n.dot(&(&c.cov * n));
                        let gap = o - n.dot(&c.mean);
                        let p = if var > 0.0 {
                            normal_cdf(gap / var.sqrt())
                        } else if gap >= 0.0 {
                            1.0
                        } else {
                            0.0
                        };
                        w * p
                    })
                    .sum();
                (vec![first, 1.0 - first], vec![0.0; 2])
            }
            Backend::Counting(states) => {
                let mut counts = vec![0usize; l];
                for x in states {
                    counts[basins.classify(x).destination] += 1;
                }
                let n = states.len() as f64;
                (counts.iter().map(|&c| c as f64 / n).collect(), vec![0.0; l])
            }
            Backend::Lines { points, dirs } => {
                let sums = points
                    .par_chunks(CHUNK)
                    .zip(dirs.par_chunks(CHUNK))
                    .map(|(ps, ds)| {
                        let mut acc = vec![0.0; l];
                        for (x, v) in ps.iter().zip(ds) {
                            line_masses(basins, x, v, &mut acc);
                        }
                        acc
                    })
                    .collect::<Vec<_>>();
                let mut total = vec![0.0; l];
                for part in sums {
                    for (t, p) in total.iter_mut().zip(part) {
                        *t += p;
                    }
                }
                let s = points.len() as f64;
                let values: Vec<f64> = total.iter().map(|t| t / s).collect();
                let error = values
                    .iter()
                    .map(|p| (p * (1.0 - p)).max(0.0).sqrt() / s.sqrt())
                    .collect();
                (values, error)
            }
        };
        let sum: f64 = values.iter().sum();
        let renormalized = (sum - 1.0).abs() > SUM_DRIFT;
        if renormalized && sum > 0.0 {
            for v in &mut values {
                *v /= sum;
            }
        }
        Probabilities {
            values,
            error,
            renormalized,
        }
    }
}

fn lines(pop: &PopulationSpec) -> Backend {
    let comps: Vec<(f64, GaussianComponent)> = match &pop.distribution {
        Distribution::Gaussian(g) => vec![(1.0, g.clone())],
        Distribution::Mixture {
            weights,
            components,
        } => weights
            .iter()
            .copied()
            .zip(components.iter().cloned())
            .collect(),
        // Point masses with a zero direction.
        Distribution::Empirical(p) => p
            .states()
            .iter()
            .map(|x| {
                (
                    1.0 / p.len() as f64,
                    GaussianComponent::new(x.clone(), DMatrix::zeros(x.len(), x.len()))
                        .expect("point mass"),
                )
            })
            .collect(),
    };
    let weights: Vec<f64> = comps.iter().map(|c| c.0).collect();
    let s = pop.mc_samples;
    let (points, dirs) = (0..s)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(pop.seed);
            rng.set_stream(i as u64);
            // Stratified component choice keeps mixture shares exact.
            let c = &comps[pick(&weights, (i as f64 + 0.5) / s as f64)].1;
            let n = c.mean.len();
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut u = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let norm = u.norm();
            if norm > 0.0 {
                u /= norm;
            } else {
                u[0] = 1.0;
            }
            let perp = &z - &u * u.dot(&z);
            (&c.mean + &c.factor * perp, &c.factor * u)
        })
        .unzip();
    Backend::Lines { points, dirs }
}

fn line_masses(basins: &AffineBasins, x: &DVector<f64>, v: &DVector<f64>, acc: &mut [f64]) {
    let l = basins.len();
    let mut flat = true;
    let mut a = vec![0.0; l * l];
    let mut b = vec![0.0; l * l];
    for j in 0..l {
        for k in 0..l {
            if j != k {
                a[j * l + k] = basins.normal(j, k).dot(x);
                b[j * l + k] = basins.normal(j, k).dot(v);
                flat &= b[j * l + k] == 0.0;
            }
        }
    }
    if flat {
        // A point mass: classify it with the usual tie-break.
        acc[basins.classify_projected(&a).destination] += 1.0;
        return;
    }
    for j in 0..l {
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut empty = false;
        for k in (0..l).filter(|&k| k != j) {
            let (ak, bk, o) = (a[j * l + k], b[j * l + k], basins.offset(j, k));
            if bk > 0.0 {
                hi = hi.min((o - ak) / bk);
            } else if bk < 0.0 {
                lo = lo.max((o - ak) / bk);
            } else if ak > o {
                empty = true;
            }
        }
        if !empty {
            acc[j] += normal_interval(lo, hi);
        }
    }
}

/// A uniform problem together with a population distribution.
#[derive(Debug, Clone)]
pub struct StochasticModel {
    pub model: UniformModel,
    pub population: PopulationSpec,
    engine: ProbabilityEngine,
}

impl StochasticModel {
    pub fn new(model: UniformModel, population: PopulationSpec) -> Result<Self> {
        if population.dim() != model.problem.state_dim() {
            return Err(Error::invalid(
                "population",
                "dimension differs from the dynamics",
            ));
        }
        let engine = ProbabilityEngine::new(&population, model.num_destinations());
        Ok(Self {
            model,
            population,
            engine,
        })
    }

    /// Replaces the probability backend, e.g. to force sampling.
    pub fn with_engine(mut self, engine: ProbabilityEngine) -> Self {
        self.engine = engine;
        self
    }

    pub fn engine(&self) -> &ProbabilityEngine {
        &self.engine
    }

    pub fn num_destinations(&self) -> usize {
        self.model.num_destinations()
    }

    pub fn mean(&self) -> &DVector<f64> {
        self.population.mean()
    }

    pub fn binary_slope(&self) -> f64 {
        self.model.binary_slope()
    }

    fn check_split(&self, split: &[f64]) -> Result<()> {
        if split.len() != self.num_destinations() {
            return Err(Error::invalid(
                "split",
                "one entry per destination is required",
            ));
        }
        if split
            .iter()
            .any(|v| !(v.is_finite() && *v >= -1e-12 && *v <= 1.0 + 1e-12))
        {
            return Err(Error::invalid("split", "entries must lie in [0, 1]"));
        }
        if (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split", "entries must sum to 1"));
        }
        Ok(())
    }

    /// `F_s(λ)`.
    pub fn eval_fs(&self, split: &[f64]) -> Result<Probabilities> {
        self.check_split(split)?;
        Ok(self.fs(split))
    }

    fn fs(&self, split: &[f64]) -> Probabilities {
        self.engine
            .probabilities(&self.model.basins(self.mean(), split))
    }

    pub fn region_probability(&self, j: usize, split: &[f64]) -> Result<f64> {
        if j >= self.num_destinations() {
            return Err(Error::invalid("destination", "index out of range"));
        }
        Ok(self.eval_fs(split)?.values[j])
    }

    /// `‖F_s(λ) - λ‖∞`.
    pub fn residual(&self, split: &[f64]) -> f64 {
        sup_gap(&self.fs(split).values, split)
    }

    pub fn candidate_path(&self, split: &[f64]) -> Trajectory {
        self.model.candidate_path(self.mean(), split)
    }

    /// Mean path of the population when every agent best-responds to
    /// `reference`, and the basin probabilities behind it.
    pub fn mean_map(&self, reference: &Trajectory) -> Result<(Trajectory, Probabilities)> {
        let sol = solve_tracking(&self.model.problem, reference)?;
        let probs = self.engine.probabilities(&sol.basins());
        Ok((sol.mean_trajectory(self.mean(), &probs.values), probs))
    }
}

fn sup_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Monotone,
    Bisection,
    Broyden,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Monotone => "monotone",
            Method::Bisection => "bisection",
            Method::Broyden => "broyden",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitSolution {
    pub split: Vec<f64>,
    /// `‖F_s(λ) - λ‖∞` at the returned split.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub method: Method,
    pub warnings: Vec<String>,
}

fn binary_first(st: &StochasticModel, alpha: f64) -> f64 {
    st.fs(&[alpha, 1.0 - alpha]).values[0]
}

fn require_binary(st: &StochasticModel) -> Result<()> {
    if st.num_destinations() != 2 {
        return Err(Error::invalid(
            "destinations",
            "this solver needs exactly two destinations",
        ));
    }
    Ok(())
}

/// Iterates `α ← F_s(α, 1-α)_1`, which is monotone when the threshold slope
/// is positive.
pub fn solve_binary_monotone(
    st: &StochasticModel,
    alpha0: f64,
    tol: f64,
    max_iter: usize,
) -> Result<SplitSolution> {
    require_binary(st)?;
    if !(0.0..=1.0).contains(&alpha0) {
        return Err(Error::invalid("alpha0", "must lie in [0, 1]"));
    }
    let slope = st.binary_slope();
    if slope <= 0.0 {
        return Err(Error::invalid(
            "solver.method",
            "monotone iteration needs a positive threshold slope",
        ));
    }
    let mut alpha = alpha0;
    let mut direction = 0.0f64;
    let mut warnings = st.population.warnings();
    for it in 1..=max_iter {
        let next = binary_first(st, alpha);
        let step = next - alpha;
        if direction == 0.0 {
            direction = step.signum();
        } else if step * direction < -1e-15 {
            return Err(Error::NotConverged(format!(
                "monotone iteration reversed direction at step {it}; raise population.mc_samples"
            )));
        }
        alpha = next;
        if step.abs() < tol {
            return Ok(SplitSolution {
                residual: st.residual(&[alpha, 1.0 - alpha]),
                split: vec![alpha, 1.0 - alpha],
                iterations: it,
                converged: true,
                method: Method::Monotone,
                warnings,
            });
        }
    }
    warnings.push(format!(
        "monotone iteration did not settle within {max_iter} steps"
    ));
    Ok(SplitSolution {
        residual: st.residual(&[alpha, 1.0 - alpha]),
        split: vec![alpha, 1.0 - alpha],
        iterations: max_iter,
        converged: false,
        method: Method::Monotone,
        warnings,
    })
}

/// Root of `g(α) = F_s(α, 1-α)_1 - α`, decreasing when the threshold slope is
/// not positive.
pub fn solve_binary_bisection(st: &StochasticModel, tol: f64) -> Result<SplitSolution> {
    require_binary(st)?;
    if st.binary_slope() > 0.0 {
        return Err(Error::invalid(
            "solver.method",
            "bisection needs a non-positive threshold slope",
        ));
    }
    let g = |a: f64| binary_first(st, a) - a;
    let mut warnings = st.population.warnings();
    let grid: Vec<f64> = (0..=100).map(|i| g(i as f64 / 100.0)).collect();
    if grid.windows(2).any(|w| w[1] > w[0]) {
        warnings.push("g(α) is not decreasing on the check grid".to_string());
    }
    let done = |alpha: f64, iterations: usize, warnings: Vec<String>| SplitSolution {
        residual: st.residual(&[alpha, 1.0 - alpha]),
        split: vec![alpha, 1.0 - alpha],
        iterations,
        converged: true,
        method: Method::Bisection,
        warnings,
    };
    if grid[0] <= 0.0 {
        return Ok(done(0.0, 1, warnings));
    }
    if grid[100] >= 0.0 {
        return Ok(done(1.0, 2, warnings));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut it = 2;
    while hi - lo > tol && it < 200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        it += 1;
    }
    let a = 0.5 * (lo + hi);
    Ok(done(a, it, warnings))
}

fn project_simplex(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = x.clamp(0.0, 1.0);
    }
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        for x in v.iter_mut() {
            *x /= s;
        }
    } else {
        let w = 1.0 / v.len() as f64;
        v.iter_mut().for_each(|x| *x = w);
    }
}

/// Split from the chart that drops the last coordinate.
fn from_chart(y: &DVector<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = y.iter().copied().collect();
    v.push(1.0 - y.sum());
    project_simplex(&mut v);
    v
}

/// Broyden's method on `F_s(λ) - λ` in the chart without the last coordinate.
pub fn solve_broyden(
    st: &StochasticModel,
    split0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<SplitSolution> {
    st.check_split(split0)?;
    let l = st.num_destinations();
    let mut warnings = st.population.warnings();
    let finish = |split: Vec<f64>,
                  residual: f64,
                  iterations: usize,
                  converged: bool,
                  warnings: Vec<String>| SplitSolution {
        split,
        residual,
        iterations,
        converged,
        method: Method::Broyden,
        warnings,
    };
    if l == 1 {
        return Ok(finish(vec![1.0], 0.0, 0, true, warnings));
    }
    let d = l - 1;
    let eval = |y: &DVector<f64>| -> (Vec<f64>, DVector<f64>, f64) {
        let split = from_chart(y);
        let f = st.fs(&split).values;
        let res = DVector::from_fn(d, |i, _| f[i] - split[i]);
        let full = sup_gap(&f, &split);
        (split, res, full)
    };
    let jacobian = |y: &DVector<f64>, r0: &DVector<f64>| -> DMatrix<f64> {
        let h = 1e-4;
        let mut jac = DMatrix::zeros(d, d);
        for c in 0..d {
            let mut yp = y.clone();
            // Step away from the simplex boundary.
            let step = if y[c] + h <= 1.0 && y.sum() + h <= 1.0 {
                h
            } else {
                -h
            };
            yp[c] += step;
            let (_, r, _) = eval(&yp);
            jac.set_column(c, &((r - r0) / step));
        }
        jac
    };
    let mut split = split0.to_vec();
    project_simplex(&mut split);
    let mut y = DVector::from_fn(d, |i, _| split[i]);
    let (mut split, mut res, mut full) = eval(&y);
    if full < tol {
        return Ok(finish(split, full, 0, true, warnings));
    }
    let mut jac = jacobian(&y, &res);
    let mut restarts = 0;
    let mut best = (split.clone(), full);
    for it in 1..=max_iter {
        let step = match jac.clone().lu().solve(&(-&res)) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => {
                if restarts > 0 {
                    return Err(Error::NotConverged(
                        "Broyden Jacobian became singular twice".to_string(),
                    ));
                }
                restarts += 1;
                warnings.push(format!("Broyden restarted at iteration {it}"));
                jac = jacobian(&y, &res);
                continue;
            }
        };
        // Backtrack until the residual no longer grows.
        let mut scale = 1.0;
        let mut trial = eval(&(&y + &step));
        for _ in 0..10 {
            if trial.1.amax() <= res.amax() {
                break;
            }
            scale *= 0.5;
            trial = eval(&(&y + &step * scale));
        }
        let (new_split, new_res, new_full) = trial;
        let y_new = DVector::from_fn(d, |i, _| new_split[i]);
        let dy = &y_new - &y;
        let dr = &new_res - &res;
        let dd = dy.norm_squared();
        if dd > 0.0 {
            jac += (dr - &jac * &dy) * dy.transpose() / dd;
        } else if new_full >= tol {
            if restarts > 0 {
                return Ok(finish(best.0, best.1, it, false, warnings));
            }
            restarts += 1;
            warnings.push(format!("Broyden stalled and restarted at iteration {it}"));
            jac = jacobian(&y_new, &new_res);
        }
        y = y_new;
        res = new_res;
        split = new_split;
        full = new_full;
        if full < best.1 {
            best = (split.clone(), full);
        }
        if full < tol {
            return Ok(finish(split, full, it, true, warnings));
        }
    }
    warnings.push(format!(
        "Broyden did not converge within {max_iter} iterations"
    ));
    Ok(finish(best.0, best.1, max_iter, false, warnings))
}

#[derive(Debug, Clone)]
pub struct DiscoveryOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Random simplex starts for Broyden.
    pub broyden_starts: usize,
    pub seed: u64,
}

impl Default for DiscoveryOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 10_000,
            broyden_starts: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Discovery {
    /// Distinct converged fixed points, sorted by decreasing first share.
    pub equilibria: Vec<SplitSolution>,
    /// Every solver run, including failures.
    pub attempts: Vec<std::result::Result<SplitSolution, String>>,
}

/// Uniform random point of the simplex.
pub fn random_split(l: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..l).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    project_simplex(&mut v);
    v
}

/// Runs every applicable solver from several starts and keeps the distinct
/// fixed points.
pub fn discover_equilibria(st: &StochasticModel, opts: &DiscoveryOptions) -> Discovery {
    let l = st.num_destinations();
    let mut attempts = Vec::new();
    if l == 2 {
        if st.binary_slope() > 0.0 {
            for a in [0.0, 0.5, 1.0] {
                attempts.push(solve_binary_monotone(
                    st,
                    a,
                    opts.tol.min(1e-10),
                    opts.max_iter,
                ));
            }
        } else {
            attempts.push(solve_binary_bisection(st, 1e-13));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.broyden_starts {
        let start = random_split(l, &mut rng);
        attempts.push(solve_broyden(st, &start, opts.tol, opts.max_iter.min(200)));
    }
    let attempts: Vec<_> = attempts
        .into_iter()
        .map(|a| a.map_err(|e| e.to_string()))
        .collect();
    let mut equilibria: Vec<SplitSolution> = Vec::new();
    for s in attempts.iter().flatten() {
        if !s.converged || s.residual >= opts.tol {
            continue;
        }
        if equilibria
            .iter()
            .all(|e| sup_gap(&e.split, &s.split) > DEDUP_TOLERANCE)
        {
            equilibria.push(s.clone());
        }
    }
    equilibria.sort_by(|a, b| {
        b.split
            .partial_cmp(&a.split)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Discovery {
        equilibria,
        attempts,
    }
}

#[derive(Debug, Clone)]
pub struct UniquenessReport {
    /// `v = n_12ᵀ Σ n_12`, the variance of the basin projection.
    pub projected_variance: f64,
    /// Threshold slope `s`.
    pub slope: f64,
    /// `v ≥ s² / 2π`: the split map cannot cross the diagonal twice.
    pub variance_condition: bool,
    /// Slab bounds; absent when the variance condition holds or `s ≤ 0`.
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    /// `(n_12 - a_12) · μ0`, the coordinate compared against the slab.
    pub mean_coordinate: f64,
    pub mean_in_slab: Option<bool>,
    pub unique: bool,
}

/// Sufficient conditions for a unique fixed point with two destinations and
/// Gaussian initial states.
pub fn gaussian_uniqueness(
    model: &UniformModel,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<UniquenessReport> {
    if model.num_destinations() != 2 {
        return Err(Error::invalid(
            "destinations",
            "the uniqueness test needs exactly two destinations",
        ));
    }
    let g = &model.geometry;
    let p = model.destinations();
    let normal = &g.normals[0][1];
    let v = normal.dot(&(cov * normal));
    let s = model.binary_slope();
    let mean_coordinate = (normal - &g.mean_coupling[0][1]).dot(mean);
    let mut report = UniquenessReport {
        projected_variance: v,
        slope: s,
        variance_condition: true,
        lower: None,
        upper: None,
        mean_coordinate,
        mean_in_slab: None,
        unique: true,
    };
    if s <= 0.0 {
        return Ok(report);
    }
    report.variance_condition = v >= s * s / (2.0 * std::f64::consts::PI);
    if report.variance_condition {
        return Ok(report);
    }
    let root = if v > 0.0 {
        (2.0 * v).sqrt() * (s.ln() - 0.5 * (2.0 * std::f64::consts::PI * v).ln()).sqrt()
    } else {
        0.0
    };
    let base = g.offsets[0][1];
    let a = base + g.target_coupling[0][1].dot(&p[1]) - root;
    let b = base + g.target_coupling[0][1].dot(&p[0]) + root;
    let inside = a < mean_coordinate && mean_coordinate < b;
    report.lower = Some(a);
    report.upper = Some(b);
    report.mean_in_slab = Some(inside);
    report.unique = !inside;
    Ok(report)
}
