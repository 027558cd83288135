//! Finite-horizon LQ tracking of a reference path.
//!
//! The value function for destination `k` is `½ xᵀ Γ x + β_kᵀ x + δ_k`.
//! A single backward sweep integrates Γ together with the closed-loop
//! transition matrix Φ(t, T) (and its inverse), the offsets β_k and δ_k, and a
//! few running integrals. Forward quantities such as agent trajectories and
//! mean paths are then algebraic in the sweep output, so nothing is ever
//! integrated forward through the stiff layer near the horizon.

use std::cell::Cell;

use nalgebra::{DMatrix, DVector};

use crate::basins::AffineBasins;
use crate::error::{Error, Result};
use crate::model::{Dynamics, Problem};
use crate::numerics::{
    integrate, Direction, MatrixPath, Sample, SampledPath, ScalarPath, TimeGrid, Trajectory,
    Transition,
};

/// RK4 steps are subdivided until `h · (stiffness bound) ≤` this value.
const STIFFNESS_TARGET: f64 = 0.1;

/// Asymmetry of Γ above which a warning is recorded.
pub const ASYMMETRY_WARNING: f64 = 1e-8;

/// Weights of one LQ tracking problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub tracking: f64,
    pub control: f64,
    pub terminal: f64,
}

impl Weights {
    pub fn of(problem: &Problem) -> Self {
        Self {
            tracking: problem.cost.tracking_weight,
            control: problem.cost.control_weight,
            terminal: problem.cost.terminal_weight,
        }
    }
}

/// A list of matrices plus a vector, integrated as one ODE state.
#[derive(Debug, Clone)]
pub(crate) struct Blocks {
    pub mats: Vec<DMatrix<f64>>,
    pub consts: DVector<f64>,
}

impl Sample for Blocks {
    fn axpy(&self, a: f64, x: &Self) -> Self {
        Blocks {
            mats: self
                .mats
                .iter()
                .zip(&x.mats)
                .map(|(m, d)| m + d * a)
                .collect(),
            consts: &self.consts + &x.consts * a,
        }
    }
    fn scale(&self, a: f64) -> Self {
        Blocks {
            mats: self.mats.iter().map(|m| m * a).collect(),
            consts: &self.consts * a,
        }
    }
    fn is_finite(&self) -> bool {
        self.mats.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.consts.iter().all(|v| v.is_finite())
    }
}

/// Γ, Φ(t,T), Φ(T,t) and ∫_t^T Φᵀ B Bᵀ Φ for one set of weights, stored as
/// four consecutive blocks starting at `at`.
pub(crate) struct RiccatiBlock<'a> {
    pub dynamics: &'a Dynamics,
    pub tracking: f64,
    pub control: f64,
    pub at: usize,
}

pub(crate) struct RiccatiRates {
    pub pi: DMatrix<f64>,
    /// Φ(t,T)ᵀ B Bᵀ Φ(t,T)
    pub gram: DMatrix<f64>,
}

impl RiccatiBlock<'_> {
    pub fn boundary(&self, terminal: f64) -> Vec<DMatrix<f64>> {
        let n = self.dynamics.state_dim();
        let id = DMatrix::<f64>::identity(n, n);
        vec![&id * terminal, id.clone(), id, DMatrix::zeros(n, n)]
    }

    /// Writes the four derivatives into `out[at..at + 4]`.
    pub fn rates(&self, s: &Blocks, out: &mut [DMatrix<f64>]) -> RiccatiRates {
        let a = self.dynamics.drift();
        let bbt = self.dynamics.input_gram();
        let g = &s.mats[self.at];
        let phi = &s.mats[self.at + 1];
        let theta = &s.mats[self.at + 2];
        let n = g.nrows();
        let gb = g * bbt;
        let pi = &gb / self.control - a.transpose();
        let mut dg = &gb * g / self.control - g * a - a.transpose() * g;
        for i in 0..n {
            dg[(i, i)] -= self.tracking;
        }
        let bp = bbt * phi;
        let gram = phi.transpose() * &bp;
        out[self.at] = dg;
        out[self.at + 1] = &pi * phi;
        out[self.at + 2] = -(theta * &pi);
        out[self.at + 3] = -&gram;
        RiccatiRates { pi, gram }
    }

    pub fn stiffness(&self, s: &Blocks) -> f64 {
        let g = s.mats[self.at].norm();
        2.0 * (g * self.dynamics.input_gram().norm() / self.control + self.dynamics.drift().norm())
    }

    pub fn symmetrize(&self, s: &mut Blocks) -> f64 {
        let g = &mut s.mats[self.at];
        let asym = (g.clone() - g.transpose()).amax();
        let sym = (g.clone() + g.transpose()) * 0.5;
        *g = sym;
        asym
    }
}

pub(crate) fn substeps_for(grid: &TimeGrid, rate: f64) -> usize {
    let x = grid.step() * rate / STIFFNESS_TARGET;
    if x <= 1.0 {
        1
    } else {
        x.ceil().min(1e6) as usize
    }
}

/// Output of one tracking sweep.
#[derive(Debug, Clone)]
pub struct TrackingSolution {
    dynamics: Dynamics,
    weights: Weights,
    destinations: Vec<DVector<f64>>,
    /// Γ(t)
    pub quadratic: MatrixPath,
    /// β_k(t)
    pub linear: Vec<Trajectory>,
    /// δ_k(t)
    pub constant: Vec<ScalarPath>,
    transition: Transition,
    /// ∫_t^T Φ(σ,T)ᵀ B Bᵀ Φ(σ,T) dσ
    gramian: MatrixPath,
    /// ∫_t^T Φ(σ,T)ᵀ B Bᵀ β_k(σ) dσ
    steering: Vec<Trajectory>,
    asymmetry: f64,
}

/// Runs the backward sweep for the given weights and destinations.
///
/// `reference` is the tracked mean path; `None` tracks the zero path, which
/// only matters when the tracking weight is positive.
pub fn sweep(
    dynamics: &Dynamics,
    weights: Weights,
    destinations: &[DVector<f64>],
    reference: Option<&Trajectory>,
    grid: &TimeGrid,
) -> Result<TrackingSolution> {
    let n = dynamics.state_dim();
    let l = destinations.len();
    if let Some(r) = reference {
        if r.grid() != grid {
            return Err(Error::GridMismatch);
        }
        if r.dim() != n {
            return Err(Error::invalid(
                "reference",
                format!("expected dimension {n}, got {}", r.dim()),
            ));
        }
    }
    for (j, p) in destinations.iter().enumerate() {
        if p.len() != n {
            return Err(Error::invalid(
                format!("destinations[{j}]"),
                "dimension mismatch",
            ));
        }
    }
    let block = RiccatiBlock {
        dynamics,
        tracking: weights.tracking,
        control: weights.control,
        at: 0,
    };
    let m = weights.terminal;
    let mut mats = block.boundary(m);
    let mut beta = DMatrix::zeros(n, l);
    let mut delta = DVector::zeros(l);
    for (k, p) in destinations.iter().enumerate() {
        beta.set_column(k, &(p * -m));
        delta[k] = 0.5 * m * p.norm_squared();
    }
    mats.push(beta);
    mats.push(DMatrix::zeros(n, l));
    let boundary = Blocks {
        mats,
        consts: delta,
    };

    let q = weights.tracking;
    let r = weights.control;
    let bbt = dynamics.input_gram();
    let zero = DVector::zeros(n);
    let rhs = |t: f64, s: &Blocks| -> Blocks {
        let mut out = vec![DMatrix::zeros(0, 0); 6];
        let rates = block.rates(s, &mut out);
        let beta = &s.mats[4];
        let phi = &s.mats[1];
        let xh = match reference {
            Some(path) if q != 0.0 => path.eval(t),
            _ => zero.clone(),
        };
        let mut dbeta = &rates.pi * beta;
        for mut col in dbeta.column_iter_mut() {
            col.axpy(q, &xh, 1.0);
        }
        let bb_beta = bbt * beta;
        out[4] = dbeta;
        out[5] = -(phi.transpose() * &bb_beta);
        let track = 0.5 * q * xh.norm_squared();
        let consts = DVector::from_iterator(
            l,
            (0..l).map(|k| beta.column(k).dot(&bb_beta.column(k)) / (2.0 * r) - track),
        );
        Blocks { mats: out, consts }
    };
    let asym = Cell::new(0.0f64);
    let path = integrate(
        grid,
        boundary,
        Direction::Backward,
        rhs,
        |_, s| substeps_for(grid, block.stiffness(s)),
        |s| {
            let a = block.symmetrize(s);
            asym.set(asym.get().max(a));
        },
    )?;
    TrackingSolution::from_blocks(dynamics, weights, destinations, &path, asym.get())
}

fn column_path(path: &SampledPath<Blocks>, block: usize, col: usize) -> Trajectory {
    path.map(|s| s.mats[block].column(col).into_owned())
}

impl TrackingSolution {
    fn from_blocks(
        dynamics: &Dynamics,
        weights: Weights,
        destinations: &[DVector<f64>],
        path: &SampledPath<Blocks>,
        asymmetry: f64,
    ) -> Result<Self> {
        let l = destinations.len();
        let block = |i: usize| path.map(|s| s.mats[i].clone());
        let transition = Transition::from_horizon(block(1), block(2))?;
        Ok(Self {
            dynamics: dynamics.clone(),
            weights,
            destinations: destinations.to_vec(),
            quadratic: block(0),
            linear: (0..l).map(|k| column_path(path, 4, k)).collect(),
            constant: (0..l).map(|k| path.map(|s| s.consts[k])).collect(),
            transition,
            gramian: block(3),
            steering: (0..l).map(|k| column_path(path, 5, k)).collect(),
            asymmetry,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        self.quadratic.grid()
    }

    pub fn weights(&self) -> Weights {
        self.weights
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn destinations(&self) -> &[DVector<f64>] {
        &self.destinations
    }

    pub fn num_destinations(&self) -> usize {
        self.destinations.len()
    }

    /// Φ, the transition matrix of `Π = Γ B Bᵀ / r - Aᵀ`.
    pub fn transition(&self) -> &Transition {
        &self.transition
    }

    /// `∫_t^T Φ(σ,T)ᵀ B Bᵀ Φ(σ,T) dσ`.
    pub fn gramian(&self) -> &MatrixPath {
        &self.gramian
    }

    /// Largest asymmetry of Γ removed by symmetrization.
    pub fn asymmetry(&self) -> f64 {
        self.asymmetry
    }

    pub fn warnings(&self) -> Vec<String> {
        if self.asymmetry > ASYMMETRY_WARNING {
            vec![format!(
                "Riccati solution drifted from symmetry by {:.3e}",
                self.asymmetry
            )]
        } else {
            Vec::new()
        }
    }

    /// `½ x0ᵀ Γ(0) x0 + β_k(0)ᵀ x0 + δ_k(0)`.
    pub fn optimal_cost(&self, k: usize, x0: &DVector<f64>) -> f64 {
        0.5 * x0.dot(&(self.quadratic.first() * x0))
            + self.linear[k].first().dot(x0)
            + *self.constant[k].first()
    }

    /// Cheapest destination for `x0` (lowest index on ties) and its cost.
    pub fn best_destination(&self, x0: &DVector<f64>) -> (usize, f64) {
        let mut best = (0, self.optimal_cost(0, x0));
        for k in 1..self.num_destinations() {
            let c = self.optimal_cost(k, x0);
            if c < best.1 {
                best = (k, c);
            }
        }
        best
    }

    /// `u = -(1/r) Bᵀ (Γ(t) x + β_k(t))`.
    pub fn optimal_control(&self, k: usize, x: &DVector<f64>, t: f64) -> DVector<f64> {
        let g = self.quadratic.eval(t);
        let b = self.linear[k].eval(t);
        self.dynamics.input().transpose() * (g * x + b) * (-1.0 / self.weights.control)
    }

    fn control_at_knot(&self, k: usize, x: &DVector<f64>, a: usize) -> DVector<f64> {
        let g = self.quadratic.half(a);
        let b = self.linear[k].half(a);
        self.dynamics.input().transpose() * (g * x + b) * (-1.0 / self.weights.control)
    }

    /// Controls along a trajectory heading to `k`, sampled on the same knots.
    pub fn controls_along(&self, k: usize, path: &Trajectory) -> Trajectory {
        SampledPath::from_half_knots(*self.grid(), |a| self.control_at_knot(k, path.half(a), a))
            .expect("finite controls")
    }

    /// Basins from comparing the optimal costs at t = 0.
    pub fn basins(&self) -> AffineBasins {
        let l = self.num_destinations();
        let n = self.dynamics.state_dim();
        let mut normals = vec![vec![DVector::zeros(n); l]; l];
        let mut offsets = vec![vec![0.0; l]; l];
        for j in 0..l {
            for k in 0..l {
                if j != k {
                    normals[j][k] = self.linear[j].first() - self.linear[k].first();
                    offsets[j][k] = self.constant[k].first() - self.constant[j].first();
                }
            }
        }
        AffineBasins::new(normals, offsets).expect("square tables")
    }

    /// Closed-loop path from first moment `x0` with mass `mass` heading to `k`:
    /// `Φ(t,T)^{-ᵀ} [Φ(0,T)ᵀ x0 - (mass/r) ∫_0^t Φ(σ,T)ᵀ B Bᵀ β_k dσ]`.
    pub fn affine_trajectory(&self, k: usize, x0: &DVector<f64>, mass: f64) -> Trajectory {
        let grid = *self.grid();
        let last = 2 * grid.steps();
        let start = self.transition.to_horizon_at(0).transpose() * x0;
        let e0 = self.steering[k].first();
        let r = self.weights.control;
        SampledPath::from_half_knots(grid, |a| {
            if a == 0 {
                return x0.clone();
            }
            let inner = &start - (e0 - self.steering[k].half(a)) * (mass / r);
            let back = self.transition.from_horizon_at(a);
            if a == last {
                inner
            } else {
                back.transpose() * inner
            }
        })
        .expect("finite trajectory")
    }

    pub fn trajectory(&self, k: usize, x0: &DVector<f64>) -> Trajectory {
        self.affine_trajectory(k, x0, 1.0)
    }

    /// Mean path of a population with initial mean `x0` split over destinations by `weights`.
    pub fn mean_trajectory(&self, x0: &DVector<f64>, weights: &[f64]) -> Trajectory {
        let grid = *self.grid();
        let start = self.transition.to_horizon_at(0).transpose() * x0;
        let r = self.weights.control;
        SampledPath::from_half_knots(grid, |a| {
            if a == 0 {
                return x0.clone();
            }
            let mut inner = start.clone();
            for (k, w) in weights.iter().enumerate() {
                if *w != 0.0 {
                    inner -= (self.steering[k].first() - self.steering[k].half(a)) * (w / r);
                }
            }
            self.transition.from_horizon_at(a).transpose() * inner
        })
        .expect("finite mean path")
    }
}

pub fn solve_tracking(problem: &Problem, reference: &Trajectory) -> Result<TrackingSolution> {
    sweep(
        &problem.dynamics,
        Weights::of(problem),
        &problem.cost.destinations,
        Some(reference),
        &problem.grid,
    )
}

/// Γ alone.
pub fn solve_riccati(problem: &Problem) -> Result<MatrixPath> {
    Ok(sweep(
        &problem.dynamics,
        Weights::of(problem),
        &[],
        None,
        &problem.grid,
    )?
    .quadratic)
}

/// β_k and δ_k for every destination.
pub fn solve_offsets(
    problem: &Problem,
    reference: &Trajectory,
) -> Result<(Vec<Trajectory>, Vec<ScalarPath>)> {
    let sol = solve_tracking(problem, reference)?;
    Ok((sol.linear, sol.constant))
}

/// For each terminal weight, drives `agents` to their cheapest destination
/// while tracking `reference(problem)` and returns the largest terminal
/// distance to the nearest destination.
pub fn reachability_sweep(
    problem: &Problem,
    m_values: &[f64],
    agents: &[DVector<f64>],
    mut reference: impl FnMut(&Problem) -> Result<Trajectory>,
) -> Result<Vec<(f64, f64)>> {
    if agents.is_empty() {
        return Err(Error::invalid("agents", "at least one agent is required"));
    }
    if m_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("M_values", "must be strictly increasing"));
    }
    let mut out = Vec::with_capacity(m_values.len());
    for &m in m_values {
        let mut p = problem.clone();
        p.cost.terminal_weight = m;
        p.cost.validate()?;
        let sol = solve_tracking(&p, &reference(&p)?)?;
        let miss = agents
            .iter()
            .map(|x0| {
                let (k, _) = sol.best_destination(x0);
                let end = sol.trajectory(k, x0).last().clone();
                p.cost
                    .destinations
                    .iter()
                    .map(|d| (&end - d).norm())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max);
        out.push((m, miss));
    }
    Ok(out)
}

/// The gains that turn an initial mean and a weighted destination into the
/// fixed-point candidate path `y(t) = R1(t) x̄0 + R2(t) p`.
///
/// They come from the tracking problem with zero tracking weight: `R1` is the
/// closed-loop state transition from time 0 and `R2` is the response to the
/// terminal pull towards the weighted destination.
#[derive(Debug, Clone)]
pub struct FixedPointIngredients {
    pub mean_gain: MatrixPath,
    pub destination_gain: MatrixPath,
    /// Riccati solution with zero tracking weight.
    pub feedback: MatrixPath,
}

pub fn fixed_point_ingredients(problem: &Problem) -> Result<FixedPointIngredients> {
    let w = Weights {
        tracking: 0.0,
        ..Weights::of(problem)
    };
    let sol = sweep(&problem.dynamics, w, &[], None, &problem.grid)?;
    let grid = problem.grid;
    let phi0 = sol.transition.to_horizon_at(0);
    let c0 = sol.gramian.first().clone();
    let scale = w.terminal / w.control;
    let n = problem.state_dim();
    let mean_gain = SampledPath::from_half_knots(grid, |a| {
        if a == 0 {
            DMatrix::identity(n, n)
        } else {
            (&phi0 * sol.transition.from_horizon_at(a)).transpose()
        }
    })?;
    let destination_gain = SampledPath::from_half_knots(grid, |a| {
        sol.transition.from_horizon_at(a).transpose() * (&c0 - sol.gramian.half(a)) * scale
    })?;
    Ok(FixedPointIngredients {
        mean_gain,
        destination_gain,
        feedback: sol.quadratic,
    })
}

impl FixedPointIngredients {
    pub fn path(&self, initial_mean: &DVector<f64>, target: &DVector<f64>) -> Trajectory {
        let grid = *self.mean_gain.grid();
        SampledPath::from_half_knots(grid, |a| {
            self.mean_gain.half(a) * initial_mean + self.destination_gain.half(a) * target
        })
        .expect("finite candidate path")
    }
}

/// Integrals that the basin geometry needs, from a joint sweep of the tracking
/// Riccati problem and its zero-tracking-weight counterpart.
#[derive(Debug, Clone)]
pub struct GeometryIntegrals {
    /// Φ(0, T) of the tracking problem.
    pub transition_to_horizon: DMatrix<f64>,
    /// ∫_0^T Φ(η,T)ᵀ B Bᵀ Φ(η,T) dη.
    pub gramian: DMatrix<f64>,
    /// ∫_0^T ∫_η^T Φ(η,T)ᵀ B Bᵀ Φ(η,σ) X(σ) dσ dη for X = R1 and X = R2.
    pub mean_response: DMatrix<f64>,
    pub destination_response: DMatrix<f64>,
    pub asymmetry: f64,
}

pub fn geometry_integrals(problem: &Problem) -> Result<GeometryIntegrals> {
    let dynamics = &problem.dynamics;
    let w = Weights::of(problem);
    let n = dynamics.state_dim();
    let grid = problem.grid;
    let tracking = RiccatiBlock {
        dynamics,
        tracking: w.tracking,
        control: w.control,
        at: 0,
    };
    let free = RiccatiBlock {
        dynamics,
        tracking: 0.0,
        control: w.control,
        at: 4,
    };
    let mut mats = tracking.boundary(w.terminal);
    mats.extend(free.boundary(w.terminal));
    mats.extend((0..4).map(|_| DMatrix::zeros(n, n)));
    let boundary = Blocks {
        mats,
        consts: DVector::zeros(0),
    };
    let rhs = |_t: f64, s: &Blocks| -> Blocks {
        let mut out = vec![DMatrix::zeros(0, 0); 12];
        let rt = tracking.rates(s, &mut out);
        free.rates(s, &mut out);
        let theta = &s.mats[2];
        let theta_free = &s.mats[6];
        let gram_free = &s.mats[7];
        let cross = theta * theta_free.transpose();
        let cross_c = &cross * gram_free;
        out[10] = -(&rt.gram * &s.mats[8]);
        out[11] = -(&rt.gram * &s.mats[9]);
        out[8] = -cross;
        out[9] = -cross_c;
        Blocks {
            mats: out,
            consts: DVector::zeros(0),
        }
    };
    let asym = Cell::new(0.0f64);
    let path = integrate(
        &grid,
        boundary,
        Direction::Backward,
        rhs,
        |_, s| substeps_for(&grid, tracking.stiffness(s).max(free.stiffness(s))),
        |s| {
            let a = tracking.symmetrize(s).max(free.symmetrize(s));
            asym.set(asym.get().max(a));
        },
    )?;
    for at in [1, 5] {
        Transition::from_horizon(
            path.map(|s| s.mats[at].clone()),
            path.map(|s| s.mats[at + 1].clone()),
        )?;
    }
    let s0 = path.first();
    let scale = w.terminal / w.control;
    let free_phi0 = &s0.mats[5];
    let free_c0 = &s0.mats[7];
    Ok(GeometryIntegrals {
        transition_to_horizon: s0.mats[1].clone(),
        gramian: s0.mats[3].clone(),
        mean_response: &s0.mats[10] * free_phi0.transpose(),
        destination_response: (&s0.mats[10] * free_c0 - &s0.mats[11]) * scale,
        asymmetry: asym.get(),
    })
}
