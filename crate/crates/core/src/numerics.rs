//! Time grids, sampled paths, fixed-step RK4 and quadrature.
//!
//! A path stores one sample per grid node plus one per interval midpoint.
//! Evaluation at other times is piecewise linear over that sequence, which is
//! the only interpolation rule used anywhere in the crate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest condition number accepted when inverting a transition matrix.
pub const MAX_CONDITION: f64 = 1e12;
/// Largest accepted entry of `Φ(t, T) Φ(T, t) - I`. Past this, products of
/// horizon-referenced samples lose accuracy: strongly separated decay rates
/// over a long horizon amplify the integration error by the spread.
pub const MAX_ROUND_TRIP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid(
                "cost.T",
                "horizon must be positive and finite",
            ));
        }
        if steps < 2 {
            return Err(Error::invalid(
                "cost.grid_steps",
                "at least 2 steps are required",
            ));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of nodes, `steps + 1`.
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        self.half_knot(2 * k)
    }

    pub fn midpoint(&self, k: usize) -> f64 {
        self.half_knot(2 * k + 1)
    }

    /// Time of the `i`-th entry of the interleaved node/midpoint sequence.
    pub fn half_knot(&self, i: usize) -> f64 {
        let n = 2 * self.steps;
        if i >= n {
            self.horizon
        } else {
            self.horizon * i as f64 / n as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.node(k)).collect()
    }
}

/// Arithmetic needed to integrate and interpolate a sample type.
pub trait Sample: Clone + Send + Sync {
    /// `self + a * x`
    fn axpy(&self, a: f64, x: &Self) -> Self;
    fn scale(&self, a: f64) -> Self;
    fn is_finite(&self) -> bool;

    fn lerp(&self, other: &Self, w: f64) -> Self {
        self.scale(1.0 - w).axpy(w, other)
    }
}

impl Sample for f64 {
    fn axpy(&self, a: f64, x: &Self) -> Self {
        self + a * x
    }
    fn scale(&self, a: f64) -> Self {
        self * a
    }
    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
}

impl Sample for DVector<f64> {
    fn axpy(&self, a: f64, x: &Self) -> Self {
        self + x * a
    }
    fn scale(&self, a: f64) -> Self {
        self * a
    }
    fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl Sample for DMatrix<f64> {
    fn axpy(&self, a: f64, x: &Self) -> Self {
        self + x * a
    }
    fn scale(&self, a: f64) -> Self {
        self * a
    }
    fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// Samples of a function of time on the nodes and midpoints of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath<S> {
    grid: TimeGrid,
    nodes: Vec<S>,
    mids: Vec<S>,
}

pub type MatrixPath = SampledPath<DMatrix<f64>>;
pub type Trajectory = SampledPath<DVector<f64>>;
pub type ScalarPath = SampledPath<f64>;

impl<S: Sample> SampledPath<S> {
    pub fn new(grid: TimeGrid, nodes: Vec<S>, mids: Vec<S>) -> Result<Self> {
        if nodes.len() != grid.len() || mids.len() != grid.steps() {
            return Err(Error::GridMismatch);
        }
        if let Some(i) = nodes.iter().position(|s| !s.is_finite()) {
            return Err(Error::Divergence { t: grid.node(i) });
        }
        if let Some(i) = mids.iter().position(|s| !s.is_finite()) {
            return Err(Error::Divergence {
                t: grid.midpoint(i),
            });
        }
        Ok(Self { grid, nodes, mids })
    }

    /// Builds a path from node samples only; midpoints are node averages.
    pub fn from_nodes(grid: TimeGrid, nodes: Vec<S>) -> Result<Self> {
        if nodes.len() != grid.len() {
            return Err(Error::GridMismatch);
        }
        let mids = nodes.windows(2).map(|w| w[0].lerp(&w[1], 0.5)).collect();
        Self::new(grid, nodes, mids)
    }

    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> S) -> Result<Self> {
        let nodes = (0..grid.len()).map(|k| f(grid.node(k))).collect();
        let mids = (0..grid.steps()).map(|k| f(grid.midpoint(k))).collect();
        Self::new(grid, nodes, mids)
    }

    /// Builds a path from a function of the interleaved knot index.
    pub fn from_half_knots(grid: TimeGrid, f: impl Fn(usize) -> S) -> Result<Self> {
        let nodes = (0..grid.len()).map(|k| f(2 * k)).collect();
        let mids = (0..grid.steps()).map(|k| f(2 * k + 1)).collect();
        Self::new(grid, nodes, mids)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn nodes(&self) -> &[S] {
        &self.nodes
    }

    pub fn mids(&self) -> &[S] {
        &self.mids
    }

    pub fn node(&self, k: usize) -> &S {
        &self.nodes[k]
    }

    pub fn mid(&self, k: usize) -> &S {
        &self.mids[k]
    }

    pub fn first(&self) -> &S {
        &self.nodes[0]
    }

    pub fn last(&self) -> &S {
        &self.nodes[self.grid.steps()]
    }

    pub fn half(&self, i: usize) -> &S {
        if i % 2 == 0 {
            &self.nodes[i / 2]
        } else {
            &self.mids[i / 2]
        }
    }

    /// Piecewise-linear evaluation; `t` is clamped to `[0, T]`.
    pub fn eval(&self, t: f64) -> S {
        let n = 2 * self.grid.steps();
        let u = (t / self.grid.horizon()).clamp(0.0, 1.0) * n as f64;
        let i = (u.floor() as usize).min(n - 1);
        let w = u - i as f64;
        self.half(i).lerp(self.half(i + 1), w)
    }

    pub fn map<R: Sample>(&self, f: impl Fn(&S) -> R) -> SampledPath<R> {
        SampledPath {
            grid: self.grid,
            nodes: self.nodes.iter().map(&f).collect(),
            mids: self.mids.iter().map(&f).collect(),
        }
    }

    /// Largest value of `f` over all stored knots.
    pub fn max_over<F: Fn(&S) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .chain(self.mids.iter())
            .map(f)
            .fold(0.0, f64::max)
    }
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.nodes[0].len()
    }

    /// Sup-norm distance over nodes and midpoints.
    pub fn sup_distance(&self, other: &Trajectory) -> Result<f64> {
        if self.grid != other.grid || self.dim() != other.dim() {
            return Err(Error::GridMismatch);
        }
        let mut d = 0.0f64;
        for i in 0..=2 * self.grid.steps() {
            d = d.max((self.half(i) - other.half(i)).amax());
        }
        Ok(d)
    }

    pub fn constant(grid: TimeGrid, value: DVector<f64>) -> Self {
        Self::from_fn(grid, |_| value.clone()).expect("finite constant")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Fixed-step RK4 over every grid interval.
///
/// `substeps` is asked once per interval (with the state at the interval's
/// starting end) how many RK4 steps to take inside it; odd counts above one
/// are rounded up so the midpoint is hit exactly. With a single step the
/// midpoint comes from cubic Hermite interpolation of the end values and
/// slopes. `post` runs after every step.
pub fn integrate<S, F, N, P>(
    grid: &TimeGrid,
    boundary: S,
    direction: Direction,
    rhs: F,
    substeps: N,
    post: P,
) -> Result<SampledPath<S>>
where
    S: Sample,
    F: Fn(f64, &S) -> S,
    N: Fn(f64, &S) -> usize,
    P: Fn(&mut S),
{
    let steps = grid.steps();
    if !boundary.is_finite() {
        let t = match direction {
            Direction::Forward => 0.0,
            Direction::Backward => grid.horizon(),
        };
        return Err(Error::Divergence { t });
    }
    let mut nodes: Vec<Option<S>> = vec![None; steps + 1];
    let mut mids: Vec<Option<S>> = vec![None; steps];

    let (first, intervals): (usize, Vec<(usize, usize)>) = match direction {
        Direction::Forward => (0, (0..steps).map(|k| (k, k + 1)).collect()),
        Direction::Backward => (steps, (0..steps).rev().map(|k| (k + 1, k)).collect()),
    };

    let mut y = boundary;
    nodes[first] = Some(y.clone());
    let mut f_start = rhs(grid.node(first), &y);

    for (start, end) in intervals {
        let t0 = grid.node(start);
        let t1 = grid.node(end);
        let span = t1 - t0;
        let mut m = substeps(t0, &y).max(1);
        if m > 1 && m % 2 == 1 {
            m += 1;
        }
        let hs = span / m as f64;
        let y_start = y.clone();
        let mut mid_value = None;
        for j in 0..m {
            let t = t0 + span * (j as f64 / m as f64);
            let k1 = if j == 0 { f_start.clone() } else { rhs(t, &y) };
            let k2 = rhs(t + 0.5 * hs, &y.axpy(0.5 * hs, &k1));
            let k3 = rhs(t + 0.5 * hs, &y.axpy(0.5 * hs, &k2));
            let k4 = rhs(t + hs, &y.axpy(hs, &k3));
            let incr = k1.axpy(2.0, &k2).axpy(2.0, &k3).axpy(1.0, &k4);
            let mut next = y.axpy(hs / 6.0, &incr);
            post(&mut next);
            if !next.is_finite() {
                return Err(Error::Divergence { t: t + hs });
            }
            y = next;
            if m > 1 && j + 1 == m / 2 {
                mid_value = Some(y.clone());
            }
        }
        let f_end = rhs(t1, &y);
        let mid = match mid_value {
            Some(v) => v,
            None => y_start
                .lerp(&y, 0.5)
                .axpy(span / 8.0, &f_start.axpy(-1.0, &f_end)),
        };
        mids[start.min(end)] = Some(mid);
        nodes[end] = Some(y.clone());
        f_start = f_end;
    }

    let nodes = nodes.into_iter().map(|v| v.expect("node filled")).collect();
    let mids = mids
        .into_iter()
        .map(|v| v.expect("midpoint filled"))
        .collect();
    SampledPath::new(*grid, nodes, mids)
}

/// RK4 for a matrix ODE with one step per grid interval.
pub fn integrate_matrix_ode<F>(
    rhs: F,
    boundary: DMatrix<f64>,
    direction: Direction,
    grid: &TimeGrid,
) -> Result<MatrixPath>
where
    F: Fn(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    integrate(grid, boundary, direction, rhs, |_, _| 1, |_| {})
}

/// RK4 for a vector ODE with one step per grid interval.
pub fn integrate_vector_ode<F>(
    rhs: F,
    boundary: DVector<f64>,
    direction: Direction,
    grid: &TimeGrid,
) -> Result<Trajectory>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    integrate(grid, boundary, direction, rhs, |_, _| 1, |_| {})
}

pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// State transition matrix of a linear system, stored against one reference
/// time (the origin or the horizon) in both directions.
#[derive(Debug, Clone)]
pub struct Transition {
    /// Φ(t, s) for the reference time s.
    from_reference: MatrixPath,
    /// Φ(s, t) for the reference time s.
    to_reference: MatrixPath,
    reference_at_origin: bool,
}

impl Transition {
    /// Wraps samples of Φ(t, 0), inverting each one.
    pub fn from_origin(path: MatrixPath) -> Result<Self> {
        let grid = *path.grid();
        let invert = |i: usize| -> Result<DMatrix<f64>> {
            let m = path.half(i);
            let t = grid.half_knot(i);
            let condition = condition_number(m);
            if !(condition <= MAX_CONDITION) {
                return Err(Error::IllConditioned { t, condition });
            }
            m.clone()
                .try_inverse()
                .ok_or(Error::IllConditioned { t, condition })
        };
        let nodes = (0..grid.len())
            .map(|k| invert(2 * k))
            .collect::<Result<Vec<_>>>()?;
        let mids = (0..grid.steps())
            .map(|k| invert(2 * k + 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            to_reference: SampledPath::new(grid, nodes, mids)?,
            from_reference: path,
            reference_at_origin: true,
        })
    }

    /// Wraps samples of Φ(t, T) and Φ(T, t), integrated side by side.
    pub fn from_horizon(towards: MatrixPath, back: MatrixPath) -> Result<Self> {
        if towards.grid() != back.grid() {
            return Err(Error::GridMismatch);
        }
        let out = Self {
            from_reference: towards,
            to_reference: back,
            reference_at_origin: false,
        };
        if !(out.round_trip_error() <= MAX_ROUND_TRIP) {
            return Err(Error::IllConditioned {
                t: 0.0,
                condition: condition_number(out.from_reference.first()),
            });
        }
        Ok(out)
    }

    pub fn grid(&self) -> &TimeGrid {
        self.from_reference.grid()
    }

    pub fn dim(&self) -> usize {
        self.from_reference.first().nrows()
    }

    /// Φ(t_a, t_b) for interleaved knot indices `a`, `b`.
    pub fn between_knots(&self, a: usize, b: usize) -> DMatrix<f64> {
        self.from_reference.half(a) * self.to_reference.half(b)
    }

    /// Φ(t_k, t_j) for node indices.
    pub fn between(&self, k: usize, j: usize) -> DMatrix<f64> {
        self.between_knots(2 * k, 2 * j)
    }

    /// Φ(t, 0) at interleaved knot `a`.
    pub fn from_origin_at(&self, a: usize) -> DMatrix<f64> {
        if self.reference_at_origin {
            self.from_reference.half(a).clone()
        } else {
            self.between_knots(a, 0)
        }
    }

    /// Φ(t, T) at interleaved knot `a`.
    pub fn to_horizon_at(&self, a: usize) -> DMatrix<f64> {
        if self.reference_at_origin {
            self.between_knots(a, 2 * self.grid().steps())
        } else {
            self.from_reference.half(a).clone()
        }
    }

    /// Φ(T, t) at interleaved knot `a`.
    pub fn from_horizon_at(&self, a: usize) -> DMatrix<f64> {
        if self.reference_at_origin {
            self.between_knots(2 * self.grid().steps(), a)
        } else {
            self.to_reference.half(a).clone()
        }
    }

    /// Largest entry of `Φ(t, s) Φ(s, t) - I` over all knots. The two factors
    /// are integrated separately, so this bounds the error that products of
    /// stored samples carry; it grows with the spread of the decay rates.
    pub fn round_trip_error(&self) -> f64 {
        let n = self.dim();
        let id = DMatrix::<f64>::identity(n, n);
        (0..=2 * self.grid().steps())
            .map(|a| (self.from_reference.half(a) * self.to_reference.half(a) - &id).amax())
            .fold(0.0, f64::max)
    }

    /// Samples of Φ(t, 0).
    pub fn origin_path(&self) -> MatrixPath {
        let grid = *self.grid();
        SampledPath::from_half_knots(grid, |a| self.from_origin_at(a)).expect("finite products")
    }
}

/// Transition matrix of `d/dt Φ = Π(t) Φ` with `Φ(0, 0) = I`.
pub fn transition_path<F>(field: F, grid: &TimeGrid) -> Result<Transition>
where
    F: Fn(f64) -> DMatrix<f64>,
{
    let n = field(0.0).nrows();
    let path = integrate_matrix_ode(
        |t, phi| field(t) * phi,
        DMatrix::identity(n, n),
        Direction::Forward,
        grid,
    )?;
    Transition::from_origin(path)
}

/// Composite trapezoid rule over the nodes of a path.
pub fn quad_trapezoid<S: Sample>(path: &SampledPath<S>) -> S {
    let h = path.grid().step();
    let nodes = path.nodes();
    let mut acc = nodes[0].axpy(1.0, &nodes[nodes.len() - 1]).scale(0.5);
    for v in &nodes[1..nodes.len() - 1] {
        acc = acc.axpy(1.0, v);
    }
    acc.scale(h)
}

/// Trapezoid rule between node indices `a` and `b`; reversed order negates.
pub fn quad_trapezoid_between<S: Sample>(path: &SampledPath<S>, a: usize, b: usize) -> Result<S> {
    let last = path.grid().steps();
    if a > last || b > last {
        return Err(Error::invalid(
            "node",
            format!("indices must be at most {last}"),
        ));
    }
    let (lo, hi, sign) = if a <= b { (a, b, 1.0) } else { (b, a, -1.0) };
    let h = path.grid().step();
    let nodes = path.nodes();
    let mut acc = nodes[lo].scale(0.0);
    for k in lo..hi {
        acc = acc.axpy(0.5 * h, &nodes[k].axpy(1.0, &nodes[k + 1]));
    }
    Ok(acc.scale(sign))
}

/// Composite Simpson rule using node and midpoint samples.
pub fn quad_simpson<S: Sample>(path: &SampledPath<S>) -> S {
    let h = path.grid().step();
    let nodes = path.nodes();
    let mids = path.mids();
    let mut acc = nodes[0].axpy(1.0, &nodes[nodes.len() - 1]);
    for v in &nodes[1..nodes.len() - 1] {
        acc = acc.axpy(2.0, v);
    }
    for v in mids {
        acc = acc.axpy(4.0, v);
    }
    acc.scale(h / 6.0)
}

/// Running trapezoid integral from t = 0 at each node.
pub fn cumulative_trapezoid<S: Sample>(path: &SampledPath<S>) -> Vec<S> {
    let h = path.grid().step();
    let nodes = path.nodes();
    let mut out = Vec::with_capacity(nodes.len());
    let mut acc = nodes[0].scale(0.0);
    out.push(acc.clone());
    for w in nodes.windows(2) {
        acc = acc.axpy(0.5 * h, &w[0].axpy(1.0, &w[1]));
        out.push(acc.clone());
    }
    out
}
