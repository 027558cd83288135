//! Problem data shared by every solver: linear dynamics, cost weights and
//! destinations, and the time grid.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::TimeGrid;

pub const DEFAULT_GRID_STEPS: usize = 800;

/// `dx/dt = A x + B u`.
#[derive(Debug, Clone)]
pub struct Dynamics {
    drift: DMatrix<f64>,
    input: DMatrix<f64>,
    input_gram: DMatrix<f64>,
}

impl Dynamics {
    pub fn new(drift: DMatrix<f64>, input: DMatrix<f64>) -> Result<Self> {
        let n = drift.nrows();
        if n == 0 || drift.ncols() != n {
            return Err(Error::invalid(
                "dynamics.A",
                "must be a non-empty square matrix",
            ));
        }
        if input.nrows() != n || input.ncols() == 0 {
            return Err(Error::invalid(
                "dynamics.B",
                format!("must have {n} rows and at least one column"),
            ));
        }
        if drift.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dynamics.A", "entries must be finite"));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dynamics.B", "entries must be finite"));
        }
        let input_gram = &input * input.transpose();
        Ok(Self {
            drift,
            input,
            input_gram,
        })
    }

    /// Row-major construction.
    pub fn from_rows(n: usize, m: usize, drift: &[f64], input: &[f64]) -> Result<Self> {
        if drift.len() != n * n {
            return Err(Error::invalid(
                "dynamics.A",
                format!("expected {} entries, got {}", n * n, drift.len()),
            ));
        }
        if input.len() != n * m {
            return Err(Error::invalid(
                "dynamics.B",
                format!("expected {} entries, got {}", n * m, input.len()),
            ));
        }
        Self::new(
            DMatrix::from_row_slice(n, n, drift),
            DMatrix::from_row_slice(n, m, input),
        )
    }

    pub fn scalar(drift: f64, input: f64) -> Self {
        Self::from_rows(1, 1, &[drift], &[input]).expect("finite scalar dynamics")
    }

    pub fn state_dim(&self) -> usize {
        self.drift.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.input.ncols()
    }

    pub fn drift(&self) -> &DMatrix<f64> {
        &self.drift
    }

    pub fn input(&self) -> &DMatrix<f64> {
        &self.input
    }

    /// `B Bᵀ`
    pub fn input_gram(&self) -> &DMatrix<f64> {
        &self.input_gram
    }

    /// Kalman rank test on `[B, AB, …, A^{n-1}B]`, with a rank tolerance
    /// relative to the largest singular value.
    pub fn is_controllable(&self) -> bool {
        let n = self.state_dim();
        let m = self.control_dim();
        let mut k = DMatrix::zeros(n, n * m);
        let mut block = self.input.clone();
        for i in 0..n {
            k.view_mut((0, i * m), (n, m)).copy_from(&block);
            block = &self.drift * block;
        }
        let sv = k.singular_values();
        let top = sv.max();
        top > 0.0 && sv.iter().filter(|&&s| s > top * 1e-10).count() == n
    }
}

/// Running cost `q/2 |x - x̄|² + r/2 |u|²` plus `M/2 min_j |x(T) - p_j|²`.
#[derive(Debug, Clone)]
pub struct CostSpec {
    pub tracking_weight: f64,
    pub control_weight: f64,
    pub terminal_weight: f64,
    pub horizon: f64,
    pub destinations: Vec<DVector<f64>>,
}

impl CostSpec {
    pub fn new(
        tracking_weight: f64,
        control_weight: f64,
        terminal_weight: f64,
        horizon: f64,
        destinations: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let spec = Self {
            tracking_weight,
            control_weight,
            terminal_weight,
            horizon,
            destinations,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tracking_weight.is_finite() && self.tracking_weight >= 0.0) {
            return Err(Error::invalid("cost.q", "must be finite and non-negative"));
        }
        if !(self.control_weight.is_finite() && self.control_weight > 0.0) {
            return Err(Error::invalid("cost.r", "must be finite and positive"));
        }
        if !(self.terminal_weight.is_finite() && self.terminal_weight > 0.0) {
            return Err(Error::invalid("cost.M", "must be finite and positive"));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::invalid("cost.T", "must be finite and positive"));
        }
        if self.destinations.is_empty() {
            return Err(Error::invalid(
                "destinations",
                "at least one destination is required",
            ));
        }
        let n = self.destinations[0].len();
        for (j, p) in self.destinations.iter().enumerate() {
            if p.len() != n || n == 0 {
                return Err(Error::invalid(
                    format!("destinations[{j}]"),
                    "dimension mismatch",
                ));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(
                    format!("destinations[{j}]"),
                    "entries must be finite",
                ));
            }
            for (i, other) in self.destinations[..j].iter().enumerate() {
                if other == p {
                    return Err(Error::invalid(
                        format!("destinations[{j}]"),
                        format!("duplicates destinations[{i}]"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn num_destinations(&self) -> usize {
        self.destinations.len()
    }

    /// `Σ_j w_j p_j` for a point of the simplex.
    pub fn weighted_destination(&self, split: &[f64]) -> DVector<f64> {
        let n = self.destinations[0].len();
        let mut out = DVector::zeros(n);
        for (w, p) in split.iter().zip(&self.destinations) {
            out += p * *w;
        }
        out
    }
}

/// Dynamics, cost and grid, checked for mutual consistency.
#[derive(Debug, Clone)]
pub struct Problem {
    pub dynamics: Dynamics,
    pub cost: CostSpec,
    pub grid: TimeGrid,
}

impl Problem {
    pub fn new(dynamics: Dynamics, cost: CostSpec, steps: usize) -> Result<Self> {
        cost.validate()?;
        let n = dynamics.state_dim();
        for (j, p) in cost.destinations.iter().enumerate() {
            if p.len() != n {
                return Err(Error::invalid(
                    format!("destinations[{j}]"),
                    format!("expected dimension {n}, got {}", p.len()),
                ));
            }
        }
        let grid = TimeGrid::new(cost.horizon, steps)?;
        Ok(Self {
            dynamics,
            cost,
            grid,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn num_destinations(&self) -> usize {
        self.cost.num_destinations()
    }

    pub fn with_cost(&self, cost: CostSpec) -> Result<Self> {
        Self::new(self.dynamics.clone(), cost, self.grid.steps())
    }
}
