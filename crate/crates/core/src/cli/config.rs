//! Run configuration as read from JSON.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::equilibrium_det::PopulationStates;
use crate::equilibrium_stoch::{
    Distribution, GaussianComponent, PopulationSpec, DEFAULT_MC_SAMPLES,
};
use crate::error::{Error, Result};
use crate::hetero::{AgentType, HeteroProblem, TypeDistribution};
use crate::model::{CostSpec, Dynamics, Problem, DEFAULT_GRID_STEPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Free-form description carried into the report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub dynamics: DynamicsConfig,
    pub cost: CostConfig,
    pub destinations: Vec<Vec<f64>>,
    pub population: PopulationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hetero: Option<HeteroConfig>,
    #[serde(default)]
    pub solver: SolverConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    pub n: usize,
    pub m: usize,
    /// Row-major `n × n`.
    #[serde(rename = "A")]
    pub drift: Vec<f64>,
    /// Row-major `n × m`.
    #[serde(rename = "B")]
    pub input: Vec<f64>,
}

fn default_steps() -> usize {
    DEFAULT_GRID_STEPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub q: f64,
    pub r: f64,
    #[serde(rename = "M")]
    pub terminal: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub grid_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopulationKind {
    Gaussian,
    Mixture,
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentConfig {
    pub mean: Vec<f64>,
    /// Row-major `n × n`.
    pub cov: Vec<f64>,
}

fn default_mc() -> usize {
    DEFAULT_MC_SAMPLES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationConfig {
    pub kind: PopulationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<Vec<ComponentConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<Vec<Vec<f64>>>,
    /// Size of the finite population drawn for deterministic runs and
    /// simulations.
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    #[serde(default)]
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeteroConfig {
    pub types: Vec<TypeConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypeConfig {
    #[serde(rename = "A")]
    pub drift: Vec<f64>,
    #[serde(rename = "B")]
    pub input: Vec<f64>,
    /// Terminal weight per destination.
    #[serde(rename = "M")]
    pub terminal: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    /// Pick by mode and destination count.
    #[default]
    Auto,
    Scan,
    Enumerate,
    Iterate,
    Monotone,
    Bisection,
    Broyden,
    Picard,
}

fn default_seeds() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default)]
    pub method: SolverMethod,
    /// Number of random starts, or of RNG seeds for ε-Nash runs.
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub damping: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice_cap: Option<u64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolverMethod::Auto,
            seeds: default_seeds(),
            tol: None,
            max_iter: None,
            damping: None,
            lattice_cap: None,
        }
    }
}

/// Parses a config, naming the offending field on failure.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." {
            "config".to_string()
        } else {
            path
        };
        Error::invalid(field, e.into_inner().to_string())
    })?;
    config.validate()?;
    Ok(config)
}

fn vector(field: &str, xs: &[f64], n: usize) -> Result<DVector<f64>> {
    if xs.len() != n {
        return Err(Error::invalid(
            field,
            format!("expected {n} entries, got {}", xs.len()),
        ));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(field, "entries must be finite"));
    }
    Ok(DVector::from_row_slice(xs))
}

fn square(field: &str, xs: &[f64], n: usize) -> Result<DMatrix<f64>> {
    if xs.len() != n * n {
        return Err(Error::invalid(
            field,
            format!("expected {} entries, got {}", n * n, xs.len()),
        ));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(field, "entries must be finite"));
    }
    Ok(DMatrix::from_row_slice(n, n, xs))
}

fn component(field: &str, c: &ComponentConfig, n: usize) -> Result<GaussianComponent> {
    GaussianComponent::new(
        vector(&format!("{field}.mean"), &c.mean, n)?,
        square(&format!("{field}.cov"), &c.cov, n)?,
    )
    .map_err(|e| match e {
        Error::InvalidInput { message, .. } => Error::invalid(format!("{field}.cov"), message),
        other => other,
    })
}

impl RunConfig {
    /// Builds every model piece once so that errors surface before any work.
    pub fn validate(&self) -> Result<()> {
        self.problem()?;
        self.population()?;
        if self.hetero.is_some() {
            self.hetero_problem()?;
        }
        let s = &self.solver;
        if let Some(t) = s.tol {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::invalid("solver.tol", "must be finite and positive"));
            }
        }
        if let Some(d) = s.damping {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::invalid("solver.damping", "must lie in (0, 1]"));
            }
        }
        if s.max_iter == Some(0) {
            return Err(Error::invalid("solver.max_iter", "must be positive"));
        }
        if self.population.mc_samples == 0 {
            return Err(Error::invalid("population.mc_samples", "must be positive"));
        }
        Ok(())
    }

    pub fn dynamics(&self) -> Result<Dynamics> {
        let d = &self.dynamics;
        Dynamics::from_rows(d.n, d.m, &d.drift, &d.input)
    }

    pub fn problem(&self) -> Result<Problem> {
        let n = self.dynamics.n;
        let destinations = self
            .destinations
            .iter()
            .enumerate()
            .map(|(j, p)| vector(&format!("destinations[{j}]"), p, n))
            .collect::<Result<Vec<_>>>()?;
        let c = &self.cost;
        let cost = CostSpec::new(c.q, c.r, c.terminal, c.horizon, destinations)?;
        Problem::new(self.dynamics()?, cost, c.grid_steps)
            .map_err(|e| Error::invalid("cost.grid_steps", e.to_string()))
    }

    pub fn population(&self) -> Result<PopulationSpec> {
        let p = &self.population;
        let n = self.dynamics.n;
        let missing = |f: &str| {
            Error::invalid(
                format!("population.{f}"),
                format!("required for kind {:?}", p.kind),
            )
        };
        match p.kind {
            PopulationKind::Gaussian => {
                let c = ComponentConfig {
                    mean: p.mean.clone().ok_or_else(|| missing("mean"))?,
                    cov: p.cov.clone().ok_or_else(|| missing("cov"))?,
                };
                let g = component("population", &c, n)?;
                PopulationSpec::new(Distribution::Gaussian(g), p.mc_samples, p.rng_seed)
            }
            PopulationKind::Mixture => {
                let weights = p.weights.clone().ok_or_else(|| missing("weights"))?;
                let comps = p.components.as_ref().ok_or_else(|| missing("components"))?;
                let components = comps
                    .iter()
                    .enumerate()
                    .map(|(i, c)| component(&format!("population.components[{i}]"), c, n))
                    .collect::<Result<Vec<_>>>()?;
                PopulationSpec::new(
                    Distribution::Mixture {
                        weights,
                        components,
                    },
                    p.mc_samples,
                    p.rng_seed,
                )
            }
            PopulationKind::Empirical => {
                let states = p.states.as_ref().ok_or_else(|| missing("states"))?;
                let states = states
                    .iter()
                    .enumerate()
                    .map(|(i, s)| vector(&format!("population.states[{i}]"), s, n))
                    .collect::<Result<Vec<_>>>()?;
                PopulationSpec::empirical(PopulationStates::new(states)?)
            }
        }
    }

    /// The finite population: the listed states, or `N` draws.
    pub fn finite_population(&self, size: Option<usize>) -> Result<PopulationStates> {
        if let (PopulationKind::Empirical, None) = (self.population.kind, size) {
            let pop = self.population()?;
            if let Distribution::Empirical(states) = pop.distribution() {
                return Ok(states.clone());
            }
        }
        let n = size.or(self.population.size).ok_or_else(|| {
            Error::invalid("population.N", "a finite population size is required")
        })?;
        self.population()?
            .sample_states(n, self.population.rng_seed)
    }

    pub fn hetero_problem(&self) -> Result<HeteroProblem> {
        let problem = self.problem()?;
        let Some(h) = &self.hetero else {
            return Ok(HeteroProblem::from_uniform(&problem));
        };
        let (n, m) = (self.dynamics.n, self.dynamics.m);
        let types = h
            .types
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let field = format!("hetero.types[{i}]");
                let dynamics = Dynamics::from_rows(n, m, &t.drift, &t.input)
                    .map_err(|e| Error::invalid(field.clone(), e.to_string()))?;
                let agent = AgentType::new(dynamics, t.terminal.clone())
                    .map_err(|e| Error::invalid(format!("{field}.M"), e.to_string()))?;
                if agent.terminal_weights.len() != problem.num_destinations() {
                    return Err(Error::invalid(
                        format!("{field}.M"),
                        "needs one weight per destination",
                    ));
                }
                Ok((agent, t.weight))
            })
            .collect::<Result<Vec<_>>>()?;
        let types = TypeDistribution::new(types)
            .map_err(|e| Error::invalid("hetero.types", e.to_string()))?;
        HeteroProblem::new(
            types,
            problem.cost.tracking_weight,
            problem.cost.control_weight,
            problem.cost.destinations.clone(),
            problem.grid,
        )
    }

    /// Copy with one cost coefficient replaced.
    pub fn with_parameter(&self, param: SweepParam, value: f64) -> Self {
        let mut c = self.clone();
        match param {
            SweepParam::Q => c.cost.q = value,
            SweepParam::R => c.cost.r = value,
            SweepParam::M => c.cost.terminal = value,
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "q")]
    Q,
    #[serde(rename = "r")]
    R,
    #[serde(rename = "M")]
    M,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q" => Ok(Self::Q),
            "r" => Ok(Self::R),
            "M" => Ok(Self::M),
            _ => Err(Error::invalid(
                "param",
                format!("expected q, r or M, got {s:?}"),
            )),
        }
    }
}
