//! Finite populations playing the decentralized strategies.
//!
//! Every agent tracks the infinite-population path and heads to its cheapest
//! destination. The realized mean then differs from the tracked path by
//! sampling noise, and a unilateral deviation can gain a little. That gain is
//! measured exactly: with the others frozen, `x_i - x̄ = (1 - 1/N)(x_i - x̄₋ᵢ)`,
//! so the best response is a tracking problem with weight `q (1 - 1/N)²`
//! towards the mean of the others.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::equilibrium_det::PopulationStates;
use crate::equilibrium_stoch::PopulationSpec;
use crate::error::{Error, Result};
use crate::hetero::{AgentType, HeteroProblem};
use crate::model::Problem;
use crate::numerics::{quad_simpson, SampledPath, Trajectory};
use crate::tracking::{sweep, TrackingSolution, Weights};

const CHUNK: usize = 256;
const TYPE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Deviation gains below this are treated as rounding.
pub const DEVIATION_TOLERANCE: f64 = 1e-6;

/// Optimal feedbacks of one agent type against one tracked path. Destination
/// `j` lives in column `slot[j].1` of `solutions[slot[j].0]`.
struct Policy {
    solutions: Vec<TrackingSolution>,
    slot: Vec<(usize, usize)>,
}

impl Policy {
    fn solve(
        problem: &HeteroProblem,
        agent: &AgentType,
        tracking: f64,
        reference: Option<&Trajectory>,
    ) -> Result<Self> {
        let weights = |m: f64| Weights {
            tracking,
            control: problem.control_weight,
            terminal: m,
        };
        let ms = &agent.terminal_weights;
        let l = problem.num_destinations();
        if ms.iter().all(|&m| m == ms[0]) {
            // One joint sweep shares the Riccati solution across destinations.
            let s = sweep(
                &agent.dynamics,
                weights(ms[0]),
                &problem.destinations,
                reference,
                &problem.grid,
            )?;
            return Ok(Self {
                solutions: vec![s],
                slot: (0..l).map(|j| (0, j)).collect(),
            });
        }
        let solutions = problem
            .destinations
            .iter()
            .zip(ms)
            .map(|(p, &m)| {
                sweep(
                    &agent.dynamics,
                    weights(m),
                    std::slice::from_ref(p),
                    reference,
                    &problem.grid,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            solutions,
            slot: (0..l).map(|j| (j, 0)).collect(),
        })
    }

    fn cost(&self, j: usize, x0: &DVector<f64>) -> f64 {
        let (s, k) = self.slot[j];
        self.solutions[s].optimal_cost(k, x0)
    }

    /// Cheapest destination, lowest index on ties.
    fn choose(&self, x0: &DVector<f64>) -> (usize, f64) {
        let mut best = (0, self.cost(0, x0));
        for j in 1..self.slot.len() {
            let c = self.cost(j, x0);
            if c < best.1 {
                best = (j, c);
            }
        }
        best
    }

    fn rollout(&self, j: usize, x0: &DVector<f64>) -> (Trajectory, Trajectory) {
        let (s, k) = self.slot[j];
        let sol = &self.solutions[s];
        let path = sol.trajectory(k, x0);
        let control = sol.controls_along(k, &path);
        (path, control)
    }
}

/// One member of a finite population.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub state: DVector<f64>,
    /// Index into the problem's type list.
    pub kind: usize,
}

pub fn uniform_agents(states: &PopulationStates) -> Vec<Agent> {
    states
        .states()
        .iter()
        .map(|s| Agent {
            state: s.clone(),
            kind: 0,
        })
        .collect()
}

/// Draws `n` agents. Agent `i` only depends on `(seed, i)`, so a larger
/// population extends a smaller one.
pub fn draw_agents(
    problem: &HeteroProblem,
    population: &PopulationSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<Agent>> {
    if population.dim() != problem.state_dim() {
        return Err(Error::invalid(
            "population.mean",
            "dimension differs from the dynamics",
        ));
    }
    let states = population.sample_states(n, seed)?;
    let weights = problem.types.weights();
    Ok(states
        .states()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let kind = if weights.len() == 1 {
                0
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ TYPE_SALT);
                rng.set_stream(i as u64);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                weights
                    .iter()
                    .position(|w| {
                        acc += w;
                        u < acc
                    })
                    .unwrap_or(weights.len() - 1)
            };
            Agent {
                state: s.clone(),
                kind,
            }
        })
        .collect())
}

/// Realized cost of a path: Simpson quadrature of the running cost over
/// nodes and midpoints, plus the cheapest terminal penalty.
#[allow(clippy::too_many_arguments)]
pub fn realized_cost(
    path: &Trajectory,
    control: &Trajectory,
    reference: Option<&Trajectory>,
    tracking: f64,
    control_weight: f64,
    terminal_weights: &[f64],
    destinations: &[DVector<f64>],
) -> f64 {
    let running = SampledPath::from_half_knots(*path.grid(), |a| {
        let track = match reference {
            Some(r) if tracking != 0.0 => tracking * (path.half(a) - r.half(a)).norm_squared(),
            _ => 0.0,
        };
        0.5 * (track + control_weight * control.half(a).norm_squared())
    });
    let running = match running {
        Ok(p) => quad_simpson(&p),
        Err(_) => return f64::INFINITY,
    };
    let end = path.last();
    let terminal = destinations
        .iter()
        .zip(terminal_weights)
        .map(|(p, m)| 0.5 * m * (end - p).norm_squared())
        .fold(f64::INFINITY, f64::min);
    running + terminal
}

#[derive(Debug, Clone)]
pub struct AgentOutcome {
    pub destination: usize,
    /// Realized cost against the realized mean.
    pub cost: f64,
    pub diverged: bool,
    pub path: Option<Trajectory>,
    pub control: Option<Trajectory>,
}

#[derive(Debug, Clone)]
pub struct SimulationResult {
    pub agents: Vec<AgentOutcome>,
    /// Average of the agent paths, summed in agent order.
    pub mean: Trajectory,
    pub counts: Vec<usize>,
    /// `‖x̄_N - x̂‖∞` over nodes and midpoints.
    pub gap: f64,
}

impl SimulationResult {
    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn total_cost(&self) -> f64 {
        self.agents.iter().map(|a| a.cost).sum()
    }
}

fn check_agents(problem: &HeteroProblem, agents: &[Agent]) -> Result<()> {
    if agents.is_empty() {
        return Err(Error::invalid(
            "population.N",
            "at least one agent is required",
        ));
    }
    let n = problem.state_dim();
    for (i, a) in agents.iter().enumerate() {
        if a.state.len() != n {
            return Err(Error::invalid(
                format!("agents[{i}]"),
                "state dimension differs from the dynamics",
            ));
        }
        if a.kind >= problem.types.len() {
            return Err(Error::invalid(format!("agents[{i}]"), "unknown agent type"));
        }
    }
    Ok(())
}

/// Rolls out every agent's closed loop against `reference`. With
/// `keep_paths = false` the paths are recomputed for the cost pass instead of
/// stored, which keeps memory flat for large populations.
pub fn simulate_population(
    problem: &HeteroProblem,
    agents: &[Agent],
    reference: &Trajectory,
    keep_paths: bool,
) -> Result<SimulationResult> {
    check_agents(problem, agents)?;
    let policies = problem
        .types
        .types()
        .iter()
        .map(|t| Policy::solve(problem, t, problem.tracking_weight, Some(reference)))
        .collect::<Result<Vec<_>>>()?;
    let choices: Vec<usize> = agents
        .par_iter()
        .map(|a| policies[a.kind].choose(&a.state).0)
        .collect();
    let rollout = |i: usize| policies[agents[i].kind].rollout(choices[i], &agents[i].state);

    let grid = problem.grid;
    let knots = 2 * grid.steps() + 1;
    let mut sum = vec![DVector::zeros(problem.state_dim()); knots];
    let mut kept = Vec::new();
    for start in (0..agents.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(agents.len());
        let chunk: Vec<(Trajectory, Trajectory)> =
            (start..end).into_par_iter().map(rollout).collect();
        for (path, _) in &chunk {
            for (a, acc) in sum.iter_mut().enumerate() {
                *acc += path.half(a);
            }
        }
        if keep_paths {
            kept.extend(chunk);
        }
    }
    let count = agents.len() as f64;
    let mean = SampledPath::from_half_knots(grid, |a| &sum[a] / count)?;

    let cost_of = |i: usize, path: &Trajectory, control: &Trajectory| {
        realized_cost(
            path,
            control,
            Some(&mean),
            problem.tracking_weight,
            problem.control_weight,
            &problem.types.types()[agents[i].kind].terminal_weights,
            &problem.destinations,
        )
    };
    let outcomes: Vec<AgentOutcome> = if keep_paths {
        kept.into_par_iter()
            .enumerate()
            .map(|(i, (path, control))| {
                let cost = cost_of(i, &path, &control);
                AgentOutcome {
                    destination: choices[i],
                    cost,
                    diverged: !cost.is_finite(),
                    path: Some(path),
                    control: Some(control),
                }
            })
            .collect()
    } else {
        (0..agents.len())
            .into_par_iter()
            .map(|i| {
                let (path, control) = rollout(i);
                let cost = cost_of(i, &path, &control);
                AgentOutcome {
                    destination: choices[i],
                    cost,
                    diverged: !cost.is_finite(),
                    path: None,
                    control: None,
                }
            })
            .collect()
    };
    let mut counts = vec![0; problem.num_destinations()];
    for &c in &choices {
        counts[c] += 1;
    }
    let gap = mean.sup_distance(reference)?;
    Ok(SimulationResult {
        agents: outcomes,
        mean,
        counts,
        gap,
    })
}

pub fn simulate_uniform(
    problem: &Problem,
    states: &PopulationStates,
    reference: &Trajectory,
) -> Result<SimulationResult> {
    simulate_population(
        &HeteroProblem::from_uniform(problem),
        &uniform_agents(states),
        reference,
        true,
    )
}

/// Mean of everyone but agent `i`; `None` for a single agent.
pub fn others_mean(sim: &SimulationResult, i: usize) -> Result<Option<Trajectory>> {
    let n = sim.len();
    if n < 2 {
        return Ok(None);
    }
    let own = sim.agents[i]
        .path
        .as_ref()
        .ok_or_else(|| Error::invalid("simulation", "agent paths were not kept"))?;
    let scale = n as f64;
    Ok(Some(SampledPath::from_half_knots(*sim.mean.grid(), |a| {
        (sim.mean.half(a) * scale - own.half(a)) / (scale - 1.0)
    })?))
}

#[derive(Debug, Clone)]
pub struct BestResponse {
    pub destination: usize,
    pub path: Trajectory,
    pub control: Trajectory,
    /// Realized cost of the deviation, by quadrature.
    pub cost: f64,
    /// The same cost from the value function at t = 0.
    pub formula_cost: f64,
    /// Realized cost of the equilibrium strategy in the same terms.
    pub equilibrium_cost: f64,
}

impl BestResponse {
    /// `J_i(u_i*, u*₋ᵢ) - J_i(BR_i, u*₋ᵢ)`, unclipped.
    pub fn gain(&self) -> f64 {
        self.equilibrium_cost - self.cost
    }
}

/// Exact best response of agent `i` with everyone else frozen on their
/// simulated paths. `sim` must keep paths.
pub fn best_response(
    problem: &HeteroProblem,
    agents: &[Agent],
    sim: &SimulationResult,
    i: usize,
) -> Result<BestResponse> {
    if i >= sim.len() || sim.len() != agents.len() {
        return Err(Error::invalid(
            "agent",
            "index outside the simulated population",
        ));
    }
    let n = sim.len() as f64;
    let tracking = problem.tracking_weight * (1.0 - 1.0 / n).powi(2);
    let others = others_mean(sim, i)?;
    let agent = &problem.types.types()[agents[i].kind];
    let policy = Policy::solve(problem, agent, tracking, others.as_ref())?;
    let x0 = &agents[i].state;
    let (destination, formula_cost) = policy.choose(x0);
    let (path, control) = policy.rollout(destination, x0);
    let price = |p: &Trajectory, u: &Trajectory| {
        realized_cost(
            p,
            u,
            others.as_ref(),
            tracking,
            problem.control_weight,
            &agent.terminal_weights,
            &problem.destinations,
        )
    };
    let own = &sim.agents[i];
    let (Some(own_path), Some(own_control)) = (&own.path, &own.control) else {
        return Err(Error::invalid("simulation", "agent paths were not kept"));
    };
    let equilibrium_cost = price(own_path, own_control);
    let cost = price(&path, &control);
    Ok(BestResponse {
        destination,
        path,
        control,
        cost,
        formula_cost,
        equilibrium_cost,
    })
}

#[derive(Debug, Clone)]
pub struct DeviationReport {
    pub size: usize,
    pub seed: u64,
    /// `max_i ε_i`, with rounding-level negatives clipped to zero.
    pub epsilon: f64,
    /// Raw per-agent gains.
    pub gains: Vec<f64>,
    pub min_gain: f64,
    pub gap: f64,
    pub counts: Vec<usize>,
}

pub fn deviation_report(
    problem: &HeteroProblem,
    agents: &[Agent],
    reference: &Trajectory,
    seed: u64,
) -> Result<DeviationReport> {
    let sim = simulate_population(problem, agents, reference, true)?;
    let gains = (0..agents.len())
        .into_par_iter()
        .map(|i| best_response(problem, agents, &sim, i).map(|b| b.gain()))
        .collect::<Result<Vec<_>>>()?;
    let max = gains.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_gain = gains.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(DeviationReport {
        size: agents.len(),
        seed,
        epsilon: max.max(0.0),
        gains,
        min_gain,
        gap: sim.gap,
        counts: sim.counts,
    })
}

/// ε_N for every population size and seed, all against the same
/// infinite-population path.
pub fn epsilon_nash(
    problem: &HeteroProblem,
    population: &PopulationSpec,
    reference: &Trajectory,
    sizes: &[usize],
    seeds: &[u64],
) -> Result<Vec<DeviationReport>> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(
            "sizes",
            "must be a non-empty increasing list",
        ));
    }
    let mut out = Vec::with_capacity(sizes.len() * seeds.len());
    for &n in sizes {
        for &seed in seeds {
            let agents = draw_agents(problem, population, n, seed)?;
            out.push(deviation_report(problem, &agents, reference, seed)?);
        }
    }
    Ok(out)
}

/// Median ε_N for each size, in the order of `sizes`.
pub fn median_by_size(reports: &[DeviationReport], sizes: &[usize]) -> Vec<f64> {
    sizes
        .iter()
        .map(|&n| {
            median(
                reports
                    .iter()
                    .filter(|r| r.size == n)
                    .map(|r| r.epsilon)
                    .collect(),
            )
        })
        .collect()
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}
