#![allow(dead_code)]

use ccmfg::equilibrium_det::{PopulationStates, UniformModel};
use ccmfg::model::{CostSpec, Dynamics, Problem};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(xs)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Lightly damped planar dynamics driven through the second state.
pub fn planar_dynamics() -> Dynamics {
    Dynamics::from_rows(2, 1, &[0.0, 1.0, 0.02, -0.3], &[0.0, 0.3]).unwrap()
}

pub fn planar_destinations() -> Vec<DVector<f64>> {
    vec![v(&[-3.0, -1.0]), v(&[-2.0, 1.0]), v(&[0.0, 4.0])]
}

pub fn planar_problem(q: f64, r: f64, m: f64, t: f64, steps: usize) -> Problem {
    let cost = CostSpec::new(q, r, m, t, planar_destinations()).unwrap();
    Problem::new(planar_dynamics(), cost, steps).unwrap()
}

/// Single integrator choosing between -1 and +1.
pub fn scalar_binary(q: f64, r: f64, m: f64, t: f64, steps: usize) -> Problem {
    let cost = CostSpec::new(q, r, m, t, vec![v(&[-1.0]), v(&[1.0])]).unwrap();
    Problem::new(Dynamics::scalar(0.0, 1.0), cost, steps).unwrap()
}

pub fn random_states(rng: &mut ChaCha8Rng, n: usize, dim: usize, spread: f64) -> PopulationStates {
    PopulationStates::new(
        (0..n)
            .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-spread..spread)))
            .collect(),
    )
    .unwrap()
}

/// A random scalar two-destination problem.
pub fn random_scalar_binary(rng: &mut ChaCha8Rng, steps: usize) -> Problem {
    let a = rng.random_range(-1.0..1.0);
    let b = rng.random_range(0.3..2.0);
    let p1 = rng.random_range(-3.0..3.0);
    let p2 = p1 + rng.random_range(0.2..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let cost = CostSpec::new(
        rng.random_range(0.0..4.0),
        rng.random_range(0.2..3.0),
        rng.random_range(1.0..50.0),
        rng.random_range(0.3..3.0),
        vec![v(&[p1]), v(&[p2])],
    )
    .unwrap();
    Problem::new(Dynamics::scalar(a, b), cost, steps).unwrap()
}

/// A random planar two-destination problem with a positive threshold slope
/// in most draws.
pub fn random_planar_binary(rng: &mut ChaCha8Rng, steps: usize) -> Problem {
    let drift: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let input = [rng.random_range(-1.0..1.0), rng.random_range(0.3..1.0)];
    let dynamics = Dynamics::from_rows(2, 1, &drift, &input).unwrap();
    let p1 = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
    let p2 = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
    let cost = CostSpec::new(
        rng.random_range(0.0..3.0),
        rng.random_range(0.3..2.0),
        rng.random_range(2.0..40.0),
        rng.random_range(0.5..2.5),
        vec![p1, p2],
    )
    .unwrap();
    Problem::new(dynamics, cost, steps).unwrap()
}

/// Gaussian mean placing the binary threshold at mid-split, so the split map
/// has an interior crossing.
pub fn centred_mean(model: &UniformModel) -> DVector<f64> {
    let g = &model.geometry;
    let p = model.destinations();
    let c0 = g.offsets[0][1] + g.target_coupling[0][1].dot(&p[1]);
    let target = c0 + 0.5 * model.binary_slope();
    let dir = &g.normals[0][1] - &g.mean_coupling[0][1];
    &dir * (target / dir.norm_squared())
}
