mod common;

use ccmfg::equilibrium_det::{classify_initial_state, PopulationStates, UniformModel};
use ccmfg::equilibrium_stoch::{solve_binary_monotone, PopulationSpec, StochasticModel};
use ccmfg::hetero::*;
use ccmfg::model::{Dynamics, Problem};
use ccmfg::numerics::{TimeGrid, Trajectory};
use ccmfg::tracking::solve_tracking;
use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn scalar_type(m: &[f64]) -> AgentType {
    AgentType::new(Dynamics::scalar(0.0, 1.0), m.to_vec()).unwrap()
}

fn scalar_hetero(types: Vec<(AgentType, f64)>, q: f64, t: f64, steps: usize) -> HeteroProblem {
    HeteroProblem::new(
        TypeDistribution::new(types).unwrap(),
        q,
        1.0,
        vec![v(&[-1.0]), v(&[1.0])],
        TimeGrid::new(t, steps).unwrap(),
    )
    .unwrap()
}

fn planar_hetero(ms: &[f64], q: f64) -> HeteroProblem {
    let t = AgentType::new(planar_dynamics(), ms.to_vec()).unwrap();
    HeteroProblem::new(
        TypeDistribution::single(t),
        q,
        1.0,
        planar_destinations(),
        TimeGrid::new(2.0, 200).unwrap(),
    )
    .unwrap()
}

fn point_mass(x: DVector<f64>) -> PopulationSpec {
    let n = x.len();
    PopulationSpec::gaussian(x, DMatrix::zeros(n, n), 10, 0).unwrap()
}

/// Realized cost of the feedback towards `j`, by an RK4 rollout on a fine
/// grid and Simpson quadrature, independent of the closed-form trajectories.
fn rollout_cost(
    problem: &HeteroProblem,
    sol: &TypeSolution,
    agent: &AgentType,
    j: usize,
    x0: &DVector<f64>,
    reference: &Trajectory,
) -> f64 {
    let s = &sol.per_destination[j];
    let (q, r) = (problem.tracking_weight, problem.control_weight);
    let a = agent.dynamics.drift();
    let b = agent.dynamics.input();
    let control = |t: f64, x: &DVector<f64>| -> DVector<f64> {
        b.transpose() * (s.quadratic.eval(t) * x + s.linear[0].eval(t)) * (-1.0 / r)
    };
    let f = |t: f64, x: &DVector<f64>| a * x + b * control(t, x);
    let running = |t: f64, x: &DVector<f64>| {
        let d = x - reference.eval(t);
        0.5 * q * d.norm_squared() + 0.5 * r * control(t, x).norm_squared()
    };
    let steps = 4000;
    let h = problem.horizon() / steps as f64;
    let mut x = x0.clone();
    let mut total = 0.0;
    for i in 0..steps {
        let t = i as f64 * h;
        let k1 = f(t, &x);
        let k2 = f(t + h / 2.0, &(&x + &k1 * (h / 2.0)));
        let k3 = f(t + h / 2.0, &(&x + &k2 * (h / 2.0)));
        let k4 = f(t + h, &(&x + &k3 * h));
        let xm = &x + &k1 * (h / 2.0) + (&k2 - &k1) * (h / 4.0);
        let next = &x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        total +=
            h / 6.0 * (running(t, &x) + 4.0 * running(t + h / 2.0, &xm) + running(t + h, &next));
        x = next;
    }
    total + 0.5 * agent.terminal_weights[j] * (x - &problem.destinations[j]).norm_squared()
}

#[test]
fn equal_weights_give_flat_quadrics() {
    let p = planar_hetero(&[5.0, 5.0, 5.0], 1.0);
    let sol = solve_type_tracking(&p, &p.types.types()[0], None).unwrap();
    let b = sol.basins();
    for j in 0..3 {
        for k in 0..3 {
            assert_eq!(b.quad[j][k].amax(), 0.0);
        }
    }
}

#[test]
fn scalar_type_matches_closed_form_riccati() {
    let p = scalar_hetero(vec![(scalar_type(&[1.0, 3.0]), 1.0)], 0.0, 1.0, 800);
    let sol = solve_type_tracking(&p, &p.types.types()[0], None).unwrap();
    for (j, m) in [1.0, 3.0].into_iter().enumerate() {
        let g0 = sol.per_destination[j].quadratic.first()[(0, 0)];
        assert!((g0 - m / (1.0 + m)).abs() < 1e-6);
    }
}

#[test]
fn terminal_conditions_hold_per_destination() {
    let p = planar_hetero(&[2.0, 5.0, 9.0], 1.3);
    let reference = Trajectory::constant(p.grid, v(&[0.5, -0.5]));
    let sol = solve_type_tracking(&p, &p.types.types()[0], Some(&reference)).unwrap();
    for (j, m) in [2.0, 5.0, 9.0].into_iter().enumerate() {
        let s = &sol.per_destination[j];
        let pj = &p.destinations[j];
        assert_eq!(*s.quadratic.last(), DMatrix::identity(2, 2) * m);
        assert_eq!(*s.linear[0].last(), pj * -m);
        assert_eq!(*s.constant[0].last(), 0.5 * m * pj.norm_squared());
    }
}

#[test]
fn uniform_weights_reduce_to_affine_basins() {
    let p = planar_hetero(&[6.0, 6.0, 6.0], 1.5);
    let uniform = p.uniform_problem(0, 6.0).unwrap();
    let reference = Trajectory::constant(p.grid, v(&[-1.0, 1.0]));
    let quad = solve_type_tracking(&p, &p.types.types()[0], Some(&reference))
        .unwrap()
        .basins();
    let affine = solve_tracking(&uniform, &reference).unwrap().basins();
    let mut r = rng(2);
    for _ in 0..200 {
        let x = DVector::from_fn(2, |_, _| r.random_range(-6.0..6.0));
        assert_eq!(
            quad.classify(&x).destination,
            classify_initial_state(&affine, &x).destination
        );
    }
}

#[test]
fn small_terminal_weight_attracts_equidistant_agent() {
    let p = scalar_hetero(vec![(scalar_type(&[1.0, 20.0]), 1.0)], 0.5, 1.0, 400);
    let reference = Trajectory::constant(p.grid, v(&[0.0]));
    let agent = &p.types.types()[0];
    let sol = solve_type_tracking(&p, agent, Some(&reference)).unwrap();
    let x0 = v(&[0.0]);
    assert_eq!(sol.basins().classify(&x0).destination, 0);
    assert!(
        rollout_cost(&p, &sol, agent, 0, &x0, &reference)
            < rollout_cost(&p, &sol, agent, 1, &x0, &reference)
    );
}

#[test]
fn quadric_classification_matches_rollout_costs() {
    let p = planar_hetero(&[1.0, 8.0, 3.0], 1.0);
    let reference = Trajectory::constant(p.grid, v(&[-1.0, 0.5]));
    let agent = &p.types.types()[0];
    let sol = solve_type_tracking(&p, agent, Some(&reference)).unwrap();
    let basins = sol.basins();
    let mut r = rng(12);
    let mut checked = 0;
    for _ in 0..40 {
        let x = DVector::from_fn(2, |_, _| r.random_range(-5.0..5.0));
        let costs: Vec<f64> = (0..3)
            .map(|j| rollout_cost(&p, &sol, agent, j, &x, &reference))
            .collect();
        for j in 0..3 {
            assert!((costs[j] - sol.optimal_cost(j, &x)).abs() < 1e-4 * costs[j].abs().max(1.0));
        }
        let mut sorted = costs.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted[1] - sorted[0] < 1e-3 {
            continue;
        }
        let best = costs.iter().position(|&c| c == sorted[0]).unwrap();
        assert_eq!(basins.classify(&x).destination, best, "{x} {costs:?}");
        checked += 1;
    }
    assert!(checked > 30);
}

#[test]
fn quadric_basins_are_antisymmetric() {
    let p = planar_hetero(&[1.0, 8.0, 3.0], 1.0);
    let b = solve_type_tracking(&p, &p.types.types()[0], None)
        .unwrap()
        .basins();
    for j in 0..3 {
        for k in 0..3 {
            assert!((&b.quad[j][k] + &b.quad[k][j]).amax() <= 1e-12);
            assert!((&b.lin[j][k] + &b.lin[k][j]).amax() <= 1e-12);
            assert!((b.cst[j][k] + b.cst[k][j]).abs() <= 1e-12);
        }
    }
}

#[test]
fn single_uniform_type_matches_continuum_mean_map() {
    let uniform = scalar_binary(2.0, 1.0, 10.0, 1.0, 400);
    let pop =
        PopulationSpec::gaussian(v(&[0.2]), DMatrix::from_element(1, 1, 0.3), 400_000, 9).unwrap();
    let st =
        StochasticModel::new(UniformModel::new(uniform.clone()).unwrap(), pop.clone()).unwrap();
    let fixed = solve_binary_monotone(&st, 1.0, 1e-12, 10_000).unwrap();
    let path = st.candidate_path(&fixed.split);
    let hm = HeteroModel::new(HeteroProblem::from_uniform(&uniform), pop).unwrap();
    let out = hm.mean_map(&path).unwrap();
    let (continuum, probs) = st.mean_map(&path).unwrap();
    // Sampling noise of the basin masses moves the mean by at most this much.
    let spread = st
        .candidate_path(&[1.0, 0.0])
        .sup_distance(&st.candidate_path(&[0.0, 1.0]))
        .unwrap();
    let p = probs.values[0];
    let noise =
        3.0 * (p * (1.0 - p) / 400_000.0).sqrt() * spread + 3.0 * (0.3f64 / 400_000.0).sqrt();
    let gap = out.mean.sup_distance(&continuum).unwrap();
    assert!(gap < 1e-3 + noise, "gap {gap} noise {noise}");
    assert!(out.mean.sup_distance(&path).unwrap() < 1e-3 + noise);
    let start = picard_solve(&hm, &path, &PicardOptions::default()).unwrap();
    assert!(start.converged && start.iterations == 0);
}

#[test]
fn mean_map_ignores_reference_without_social_weight() {
    let p = scalar_hetero(
        vec![
            (scalar_type(&[2.0, 5.0]), 0.4),
            (scalar_type(&[5.0, 2.0]), 0.6),
        ],
        0.0,
        1.0,
        200,
    );
    let pop =
        PopulationSpec::gaussian(v(&[0.1]), DMatrix::from_element(1, 1, 0.5), 20_000, 4).unwrap();
    let hm = HeteroModel::new(p.clone(), pop).unwrap();
    let a = hm
        .mean_map(&Trajectory::constant(p.grid, v(&[3.0])))
        .unwrap()
        .mean;
    let b = hm
        .mean_map(&Trajectory::constant(p.grid, v(&[-2.0])))
        .unwrap()
        .mean;
    assert!(a.sup_distance(&b).unwrap() < 1e-12);
}

#[test]
fn point_mass_single_type_follows_one_agent() {
    let p = planar_hetero(&[1.0, 8.0, 3.0], 1.0);
    let x0 = v(&[-2.0, 1.5]);
    let hm = HeteroModel::new(p.clone(), point_mass(x0.clone())).unwrap();
    let reference = Trajectory::constant(p.grid, v(&[-1.0, 0.5]));
    let out = hm.mean_map(&reference).unwrap();
    let sol = solve_type_tracking(&p, &p.types.types()[0], Some(&reference)).unwrap();
    let j = sol.basins().classify(&x0).destination;
    let own = sol.per_destination[j].trajectory(0, &x0);
    assert!(out.mean.sup_distance(&own).unwrap() < 1e-12);
}

fn short_horizon_model(samples: usize, seed: u64) -> HeteroModel {
    let p = scalar_hetero(
        vec![
            (scalar_type(&[2.0, 4.0]), 0.5),
            (scalar_type(&[4.0, 2.0]), 0.5),
        ],
        1.0,
        0.3,
        200,
    );
    let pop = PopulationSpec::gaussian(v(&[0.1]), DMatrix::from_element(1, 1, 0.25), samples, seed)
        .unwrap();
    HeteroModel::new(p, pop).unwrap()
}

#[test]
fn picard_converges_on_short_horizon() {
    let hm = short_horizon_model(50_000, 1);
    let bound = feasibility_bound(&hm).unwrap();
    assert!(bound.satisfied, "{bound:?}");
    let starts = default_starts(&hm).unwrap();
    assert!(!starts.is_empty() && starts.len() <= 3);
    let half = picard_solve(&hm, &starts[0], &PicardOptions::default()).unwrap();
    assert!(half.converged && half.iterations <= 100, "{:?}", half.log);
    let full = picard_solve(
        &hm,
        &starts[0],
        &PicardOptions {
            damping: 1.0,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(full.converged);
    assert!(half.path.sup_distance(&full.path).unwrap() < 2e-3);
    // Re-evaluate with a fresh, larger sample.
    let fresh = short_horizon_model(200_000, 77);
    let image = fresh.mean_map(&half.path).unwrap().mean;
    assert!(image.sup_distance(&half.path).unwrap() < 2e-3);
    let all = picard_multistart(&hm, &starts, &PicardOptions::default()).unwrap();
    assert!(all.iter().all(|o| o.converged));
}

#[test]
fn feasibility_constants_match_scalar_closed_forms() {
    let (q, t, steps) = (0.7, 0.8, 400);
    let ms = [1.5, 4.0];
    let p = scalar_hetero(vec![(scalar_type(&ms), 1.0)], q, t, steps);
    let x0 = 0.6;
    let hm = HeteroModel::new(p.clone(), point_mass(v(&[x0]))).unwrap();
    let got = feasibility_bound(&hm).unwrap();
    // With A = 0, B = r = 1 the Riccati solution is Γ = c D'(u)/D(u) in
    // u = c(T - t), D(u) = c cosh u + M sinh u, so Φ(t,η) = D(c(T-η)) / D(c(T-t)).
    let c = q.sqrt();
    let (mut k1, mut k2, mut k3) = (0.0, 0.0, 0.0);
    for (j, &m) in ms.iter().enumerate() {
        let d = |s: f64| c * (c * (t - s)).cosh() + m * (c * (t - s)).sinh();
        let phi = |a: f64, b: f64| d(b) / d(a);
        k1 += x0 * 1.0;
        let pj = p.destinations[j][0].abs();
        let mut best: f64 = 0.0;
        for a in 0..=steps {
            let tt = t * a as f64 / steps as f64;
            // Simpson for ∫_0^t Φ(σ,t) Φ(σ,T) dσ.
            let n = 2000;
            let h = tt / n as f64;
            let f = |s: f64| phi(s, tt) * phi(s, t);
            let mut acc = f(0.0) + f(tt);
            for i in 1..n {
                acc += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            best = best.max(m * acc * h / 3.0 * pj);
        }
        k2 += best;
        k3 += q * phi(t, 0.0).powi(2);
    }
    assert!((got.k1 - k1).abs() < 1e-6, "{} vs {k1}", got.k1);
    assert!((got.k2 - k2).abs() < 1e-6, "{} vs {k2}", got.k2);
    assert!(
        (got.k3 - k3).abs() < 1e-6 * k3.max(1.0),
        "{} vs {k3}",
        got.k3
    );
}

#[test]
fn feasibility_bound_vanishes_for_short_horizons_and_grows_with_t() {
    let pop =
        || PopulationSpec::gaussian(v(&[0.3]), DMatrix::from_element(1, 1, 0.2), 5_000, 2).unwrap();
    let bound = |t: f64| {
        let p = scalar_hetero(vec![(scalar_type(&[2.0, 3.0]), 1.0)], 1.0, t, 200);
        feasibility_bound(&HeteroModel::new(p, pop()).unwrap()).unwrap()
    };
    let tiny = bound(1e-4);
    assert!(tiny.satisfied && tiny.value < 1e-3);
    let a = bound(0.2);
    let b = bound(2.0);
    assert!(b.value >= 10.0 * a.value, "{} vs {}", b.value, a.value);
}

#[test]
fn empirical_population_uses_its_states() {
    let p = planar_hetero(&[1.0, 2.0, 3.0], 0.5);
    let states = PopulationStates::new(vec![v(&[0.0, 0.0]), v(&[1.0, 1.0])]).unwrap();
    let pop = PopulationSpec::empirical(states.clone()).unwrap();
    let hm = HeteroModel::new(p.clone(), pop).unwrap();
    assert_eq!(hm.samples(), states.states());
    let uniform: Problem = p.uniform_problem(0, 2.0).unwrap();
    assert_eq!(uniform.cost.terminal_weight, 2.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn quadric_blocks_are_antisymmetric(ms in prop::array::uniform3(0.5f64..30.0), q in 0.0f64..3.0) {
        let p = planar_hetero(&ms, q);
        let b = solve_type_tracking(&p, &p.types.types()[0], None).unwrap().basins();
        for j in 0..3 {
            for k in 0..3 {
                prop_assert!((&b.quad[j][k] + &b.quad[k][j]).amax() <= 1e-12);
                prop_assert!((&b.lin[j][k] + &b.lin[k][j]).amax() <= 1e-12);
                prop_assert!((b.cst[j][k] + b.cst[k][j]).abs() <= 1e-12);
            }
        }
    }
}
