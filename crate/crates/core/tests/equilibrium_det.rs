mod common;

use ccmfg::equilibrium_det::*;
use ccmfg::model::{CostSpec, Dynamics, Problem};
use ccmfg::numerics::{SampledPath, TimeGrid};
use ccmfg::tracking::{solve_tracking, sweep, Weights};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(xs)
}

fn planar_problem(q: f64, r: f64, m: f64, t: f64, steps: usize) -> Problem {
    let dynamics = Dynamics::from_rows(2, 1, &[0.0, 1.0, 0.02, -0.3], &[0.0, 0.3]).unwrap();
    let cost = CostSpec::new(
        q,
        r,
        m,
        t,
        vec![v(&[-3.0, -1.0]), v(&[-2.0, 1.0]), v(&[0.0, 4.0])],
    )
    .unwrap();
    Problem::new(dynamics, cost, steps).unwrap()
}

fn random_states(rng: &mut ChaCha8Rng, n: usize, dim: usize, spread: f64) -> PopulationStates {
    PopulationStates::new(
        (0..n)
            .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-spread..spread)))
            .collect(),
    )
    .unwrap()
}

/// Count map evaluated from its definition: one tracking solve per split and a
/// direct cost comparison for every agent.
fn counts_by_cost(model: &UniformModel, pop: &PopulationStates, counts: &[usize]) -> Vec<usize> {
    let path = model.candidate_path(pop.mean(), &counts_to_split(counts));
    let sol = solve_tracking(&model.problem, &path).unwrap();
    let mut out = vec![0; counts.len()];
    for x in pop.states() {
        out[sol.best_destination(x).0] += 1;
    }
    out
}

#[test]
fn geometry_matches_cost_comparison() {
    let model = UniformModel::new(planar_problem(2.0, 1.0, 20.0, 5.0, 400)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mean = v(&[-1.0, 0.5]);
    for split in [[0.2, 0.3, 0.5], [1.0, 0.0, 0.0], [0.1, 0.8, 0.1]] {
        let path = model.candidate_path(&mean, &split);
        let sol = solve_tracking(&model.problem, &path).unwrap();
        let basins = model.basins(&mean, &split);
        let mut agree = 0;
        for _ in 0..200 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-6.0..6.0));
            let (k, _) = sol.best_destination(&x);
            if basins.classify(&x).destination == k {
                agree += 1;
            }
        }
        assert_eq!(agree, 200, "split {split:?}");
    }
}

#[test]
fn geometry_matches_nested_quadrature() {
    // Couplings recomputed by brute-force nested trapezoid sums of the kernel
    // Φ(η,T)ᵀ B Bᵀ Φ(η,σ) X(σ) over the triangle σ ∈ [η, T].
    let problem = planar_problem(1.5, 2.0, 10.0, 2.0, 200);
    let model = UniformModel::new(problem.clone()).unwrap();
    let sol = sweep(
        &problem.dynamics,
        Weights::of(&problem),
        &[],
        None,
        &problem.grid,
    )
    .unwrap();
    let phi = sol.transition();
    let grid = problem.grid;
    let steps = grid.steps();
    let h = grid.step();
    let bbt = problem.dynamics.input_gram();
    let double = |x: &dyn Fn(usize) -> DMatrix<f64>| -> DMatrix<f64> {
        let mut outer = DMatrix::zeros(2, 2);
        for e in 0..=steps {
            let mut inner = DMatrix::zeros(2, 2);
            for s in e..=steps {
                let w = if (s == e || s == steps) && e != steps {
                    0.5
                } else {
                    1.0
                };
                let w = if e == steps { 0.0 } else { w };
                inner +=
                    phi.between(e, steps).transpose() * bbt * phi.between(e, s) * x(s) * (w * h);
            }
            let w = if e == 0 || e == steps { 0.5 } else { 1.0 };
            outer += inner * (w * h);
        }
        outer
    };
    let r1 = double(&|s| model.ingredients.mean_gain.node(s).clone());
    let r2 = double(&|s| model.ingredients.destination_gain.node(s).clone());
    let c = &problem.cost;
    let scale = c.terminal_weight * c.tracking_weight / c.control_weight;
    for (j, k) in [(0usize, 1usize), (1, 2), (2, 0)] {
        let d = &c.destinations[j] - &c.destinations[k];
        let a = r1.transpose() * &d * scale;
        let b = r2.transpose() * &d * scale;
        let ga = &model.geometry.mean_coupling[j][k];
        let gb = &model.geometry.target_coupling[j][k];
        assert!((ga - &a).amax() < 2e-3 * a.amax().max(1e-3), "{ga} vs {a}");
        assert!((gb - &b).amax() < 2e-3 * b.amax().max(1e-3), "{gb} vs {b}");
    }
}

#[test]
fn binary_scan_matches_exhaustive_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..12 {
        let q = rng.random_range(0.0..4.0);
        let m = rng.random_range(2.0..30.0);
        let cost = CostSpec::new(q, 1.0, m, 1.0, vec![v(&[-1.0]), v(&[1.0])]).unwrap();
        let model = UniformModel::new(Problem::new(Dynamics::scalar(0.0, 1.0), cost, 100).unwrap())
            .unwrap();
        let n = rng.random_range(1..=8);
        let pop = random_states(&mut rng, n, 1, 1.5);
        let scan = scan_binary(&model, &pop).unwrap();
        let brute: Vec<Vec<usize>> = (0..=n)
            .map(|a| vec![a, n - a])
            .filter(|c| counts_by_cost(&model, &pop, c) == *c)
            .collect();
        assert_eq!(scan.fixed_points, brute, "case {case}");
        for fp in &scan.fixed_points {
            assert_eq!(eval_f(&model, &pop, fp).unwrap(), *fp);
        }
    }
}

#[test]
fn symmetric_pair_splits_evenly() {
    let cost = CostSpec::new(0.0, 1.0, 1.0, 1.0, vec![v(&[-1.0]), v(&[1.0])]).unwrap();
    let model =
        UniformModel::new(Problem::new(Dynamics::scalar(0.0, 1.0), cost, 200).unwrap()).unwrap();
    let pop = PopulationStates::new(vec![v(&[-0.5]), v(&[0.5])]).unwrap();
    let scan = scan_binary(&model, &pop).unwrap();
    assert_eq!(scan.fixed_points, vec![vec![1, 1]]);
    assert!(scan.slope.abs() < 1e-15);
}

#[test]
fn enumeration_matches_definition_and_round_trips() {
    let model = UniformModel::new(planar_problem(3.0, 1.0, 5.0, 3.0, 200)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pop = random_states(&mut rng, 7, 2, 4.0);
    let found = enumerate_multiway(&model, &pop, DEFAULT_LATTICE_CAP).unwrap();
    let brute: Vec<Vec<usize>> = lattice(7, 3)
        .into_iter()
        .filter(|c| counts_by_cost(&model, &pop, c) == *c)
        .collect();
    assert_eq!(found, brute);
    for fp in &found {
        let report = equilibrium_report(&model, &pop, fp).unwrap();
        assert!(
            report.mean_map_residual < 1e-6,
            "residual {}",
            report.mean_map_residual
        );
        assert_eq!(report.assignment_mismatches, 0);
    }
}

#[test]
fn lattice_cap_is_enforced() {
    let model = UniformModel::new(planar_problem(1.0, 1.0, 5.0, 1.0, 50)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pop = random_states(&mut rng, 40, 2, 1.0);
    let err = enumerate_multiway(&model, &pop, 100).unwrap_err();
    assert!(matches!(
        err,
        ccmfg::Error::LatticeTooLarge {
            size: 861,
            cap: 100
        }
    ));
}

#[test]
fn far_right_population_goes_to_the_right() {
    let cost = CostSpec::new(0.5, 1.0, 10.0, 1.0, vec![v(&[-1.0]), v(&[1.0])]).unwrap();
    let model =
        UniformModel::new(Problem::new(Dynamics::scalar(0.0, 1.0), cost, 200).unwrap()).unwrap();
    let pop = PopulationStates::new((0..5).map(|i| v(&[50.0 + i as f64])).collect()).unwrap();
    let scan = scan_binary(&model, &pop).unwrap();
    assert_eq!(scan.fixed_points, vec![vec![0, 5]]);
    let out = iterate_from_seeds(&model, &pop, &[vec![5, 0], vec![2, 3]], 50).unwrap();
    for o in out {
        assert_eq!(o.fixed_point, Some(vec![0, 5]));
    }
}

#[test]
fn social_selection_breaks_ties_lexicographically() {
    let cost = CostSpec::new(0.0, 1.0, 1.0, 1.0, vec![v(&[-1.0]), v(&[1.0])]).unwrap();
    let model =
        UniformModel::new(Problem::new(Dynamics::scalar(0.0, 1.0), cost, 200).unwrap()).unwrap();
    let pop = PopulationStates::new(vec![v(&[0.0]), v(&[0.0])]).unwrap();
    let sel = select_social(&model, &pop, &[vec![2, 0], vec![0, 2]]).unwrap();
    assert_eq!(sel.reports[sel.selected].counts, vec![0, 2]);
    assert!(select_social(&model, &pop, &[]).is_err());
}

#[test]
fn permutation_does_not_change_fixed_points() {
    let model = UniformModel::new(planar_problem(2.0, 1.0, 8.0, 2.0, 100)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pop = random_states(&mut rng, 9, 2, 3.0);
    let mut states = pop.states().to_vec();
    states.reverse();
    states.swap(0, 4);
    let shuffled = PopulationStates::new(states).unwrap();
    assert_eq!(
        enumerate_multiway(&model, &pop, DEFAULT_LATTICE_CAP).unwrap(),
        enumerate_multiway(&model, &shuffled, DEFAULT_LATTICE_CAP).unwrap()
    );
}

#[test]
fn trajectory_samples_share_the_grid() {
    let model = UniformModel::new(planar_problem(1.0, 1.0, 5.0, 1.0, 64)).unwrap();
    let path = model.candidate_path(&v(&[0.0, 0.0]), &[0.5, 0.5, 0.0]);
    assert_eq!(path.nodes().len(), 65);
    assert_eq!(*path.grid(), TimeGrid::new(1.0, 64).unwrap());
    let _: &SampledPath<DVector<f64>> = &path;
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn reordering_agents_keeps_the_fixed_point_set(seed in any::<u64>(), n in 2usize..8, shift in 1usize..8) {
        let model = UniformModel::new(planar_problem(2.0, 1.0, 8.0, 2.0, 60)).unwrap();
        let pop = random_states(&mut ChaCha8Rng::seed_from_u64(seed), n, 2, 3.0);
        let mut states = pop.states().to_vec();
        states.rotate_left(shift % n);
        let moved = PopulationStates::new(states).unwrap();
        prop_assert_eq!(
            enumerate_multiway(&model, &pop, DEFAULT_LATTICE_CAP).unwrap(),
            enumerate_multiway(&model, &moved, DEFAULT_LATTICE_CAP).unwrap()
        );
    }

    #[test]
    fn scalar_binary_always_has_a_fixed_point(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = UniformModel::new(common::random_scalar_binary(&mut rng, 80)).unwrap();
        let pop = random_states(&mut rng, n, 1, 4.0);
        let scan = scan_binary(&model, &pop).unwrap();
        prop_assert!(!scan.fixed_points.is_empty());
        for fp in &scan.fixed_points {
            prop_assert_eq!(&eval_f(&model, &pop, fp).unwrap(), fp);
        }
    }
}
