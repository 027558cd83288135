mod common;

use ccmfg::equilibrium_det::{eval_f, lattice, PopulationStates, UniformModel};
use ccmfg::equilibrium_stoch::*;
use ccmfg::tracking::solve_tracking;
use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn scalar_model(q: f64) -> UniformModel {
    UniformModel::new(scalar_binary(q, 1.0, 10.0, 1.0, 400)).unwrap()
}

fn gaussian(mean: DVector<f64>, cov: DMatrix<f64>, samples: usize, seed: u64) -> PopulationSpec {
    PopulationSpec::gaussian(mean, cov, samples, seed).unwrap()
}

fn scalar_gaussian(mean: f64, var: f64) -> PopulationSpec {
    gaussian(v(&[mean]), DMatrix::from_element(1, 1, var), 1000, 1)
}

/// Plain indicator Monte Carlo: draw states, classify, count.
fn indicator_oracle(
    model: &UniformModel,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    split: &[f64],
    draws: usize,
) -> Vec<f64> {
    let chol = cov.clone().cholesky().unwrap().l();
    let basins = model.basins(mean, split);
    let mut rng = rng(999);
    let mut counts = vec![0usize; split.len()];
    for _ in 0..draws {
        let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        counts[basins.classify(&(mean + &chol * z)).destination] += 1;
    }
    counts.iter().map(|&c| c as f64 / draws as f64).collect()
}

fn planar_gaussian_model(
    samples: usize,
    seed: u64,
) -> (StochasticModel, DVector<f64>, DMatrix<f64>) {
    let model = UniformModel::new(planar_problem(1.0, 1.0, 10.0, 2.0, 200)).unwrap();
    let mean = v(&[-1.5, 0.5]);
    let cov = DMatrix::from_row_slice(2, 2, &[1.5, 0.3, 0.3, 1.0]);
    let st =
        StochasticModel::new(model, gaussian(mean.clone(), cov.clone(), samples, seed)).unwrap();
    (st, mean, cov)
}

#[test]
fn symmetric_scalar_probability_is_one_half() {
    let st = StochasticModel::new(scalar_model(0.0), scalar_gaussian(0.0, 0.5)).unwrap();
    assert_eq!(st.engine().kind(), BackendKind::NormalCdf);
    assert!((st.region_probability(0, &[0.3, 0.7]).unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn empirical_symmetric_probability_is_exactly_one_half() {
    let pop = PopulationStates::new(vec![v(&[-0.5]), v(&[0.5])]).unwrap();
    let st =
        StochasticModel::new(scalar_model(0.0), PopulationSpec::empirical(pop).unwrap()).unwrap();
    assert_eq!(st.engine().kind(), BackendKind::Counting);
    assert_eq!(st.eval_fs(&[0.5, 0.5]).unwrap().values, vec![0.5, 0.5]);
}

#[test]
fn exact_binary_probability_matches_indicator_sampling() {
    let model = UniformModel::new(random_planar_binary(&mut rng(4), 200)).unwrap();
    let mean = centred_mean(&model);
    let cov = DMatrix::from_row_slice(2, 2, &[0.8, -0.2, -0.2, 0.5]);
    let st =
        StochasticModel::new(model.clone(), gaussian(mean.clone(), cov.clone(), 1000, 2)).unwrap();
    for split in [[0.5, 0.5], [0.9, 0.1]] {
        let exact = st.eval_fs(&split).unwrap().values[0];
        let draws = 400_000;
        let oracle = indicator_oracle(&model, &mean, &cov, &split, draws)[0];
        let sd = (exact * (1.0 - exact) / draws as f64).sqrt();
        assert!(
            (exact - oracle).abs() < 4.0 * sd + 1e-12,
            "{exact} vs {oracle}"
        );
    }
}

#[test]
fn line_sampling_matches_indicator_sampling_for_three_destinations() {
    let (st, mean, cov) = planar_gaussian_model(100_000, 7);
    assert_eq!(st.engine().kind(), BackendKind::MonteCarlo);
    let split = [0.3, 0.3, 0.4];
    let got = st.eval_fs(&split).unwrap();
    let draws = 400_000;
    let oracle = indicator_oracle(&st.model, &mean, &cov, &split, draws);
    for j in 0..3 {
        let p = oracle[j];
        let sd = (p * (1.0 - p) / draws as f64).sqrt() + got.error[j];
        assert!(
            (got.values[j] - p).abs() < 3.0 * sd,
            "{j}: {} vs {p}",
            got.values[j]
        );
    }
    assert!((got.values.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(!got.renormalized);
}

#[test]
fn larger_sample_stays_within_binomial_noise() {
    let (small, _, _) = planar_gaussian_model(100_000, 11);
    let (large, _, _) = planar_gaussian_model(1_000_000, 12);
    let split = [0.2, 0.5, 0.3];
    let a = small.eval_fs(&split).unwrap().values;
    let b = large.eval_fs(&split).unwrap().values;
    for j in 0..3 {
        let bound = 3.0 * (b[j] * (1.0 - b[j]) / 1e5).sqrt();
        assert!((a[j] - b[j]).abs() < bound, "{j}: {} vs {}", a[j], b[j]);
    }
}

#[test]
fn line_sampling_matches_exact_cdf_for_two_destinations() {
    let model = UniformModel::new(random_planar_binary(&mut rng(8), 200)).unwrap();
    let mean = centred_mean(&model);
    let cov = DMatrix::from_row_slice(2, 2, &[0.6, 0.1, 0.1, 0.9]);
    let pop = gaussian(mean, cov, 200_000, 3);
    let exact = StochasticModel::new(model.clone(), pop.clone()).unwrap();
    let sampled = StochasticModel::new(model, pop.clone())
        .unwrap()
        .with_engine(ProbabilityEngine::monte_carlo(&pop));
    for a in [0.0, 0.4, 1.0] {
        let e = exact.eval_fs(&[a, 1.0 - a]).unwrap().values[0];
        let s = sampled.eval_fs(&[a, 1.0 - a]).unwrap();
        assert!(
            (e - s.values[0]).abs() < 3.0 * s.error[0] + 1e-12,
            "{e} vs {}",
            s.values[0]
        );
    }
}

#[test]
fn zero_social_weight_makes_split_map_constant() {
    let model = UniformModel::new(planar_problem(0.0, 1.0, 10.0, 2.0, 200)).unwrap();
    let pop = gaussian(v(&[-1.0, 0.0]), DMatrix::identity(2, 2), 20_000, 5);
    let st = StochasticModel::new(model, pop).unwrap();
    let a = st.eval_fs(&[1.0, 0.0, 0.0]).unwrap().values;
    for split in [[0.0, 1.0, 0.0], [0.2, 0.2, 0.6]] {
        assert_eq!(st.eval_fs(&split).unwrap().values, a);
    }
}

#[test]
fn symmetric_gaussian_has_even_split_fixed_point() {
    let st = StochasticModel::new(scalar_model(2.0), scalar_gaussian(0.0, 0.3)).unwrap();
    let f = st.eval_fs(&[0.5, 0.5]).unwrap().values;
    assert!((f[0] - 0.5).abs() < 1e-15 && (f[1] - 0.5).abs() < 1e-15);
    let sol = solve_binary_monotone(&st, 0.5, 1e-10, 100).unwrap();
    assert_eq!(sol.split, vec![0.5, 0.5]);
    assert_eq!(sol.iterations, 1);
}

#[test]
fn empirical_split_map_scales_to_count_map() {
    let model = UniformModel::new(planar_problem(2.0, 1.0, 8.0, 2.0, 200)).unwrap();
    let pop = random_states(&mut rng(21), 9, 2, 4.0);
    let st = StochasticModel::new(
        model.clone(),
        PopulationSpec::empirical(pop.clone()).unwrap(),
    )
    .unwrap();
    for counts in lattice(9, 3).into_iter().step_by(5) {
        let split: Vec<f64> = counts.iter().map(|&c| c as f64 / 9.0).collect();
        let fs = st.eval_fs(&split).unwrap().values;
        let f = eval_f(&model, &pop, &counts).unwrap();
        let expect: Vec<f64> = f.iter().map(|&c| c as f64 / 9.0).collect();
        assert_eq!(fs, expect, "counts {counts:?}");
    }
}

/// Sign changes of `F_s(α)_1 - α` on a dense grid.
fn grid_crossings(st: &StochasticModel, points: usize) -> Vec<f64> {
    let g: Vec<f64> = (0..=points)
        .map(|i| {
            let a = i as f64 / points as f64;
            st.eval_fs(&[a, 1.0 - a]).unwrap().values[0] - a
        })
        .collect();
    let mut out = Vec::new();
    if g[0] <= 0.0 {
        out.push(0.0);
    }
    for i in 0..points {
        if g[i] > 0.0 && g[i + 1] <= 0.0 || g[i] < 0.0 && g[i + 1] >= 0.0 {
            out.push((i as f64 + 0.5) / points as f64);
        }
    }
    if g[points] >= 0.0 {
        out.push(1.0);
    }
    out
}

#[test]
fn monotone_limits_bracket_all_fixed_points() {
    let model = scalar_model(4.0);
    let st = StochasticModel::new(model, scalar_gaussian(0.15, 0.02)).unwrap();
    assert!(st.binary_slope() > 0.0);
    let low = solve_binary_monotone(&st, 0.0, 1e-10, 10_000).unwrap();
    let high = solve_binary_monotone(&st, 1.0, 1e-10, 10_000).unwrap();
    assert!(low.converged && high.converged);
    assert!(low.residual < 1e-8 && high.residual < 1e-8);
    let crossings = grid_crossings(&st, 2000);
    let (first, last) = (crossings[0], *crossings.last().unwrap());
    assert!(low.split[0] <= first + 1e-3, "{} vs {first}", low.split[0]);
    assert!(high.split[0] >= last - 1e-3, "{} vs {last}", high.split[0]);
    let again = solve_binary_monotone(&st, low.split[0], 1e-10, 10).unwrap();
    assert_eq!(again.iterations, 1);
}

#[test]
fn bisection_returns_boundary_when_first_basin_is_empty() {
    // Everyone far on the right: nobody ever picks the left destination.
    let model = scalar_model(0.0);
    let st = StochasticModel::new(model, scalar_gaussian(40.0, 0.01)).unwrap();
    let sol = solve_binary_bisection(&st, 1e-12).unwrap();
    assert_eq!(sol.split, vec![0.0, 1.0]);
}

#[test]
fn bisection_with_zero_slope_is_the_direct_probability() {
    let model = scalar_model(0.0);
    let st = StochasticModel::new(model, scalar_gaussian(0.2, 0.5)).unwrap();
    let direct = st.eval_fs(&[1.0, 0.0]).unwrap().values[0];
    let sol = solve_binary_bisection(&st, 1e-13).unwrap();
    assert!((sol.split[0] - direct).abs() < 1e-12);
}

#[test]
fn bisection_and_broyden_match_grid_root_without_social_weight() {
    let mut r = rng(31);
    for case in 0..4 {
        let mut problem = random_planar_binary(&mut r, 200);
        problem.cost.tracking_weight = 0.0;
        let model = UniformModel::new(problem).unwrap();
        let mean = centred_mean(&model);
        let n = model.geometry.normals[0][1].clone();
        let scale = 1.0 / n.norm();
        let cov = DMatrix::identity(2, 2) * scale * scale;
        let st = StochasticModel::new(model, gaussian(mean, cov, 1000, 1)).unwrap();
        let sol = solve_binary_bisection(&st, 1e-13).unwrap();
        assert!(sol.warnings.is_empty(), "{:?}", sol.warnings);
        let crossings = grid_crossings(&st, 20_000);
        assert_eq!(crossings.len(), 1, "case {case}");
        assert!((sol.split[0] - crossings[0]).abs() < 1e-4, "case {case}");
        assert!(sol.residual < 1e-10);
        let br = solve_broyden(&st, &[0.9, 0.1], 1e-10, 100).unwrap();
        assert!(br.converged);
        assert!((br.split[0] - sol.split[0]).abs() < 1e-6, "case {case}");
    }
}

#[test]
fn broyden_start_at_fixed_point_takes_no_iterations() {
    let st = StochasticModel::new(scalar_model(2.0), scalar_gaussian(0.0, 0.3)).unwrap();
    let sol = solve_broyden(&st, &[0.5, 0.5], 1e-8, 50).unwrap();
    assert_eq!(sol.iterations, 0);
    assert!(sol.converged);
}

#[test]
fn broyden_three_destinations_survives_resampling() {
    let (st, mean, cov) = planar_gaussian_model(50_000, 17);
    let sol = solve_broyden(&st, &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 1e-8, 200).unwrap();
    assert!(sol.converged, "{:?}", sol);
    assert!(sol.residual < 1e-8);
    let fresh = StochasticModel::new(st.model.clone(), gaussian(mean, cov, 200_000, 18)).unwrap();
    let f = fresh.eval_fs(&sol.split).unwrap().values;
    for j in 0..3 {
        let p = sol.split[j];
        let noise = 3.0 * ((p * (1.0 - p)).max(1e-12) / 200_000.0).sqrt()
            + 3.0 * ((p * (1.0 - p)).max(1e-12) / 50_000.0).sqrt();
        assert!((f[j] - p).abs() < noise, "{j}: {} vs {p}", f[j]);
    }
}

#[test]
fn uniqueness_report_limits() {
    let model = scalar_model(4.0);
    let wide = gaussian_uniqueness(&model, &v(&[0.0]), &DMatrix::from_element(1, 1, 1e6)).unwrap();
    assert!(wide.variance_condition && wide.unique);
    assert!(wide.lower.is_none() && wide.upper.is_none());
    let free = gaussian_uniqueness(
        &scalar_model(0.0),
        &v(&[0.0]),
        &DMatrix::from_element(1, 1, 1e-6),
    )
    .unwrap();
    assert!(free.unique);
    let narrow =
        gaussian_uniqueness(&model, &v(&[0.0]), &DMatrix::from_element(1, 1, 1e-3)).unwrap();
    assert!(!narrow.variance_condition);
    assert!(narrow.lower.unwrap() <= narrow.upper.unwrap());
    assert_eq!(narrow.mean_in_slab, Some(true));
    assert!(!narrow.unique);
}

#[test]
fn narrow_centred_population_has_several_equilibria() {
    let model = scalar_model(4.0);
    let cov = DMatrix::from_element(1, 1, 1e-3);
    let report = gaussian_uniqueness(&model, &v(&[0.05]), &cov).unwrap();
    assert!(!report.unique);
    let st = StochasticModel::new(model, gaussian(v(&[0.05]), cov, 1000, 1)).unwrap();
    let found = discover_equilibria(&st, &DiscoveryOptions::default());
    assert!(found.equilibria.len() >= 2, "{:?}", found.equilibria);
    for e in &found.equilibria {
        assert!(e.residual < 1e-8);
    }
}

#[test]
fn wide_population_has_one_equilibrium() {
    let model = scalar_model(4.0);
    let cov = DMatrix::from_element(1, 1, 4.0);
    assert!(
        gaussian_uniqueness(&model, &v(&[0.3]), &cov)
            .unwrap()
            .unique
    );
    let st = StochasticModel::new(model, gaussian(v(&[0.3]), cov, 1000, 1)).unwrap();
    let found = discover_equilibria(&st, &DiscoveryOptions::default());
    assert_eq!(found.equilibria.len(), 1, "{:?}", found.equilibria);
}

#[test]
fn fixed_point_path_is_reproduced_by_the_mean_map() {
    let st = StochasticModel::new(scalar_model(3.0), scalar_gaussian(0.2, 0.05)).unwrap();
    let sol = solve_binary_monotone(&st, 1.0, 1e-12, 10_000).unwrap();
    let path = st.candidate_path(&sol.split);
    let (image, _) = st.mean_map(&path).unwrap();
    assert!(image.sup_distance(&path).unwrap() < 1e-4);
}

#[test]
fn mean_map_ignores_reference_without_social_weight() {
    let st = StochasticModel::new(scalar_model(0.0), scalar_gaussian(0.2, 0.05)).unwrap();
    let a = st.mean_map(&st.candidate_path(&[1.0, 0.0])).unwrap().0;
    let b = st.mean_map(&st.candidate_path(&[0.2, 0.8])).unwrap().0;
    assert!(a.sup_distance(&b).unwrap() < 1e-12);
}

#[test]
fn single_agent_mean_map_is_its_own_trajectory() {
    let model = UniformModel::new(planar_problem(1.0, 1.0, 10.0, 2.0, 200)).unwrap();
    let x0 = v(&[-1.0, 2.0]);
    let pop = PopulationSpec::empirical(PopulationStates::new(vec![x0.clone()]).unwrap()).unwrap();
    let st = StochasticModel::new(model, pop).unwrap();
    let reference = st.candidate_path(&[0.0, 1.0, 0.0]);
    let (image, probs) = st.mean_map(&reference).unwrap();
    let sol = solve_tracking(&st.model.problem, &reference).unwrap();
    let (k, _) = sol.best_destination(&x0);
    assert_eq!(probs.values[k], 1.0);
    assert!(image.sup_distance(&sol.trajectory(k, &x0)).unwrap() < 1e-12);
}

#[test]
fn sampled_states_are_prefix_stable() {
    let pop = gaussian(v(&[0.0, 1.0]), DMatrix::identity(2, 2), 10, 3);
    let a = pop.sample_states(5, 42).unwrap();
    let b = pop.sample_states(9, 42).unwrap();
    assert_eq!(a.states(), &b.states()[..5]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn split_map_rises_with_the_first_share(
        q in 0.2f64..4.0, mean in -1.0f64..1.0, var in 0.01f64..2.0, seed in any::<u64>(),
    ) {
        let pop = gaussian(v(&[mean]), DMatrix::from_element(1, 1, var), 2000, seed);
        let st = StochasticModel::new(scalar_model(q), pop).unwrap();
        prop_assume!(st.binary_slope() > 0.0);
        let values: Vec<f64> = (0..=100)
            .map(|i| {
                let a = i as f64 / 100.0;
                st.eval_fs(&[a, 1.0 - a]).unwrap().values[0]
            })
            .collect();
        prop_assert!(values.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn empirical_split_map_is_the_scaled_count_map(seed in any::<u64>(), n in 1usize..7) {
        let model = UniformModel::new(planar_problem(1.5, 1.0, 6.0, 1.5, 60)).unwrap();
        let pop = random_states(&mut rng(seed), n, 2, 4.0);
        let st = StochasticModel::new(model.clone(), PopulationSpec::empirical(pop.clone()).unwrap())
            .unwrap();
        for counts in lattice(n, 3) {
            let split: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
            let fs = st.eval_fs(&split).unwrap().values;
            let f = eval_f(&model, &pop, &counts).unwrap();
            let scaled: Vec<f64> = f.iter().map(|&c| c as f64 / n as f64).collect();
            prop_assert_eq!(fs, scaled);
        }
    }
}
