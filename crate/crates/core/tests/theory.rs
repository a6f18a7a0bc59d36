mod common;

use common::{exhaustive_hard_projection, sq_cost, vertex_enumeration};
use mixflow_core::ot::{solve_transport, CostMatrix, Metric, TransportPlan};
use mixflow_core::rng::stream;
use mixflow_core::theory::{
    check_subset_sum, cluster_of, clustered_modes, demonstrate_i1_illposed, dof_analysis, mixture_wasserstein,
    project_to_i_modes, random_measure, random_modes, random_simplex, reconstruct_plan, reduced_dual_objective,
    support_from_dual, theory_pipeline, verify_barycenter, verify_weight_optimality, Condition, ConstraintKind,
    GmmMeasure, PipelineConfig, PredictorKind, SupportPattern, PAPER_CONSTRAINTS, RECONSTRUCTION_CONSTRAINTS,
};
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::Rng;

fn solve(theta: &Array2<f64>, gamma: &Array2<f64>, p: &[f64], q: &[f64]) -> TransportPlan<f64> {
    let cost = CostMatrix::between(theta.view(), gamma.view(), Metric::SqEuclidean).unwrap();
    solve_transport(&cost, p, q).unwrap().0
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

#[test]
fn mixture_wasserstein_point_cases() {
    let mut rng = stream(&[81]);
    let a = random_measure(4, 3, &mut rng);
    assert!(mixture_wasserstein(&a, &a).unwrap().value.abs() < 1e-12);
    let x = GmmMeasure::new(array![[1.0, 2.0, 0.0]], vec![1.0]).unwrap();
    let y = GmmMeasure::new(array![[-1.0, 2.0, 1.0]], vec![1.0]).unwrap();
    assert!((mixture_wasserstein(&x, &y).unwrap().value - 5.0).abs() < 1e-12);
}

#[test]
fn mixture_wasserstein_matches_vertex_enumeration() {
    for seed in 0..20 {
        let mut rng = stream(&[82, seed]);
        let a = random_measure(2, 2, &mut rng);
        let b = random_measure(3, 2, &mut rng);
        let mw = mixture_wasserstein(&a, &b).unwrap();
        let c = sq_cost(a.modes.view(), b.modes.view());
        let want = vertex_enumeration(&c, &a.weights, &b.weights);
        assert!((mw.value - want).abs() < 1e-12, "seed {seed}");
    }
}

#[test]
fn strong_duality_and_generic_support() {
    let mut generic = 0;
    for seed in 0..100 {
        let mut rng = stream(&[83, seed]);
        let ni = rng.random_range(1..=6);
        let nj = rng.random_range(1..=6);
        let a = random_measure(ni, 3, &mut rng);
        let b = random_measure(nj, 3, &mut rng);
        let mw = mixture_wasserstein(&a, &b).unwrap();
        assert!(mw.duality_gap <= 1e-7, "seed {seed}: gap {}", mw.duality_gap);
        assert!((mw.dual.objective - mw.value).abs() <= 1e-7);
        if check_subset_sum(&a.weights, &b.weights, 1e-9).unwrap().holds {
            generic += 1;
            assert_eq!(mw.plan.support_size(), ni + nj - 1, "seed {seed}");
        }
    }
    assert!(generic >= 90, "{generic}");
}

#[test]
fn subset_sum_cases() {
    let half = check_subset_sum(&[0.5, 0.5], &[0.5, 0.5], 1e-9).unwrap();
    assert!(!half.holds);
    assert_eq!(half.violation, Some((vec![0], vec![0])));
    assert!(check_subset_sum(&[0.3, 0.7], &[0.2, 0.8], 1e-9).unwrap().holds);
    let mut rng = stream(&[84]);
    let mut holds = 0;
    for _ in 0..1000 {
        let ni = rng.random_range(1..=6);
        let nj = rng.random_range(1..=6);
        let p = random_simplex(ni, &mut rng);
        let q = random_simplex(nj, &mut rng);
        if check_subset_sum(&p, &q, 1e-12).unwrap().holds {
            holds += 1;
        }
    }
    assert!(holds >= 999, "{holds}");
}

/// Brute force over all proper subset pairs, independent of the library.
fn subset_sum_oracle(p: &[f64], q: &[f64], tol: f64) -> bool {
    let sums = |w: &[f64]| -> Vec<f64> {
        (1..(1u32 << w.len()) - 1)
            .map(|m| (0..w.len()).filter(|b| m & (1 << b) != 0).map(|b| w[b]).sum())
            .collect()
    };
    let (a, b) = (sums(p), sums(q));
    !a.iter().any(|x| b.iter().any(|y| (x - y).abs() <= tol))
}

#[test]
fn support_from_dual_round_trip() {
    let mut checked = 0;
    for seed in 0..100 {
        let mut rng = stream(&[85, seed]);
        let ni = rng.random_range(1..=5);
        let nj = rng.random_range(1..=7);
        let theta = random_modes(ni, 2, &mut rng);
        let gamma = random_modes(nj, 2, &mut rng);
        let p = random_simplex(ni, &mut rng);
        let q = random_simplex(nj, &mut rng);
        if !check_subset_sum(&p, &q, 1e-9).unwrap().holds {
            continue;
        }
        checked += 1;
        let cost = CostMatrix::between(theta.view(), gamma.view(), Metric::SqEuclidean).unwrap();
        let (plan, dual) = solve_transport(&cost, &p, &q).unwrap();
        let ds = support_from_dual(theta.view(), gamma.view(), &p, &dual.z[..ni], 1e-7).unwrap();
        assert!(ds.consistent());
        assert_eq!(ds.pattern.mask, plan.support(), "seed {seed}");
        for j in 0..nj {
            assert!((ds.z_tail[j] - dual.z[ni + j]).abs() < 1e-7, "seed {seed}");
        }
    }
    assert!(checked >= 90);
}

#[test]
fn single_mode_dual_pattern_is_full() {
    let gamma = random_modes(5, 3, &mut stream(&[86]));
    let ds = support_from_dual(array![[0.1, 0.2, 0.3]].view(), gamma.view(), &[1.0], &[-0.4], 1e-7).unwrap();
    assert!(ds.pattern.mask.iter().all(|&b| b));
}

#[test]
fn dual_pattern_stable_under_small_perturbation() {
    // Two well-separated groups with distinct sizes.
    let theta = array![[0.0, 0.0], [20.0, 0.0]];
    let gamma = array![[-1.0, 0.5], [1.0, -0.5], [0.0, 1.0], [19.0, 0.0], [21.0, 1.0]];
    let p = [0.55, 0.45];
    let q = [0.2, 0.15, 0.25, 0.3, 0.1];
    let cost = CostMatrix::between(theta.view(), gamma.view(), Metric::SqEuclidean).unwrap();
    let (plan, dual) = solve_transport(&cost, &p, &q).unwrap();
    let head: Vec<f64> = dual.z[..2].iter().zip([1e-2, -1e-2]).map(|(z, d)| z + d).collect();
    // Tightness is judged at a tolerance above the perturbation size.
    let ds = support_from_dual(theta.view(), gamma.view(), &p, &head, 1e-3).unwrap();
    assert_eq!(ds.pattern.mask, plan.support());
}

#[test]
fn projection_identity_and_two_pairs() {
    let t = random_measure(4, 2, &mut stream(&[87]));
    let pr = project_to_i_modes(&t, 4, 4, &mut stream(&[1])).unwrap();
    assert!(pr.mw2.abs() < 1e-15);

    let gamma = array![[-5.0, 0.0], [-5.0, 0.3], [5.0, 0.0], [5.2, 0.0]];
    let q = vec![0.1, 0.4, 0.3, 0.2];
    let target = GmmMeasure::new(gamma.clone(), q.clone()).unwrap();
    let pr = project_to_i_modes(&target, 2, 8, &mut stream(&[2])).unwrap();
    let mut best = f64::INFINITY;
    for mask in 0u32..16 {
        let groups: Vec<Vec<usize>> = [0, 1].iter().map(|&g| (0..4).filter(|j| (mask >> j) & 1 == g).collect()).collect();
        let mut cost = 0.0;
        for grp in &groups {
            let m: f64 = grp.iter().map(|&j| q[j]).sum();
            if m == 0.0 {
                continue;
            }
            let c: Vec<f64> = (0..2).map(|k| grp.iter().map(|&j| q[j] * gamma[[j, k]]).sum::<f64>() / m).collect();
            cost += grp.iter().map(|&j| q[j] * ((gamma[[j, 0]] - c[0]).powi(2) + (gamma[[j, 1]] - c[1]).powi(2))).sum::<f64>();
        }
        best = best.min(cost);
    }
    assert!((pr.mw2 - best).abs() < 1e-12);
    let left = (0..2).find(|&i| pr.measure.modes[[i, 0]] < 0.0).unwrap();
    assert!((pr.measure.weights[left] - 0.5).abs() < 1e-12);
    assert!((pr.measure.modes[[left, 1]] - 0.4 * 0.3 / 0.5).abs() < 1e-12);
}

#[test]
fn projection_matches_exhaustive_minimum() {
    for seed in 0..50 {
        let mut rng = stream(&[88, seed]);
        let nj = rng.random_range(2..=8);
        let ni = rng.random_range(1..=nj.min(4));
        let target = random_measure(nj, 2, &mut rng);
        let pr = project_to_i_modes(&target, ni, 8, &mut rng).unwrap();
        let want = exhaustive_hard_projection(target.modes.view(), &target.weights, ni);
        assert!((pr.mw2 - want).abs() <= 1e-7, "seed {seed}: {} vs {want}", pr.mw2);
        assert!(pr.history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        let b = verify_barycenter(pr.measure.modes.view(), target.modes.view(), &pr.plan, 1e-7).unwrap();
        assert!(b.passed, "seed {seed}: {}", b.max);
    }
}

#[test]
fn barycenter_residual_is_linear() {
    let mut rng = stream(&[89]);
    let gamma = random_modes(3, 2, &mut rng);
    let plan = TransportPlan {
        v: Array2::eye(3),
        p: vec![0.2, 0.3, 0.5],
        q: vec![0.2, 0.3, 0.5],
        objective: 0.0,
        degenerate: true,
    };
    let exact = verify_barycenter(gamma.view(), gamma.view(), &plan, 1e-12).unwrap();
    assert_eq!(exact.max, 0.0);
    let delta = array![[0.3, -0.4], [0.0, 0.0], [1e-3, 0.0]];
    let moved = &gamma + &delta;
    let r = verify_barycenter(moved.view(), gamma.view(), &plan, 1e-7).unwrap();
    assert!((r.values[0] - 0.5).abs() < 1e-12);
    assert!((r.values[2] - 1e-3).abs() < 1e-12);
    assert!(!r.passed);
}

#[test]
fn weight_optimality_cases() {
    let gamma = array![[-5.0, 0.0], [-5.0, 1.0], [5.0, 0.0], [5.0, 1.0]];
    let q = vec![0.25; 4];
    let target = GmmMeasure::new(gamma.clone(), q.clone()).unwrap();

    let one = project_to_i_modes(&target, 1, 2, &mut stream(&[3])).unwrap();
    let r1 = verify_weight_optimality(one.measure.modes.view(), gamma.view(), &one.plan, 1e-12).unwrap();
    assert_eq!(r1.max, 0.0);

    let pr = project_to_i_modes(&target, 2, 8, &mut stream(&[4])).unwrap();
    let r = verify_weight_optimality(pr.measure.modes.view(), gamma.view(), &pr.plan, 1e-7).unwrap();
    assert!(r.passed && r.max <= 1e-7, "{}", r.max);

    let skewed = solve(&pr.measure.modes, &gamma, &[0.25, 0.75], &q);
    let bad = verify_weight_optimality(pr.measure.modes.view(), gamma.view(), &skewed, 1e-7).unwrap();
    assert!(bad.max > 1e-3);
}

#[test]
fn single_mode_dof_follows_paper_count() {
    let mut rng = stream(&[90]);
    for (nj, d) in [(5, 2), (7, 3), (4, 4), (9, 2)] {
        let gamma = random_modes(nj, d, &mut rng);
        let q = random_simplex(nj, &mut rng);
        let target = GmmMeasure::new(gamma.clone(), q).unwrap();
        let pr = project_to_i_modes(&target, 1, 1, &mut rng).unwrap();
        let support = SupportPattern { mask: pr.plan.support() };
        let sys = dof_analysis(&support, gamma.view(), pr.measure.modes.view(), &[1.0], None, &PAPER_CONSTRAINTS).unwrap();
        assert_eq!(sys.paper_dof, nj as i64 - d as i64);
        assert_eq!(sys.num_vars, nj + 1);
        assert_eq!(sys.rank, (d + 1).min(nj + 1));
        assert_eq!(sys.dof, sys.num_vars as i64 - sys.rank as i64);
    }
}

#[test]
fn duplicate_targets_are_rank_deficient() {
    let gamma = array![[1.0, 2.0], [1.0, 2.0], [0.0, 0.0]];
    let support = SupportPattern { mask: Array2::from_elem((1, 3), true) };
    let theta = array![[0.5, 1.0]];
    let sys = dof_analysis(&support, gamma.view(), theta.view(), &[1.0], None, &RECONSTRUCTION_CONSTRAINTS).unwrap();
    assert!(sys.rank_deficient);
}

#[test]
fn reconstruction_identity_and_single_mode() {
    let gamma = random_modes(4, 2, &mut stream(&[91]));
    let support = SupportPattern { mask: Array2::from_shape_fn((4, 4), |(i, j)| i == j) };
    let r = reconstruct_plan(&support, gamma.view(), gamma.view(), &[0.25; 4], None, &[ConstraintKind::RowSum]).unwrap();
    assert!(max_abs_diff(&r.plan.unwrap().v, &Array2::eye(4)) < 1e-12);

    let q = [0.1, 0.2, 0.3, 0.4];
    let full = SupportPattern { mask: Array2::from_elem((1, 4), true) };
    let theta = array![[0.0, 0.0]];
    let r = reconstruct_plan(&full, gamma.view(), theta.view(), &[1.0], Some(&q), &[ConstraintKind::Marginal]).unwrap();
    let v = r.plan.unwrap().v;
    for j in 0..4 {
        assert!((v[[0, j]] - q[j]).abs() < 1e-12);
    }
}

#[test]
fn reconstruction_round_trip_through_solver() {
    let (mut unique, mut total) = (0, 0);
    for seed in 0..100 {
        let mut rng = stream(&[92, seed]);
        let (ni, d) = (3, 2);
        let nj = rng.random_range(4..=ni * d + 1);
        let theta = random_modes(ni, d, &mut rng);
        let gamma = random_modes(nj, d, &mut rng);
        let p = random_simplex(ni, &mut rng);
        let q = random_simplex(nj, &mut rng);
        if !check_subset_sum(&p, &q, 1e-9).unwrap().holds {
            continue;
        }
        total += 1;
        let plan = solve(&theta, &gamma, &p, &q);
        let support = SupportPattern { mask: plan.support() };
        // The barycenter rows of mode i only involve row i, so a row is pinned
        // down exactly when its support has at most D + 1 atoms.
        let widest = (0..ni).map(|i| (0..nj).filter(|&j| support.mask[[i, j]]).count()).max().unwrap();
        let theta_bar = Array2::from_shape_fn((ni, d), |(i, k)| (0..nj).map(|j| plan.v[[i, j]] * gamma[[j, k]]).sum::<f64>());
        let r = reconstruct_plan(&support, gamma.view(), theta_bar.view(), &p, None, &RECONSTRUCTION_CONSTRAINTS).unwrap();
        assert!(r.consistent, "seed {seed}: residual {}", r.residual);
        if widest <= d + 1 {
            let got = r.plan.as_ref().unwrap_or_else(|| panic!("seed {seed}: null dim {}", r.null_dim));
            assert!(max_abs_diff(&got.v, &plan.v) < 1e-6, "seed {seed}");
            unique += 1;
        } else {
            assert!(r.null_dim > 0);
        }
    }
    assert!(unique > 0 && total >= 90);
}

fn clustered_instance(nj: usize, ni: usize, d: usize, rng: &mut impl Rng) -> (Array2<f64>, Vec<f64>) {
    (clustered_modes(nj, ni, d, 10.0, 0.5, rng).unwrap(), random_simplex(nj, rng))
}

#[test]
fn clustered_projection_plans_are_identified() {
    let mut recovered = 0;
    for seed in 0..40 {
        let mut rng = stream(&[93, seed]);
        let (nj, d) = (12usize, 4usize);
        let ni = nj.div_ceil(d);
        let (gamma, q) = clustered_instance(nj, ni, d, &mut rng);
        let target = GmmMeasure::new(gamma.clone(), q).unwrap();
        let pr = project_to_i_modes(&target, ni, 8, &mut rng).unwrap();
        for j in 0..nj {
            let same: Vec<usize> = (0..nj).filter(|&k| cluster_of(k, nj, ni) == cluster_of(j, nj, ni)).collect();
            assert!(same.iter().all(|&k| pr.assignment[k] == pr.assignment[j]));
        }
        let support = SupportPattern { mask: pr.plan.support() };
        let sys = dof_analysis(&support, gamma.view(), pr.measure.modes.view(), &pr.measure.weights, None, &PAPER_CONSTRAINTS).unwrap();
        assert!(sys.paper_dof <= 0);
        let r = reconstruct_plan(&support, gamma.view(), pr.measure.modes.view(), &pr.measure.weights, None, &RECONSTRUCTION_CONSTRAINTS).unwrap();
        if let Some(plan) = r.plan {
            if max_abs_diff(&plan.v, &pr.plan.v) < 1e-6 {
                recovered += 1;
            }
        }
    }
    assert!(recovered >= 38, "{recovered}/40");
}

#[test]
fn single_mode_dual_is_ill_posed() {
    let mut rng = stream(&[94]);
    for _ in 0..10 {
        let gamma = random_modes(6, 3, &mut rng);
        let q = random_simplex(6, &mut rng);
        let theta: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = demonstrate_i1_illposed(&theta, gamma.view(), &q).unwrap();
        assert!(r.z1_coefficient.abs() < 1e-12);
        assert!(r.objective_range < 1e-10);
        for z in -10..=10 {
            let v = reduced_dual_objective(Array2::from_shape_vec((1, 3), theta.clone()).unwrap().view(), gamma.view(), &[1.0], &q, &[z as f64]).unwrap();
            assert!((v - r.objective[0]).abs() < 1e-10);
        }
    }
    let gamma = random_modes(5, 2, &mut rng);
    let q = random_simplex(5, &mut rng);
    let theta = random_modes(2, 2, &mut rng);
    let p = [0.4, 0.6];
    let values: Vec<f64> = (-10..=10)
        .map(|z| reduced_dual_objective(theta.view(), gamma.view(), &p, &q, &[z as f64, 0.0]).unwrap())
        .collect();
    let range = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - values.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(range > 1e-3, "{range}");
}

#[test]
fn oracle_pipeline_recovers_held_out_weights() {
    let mut rng = stream(&[95]);
    let (nj, d, ni) = (12, 4, 3);
    let gamma = clustered_modes(nj, ni, d, 10.0, 0.5, &mut rng).unwrap();
    let test: Vec<Condition> = (0..20)
        .map(|_| Condition { q: random_simplex(nj, &mut rng), y: vec![rng.random(), rng.random()] })
        .collect();
    let rep = theory_pipeline(&[], &test, gamma.view(), ni, &PipelineConfig::default()).unwrap();
    assert_eq!(rep.failures, 0);
    assert!(rep.max_tv.unwrap() <= 1e-5, "{:?}", rep.max_tv);
}

#[test]
fn single_mode_pipeline_reduces_to_direct_prediction() {
    let mut rng = stream(&[96]);
    let gamma = random_modes(6, 2, &mut rng);
    let a = random_modes(6, 2, &mut rng);
    let make = |y: [f64; 2]| {
        let logits: Vec<f64> = (0..6).map(|j| a[[j, 0]] * y[0] + a[[j, 1]] * y[1]).collect();
        Condition { q: mixflow_core::nn::softmax(&logits), y: y.to_vec() }
    };
    let train: Vec<Condition> = (0..16).map(|_| make([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])).collect();
    let test: Vec<Condition> = (0..4).map(|_| make([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])).collect();
    let cfg = PipelineConfig { predictor: PredictorKind::Linear, ..PipelineConfig::default() };
    let rep = theory_pipeline(&train, &test, gamma.view(), 1, &cfg).unwrap();
    for c in &rep.conditions {
        assert_eq!(c.tv, c.direct_tv, "condition {}", c.index);
    }
    let oracle = theory_pipeline(&[], &test, gamma.view(), 1, &PipelineConfig::default()).unwrap();
    assert!(oracle.conditions.iter().all(|c| c.tv == Some(0.0)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn subset_sum_agrees_with_brute_force(
        p in prop::collection::vec(1u32..20, 1..6),
        q in prop::collection::vec(1u32..20, 1..6),
    ) {
        // Small integer weights make coincidences common.
        let norm = |w: &[u32]| {
            let s: u32 = w.iter().sum();
            w.iter().map(|&x| x as f64 / s as f64).collect::<Vec<_>>()
        };
        let (p, q) = (norm(&p), norm(&q));
        prop_assert_eq!(check_subset_sum(&p, &q, 1e-9).unwrap().holds, subset_sum_oracle(&p, &q, 1e-9));
    }

    #[test]
    fn projection_never_beats_exhaustive(seed in any::<u64>(), nj in 2usize..7) {
        let mut rng = stream(&[97, seed]);
        let ni = rng.random_range(1..=nj);
        let target = random_measure(nj, 2, &mut rng);
        let pr = project_to_i_modes(&target, ni, 4, &mut rng).unwrap();
        let exact = exhaustive_hard_projection(target.modes.view(), &target.weights, ni);
        prop_assert!(pr.mw2 >= exact - 1e-9);
        let mw = mixture_wasserstein(&pr.measure, &target).unwrap();
        prop_assert!(mw.value <= pr.mw2 + 1e-9);
    }
}
