use par_riccati_core::generate::generate;
use par_riccati_core::kkt_oracle::solve_dense;
use par_riccati_core::lqr::{kkt_residual, max_deviation, rollout};
use par_riccati_core::parallel::{build_pool, make_partition, smooth, solve_parallel, solve_parallel_in, Partition};
use par_riccati_core::{riccati, LqrProblem, ToleranceSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_partition(rng: &mut ChaCha8Rng, horizon: usize) -> Partition {
    let j = rng.random_range(1..=horizon);
    let mut interior: Vec<usize> = (1..horizon).collect();
    for i in (1..interior.len()).rev() {
        interior.swap(i, rng.random_range(0..=i));
    }
    interior.truncate(j - 1);
    interior.sort_unstable();
    let mut splits = vec![0];
    splits.extend(interior);
    splits.push(horizon);
    Partition::from_split_times(splits, horizon).unwrap()
}

#[test]
fn partition_invariance_over_random_splits() {
    let tol = ToleranceSet::default();
    let pool = build_pool(2);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for trial in 0..100u64 {
        let n = rng.random_range(1..=5);
        let m = rng.random_range(1..=3);
        let t = rng.random_range(1..=24);
        let p = generate(n, m, t, 1000 + trial);
        let part = random_partition(&mut rng, t);
        let ser = riccati::solve(&p).unwrap();
        let par = solve_parallel_in(&pool, &p, &part, &tol)
            .unwrap_or_else(|e| panic!("trial {trial} splits {:?}: {e}", part.split_times()));
        let scale = 1.0 + p.data_magnitude();
        assert!(par.solution.primal_deviation(&ser) < 1e-8 * scale, "trial {trial} splits {:?}", part.split_times());
        assert!(par.link_mismatch < 1e-8, "trial {trial}: {}", par.link_mismatch);
        assert!(kkt_residual(&p, &par.solution) <= 1e-8 * scale, "trial {trial}");
    }
}

#[test]
fn middle_segment_without_control_authority() {
    let base = generate(3, 2, 12, 31);
    let mut stages = base.stages().to_vec();
    for st in &mut stages[4..8] {
        st.dynamics.fu.fill(0.0);
    }
    let p = LqrProblem::new(stages, base.terminal().clone(), base.x_init().clone()).unwrap();
    let part = make_partition(12, 3).unwrap();
    assert_eq!(part.split_times(), &[0, 4, 8, 12]);
    let par = solve_parallel_in(&build_pool(1), &p, &part, &ToleranceSet::default()).unwrap();
    let ser = riccati::solve(&p).unwrap();
    assert!(par.solution.primal_deviation(&ser) < 1e-8);
    let link = par.link.as_ref().unwrap();
    assert!((&link.link_points[0] - &ser.states[4]).amax() < 1e-8);
    assert!((&link.link_points[1] - &ser.states[8]).amax() < 1e-8);
}

#[test]
fn three_segments_give_a_two_block_link_system() {
    let n = 4;
    let p = generate(n, 2, 15, 12);
    let par = solve_parallel(&p, 3, Some(2)).unwrap();
    let link = par.link.as_ref().unwrap();
    assert_eq!(link.null_dims, vec![0, 0]);
    assert_eq!(link.matrix.dim(), 2 * n);
    assert!(link.residual <= 1e-9);
    let ser = riccati::solve(&p).unwrap();
    for (k, x) in link.link_points.iter().enumerate() {
        let tau = par.partition.split_times()[k + 1];
        assert!((x - &ser.states[tau]).amax() < 1e-8);
    }
}

#[test]
fn link_points_do_not_depend_on_worker_count() {
    let p = generate(5, 2, 40, 3);
    let reference = solve_parallel(&p, 5, Some(1)).unwrap();
    for workers in [1, 2, 3, 5] {
        for _ in 0..2 {
            let run = solve_parallel(&p, 5, Some(workers)).unwrap();
            assert_eq!(run.link.as_ref().unwrap().link_points, reference.link.as_ref().unwrap().link_points);
            assert_eq!(run.solution.states, reference.solution.states);
            assert_eq!(run.solution.lambdas, reference.solution.lambdas);
        }
    }
}

#[test]
fn smoothed_policies_reproduce_the_optimal_trajectory() {
    let tol = ToleranceSet::default();
    let pool = build_pool(2);
    for seed in 0..10u64 {
        let p = generate(2 + seed as usize % 3, 1 + seed as usize % 2, 18, 500 + seed);
        let par = solve_parallel_in(&pool, &p, &make_partition(18, 4).unwrap(), &tol).unwrap();
        let policies = smooth(&pool, &p, &par, &tol).unwrap();
        let (xs, us) = rollout(&p, &policies, p.x_init()).unwrap();
        let ser = riccati::solve(&p).unwrap();
        assert!(max_deviation(&xs, &ser.states) < 1e-8, "seed {seed}");
        assert!(max_deviation(&us, &ser.controls) < 1e-8, "seed {seed}");
    }
}

#[test]
fn smoothing_a_single_segment_is_a_no_op() {
    let p = generate(3, 1, 7, 2);
    let tol = ToleranceSet::default();
    let pool = build_pool(1);
    let par = solve_parallel_in(&pool, &p, &make_partition(7, 1).unwrap(), &tol).unwrap();
    assert_eq!(smooth(&pool, &p, &par, &tol).unwrap(), par.solution.policies);
}

#[test]
fn parallel_solution_satisfies_global_kkt() {
    let p = generate(6, 3, 20, 5);
    let dense = solve_dense(&p, None).unwrap();
    let par = solve_parallel(&p, 4, Some(2)).unwrap();
    assert!(kkt_residual(&p, &par.solution) <= 1e-8 * (1.0 + p.data_magnitude()));
    assert!(par.solution.lambda_deviation(&dense.solution) < 1e-8 * (1.0 + p.data_magnitude()));
    assert!((par.solution.objective - dense.solution.objective).abs() <= 1e-10 * dense.solution.objective.abs().max(1.0));
}
