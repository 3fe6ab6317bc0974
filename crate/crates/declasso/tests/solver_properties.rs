//! Cross-module solver properties: reduction to centralized ISTA, consensus,
//! fixed-point invariance, relabeling equivariance and neighbor-only reads.

use declasso::diagnostics::step_bound;
use declasso::instance::{sample_instance, InstanceConfig, LassoInstance, Stacked};
use declasso::solvers::{
    pg_extra_first_step, pg_extra_step, prox_dgd_step, run_solver, Algorithm, ParamSchedule,
    Prepared, RecordOpts, SolverRun,
};
use declasso::topology::CommGraph;
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn instance(seed: u64, n: usize, e: usize, d: usize, m: usize) -> LassoInstance {
    let cfg = InstanceConfig {
        n_nodes: n,
        n_edges: e,
        d,
        m_total: m,
        snr_db: 40.0,
        p_s: (d as f64 / 5.0).max(1.0),
        seed,
    };
    sample_instance(&cfg).unwrap()
}

#[test]
fn single_agent_pg_extra_is_ista() {
    // With one agent both mixing matrices are the 1x1 identity and the
    // update telescopes to x^{k+1} = S(x^k - alpha grad s(x^k)).
    let inst = instance(5, 1, 0, 12, 8);
    let prep = Prepared::metropolis(inst).unwrap();
    let (alpha, lambda) = (1.0 / declasso::diagnostics::lipschitz_ls(&prep), 0.05);
    let k = 50;
    let sched = ParamSchedule::constant(alpha, lambda, k).unwrap();
    let traj = run_solver(&prep, Algorithm::PgExtra, &sched, k, None, RecordOpts::default())
        .unwrap();

    let gram = prep.inst.a[0].t().dot(&prep.inst.a[0]);
    let aty = prep.inst.a[0].t().dot(&prep.inst.y[0]);
    let mut x = Array1::<f64>::zeros(12);
    let shrink = |v: f64, t: f64| {
        if v > t {
            v - t
        } else if v < -t {
            v + t
        } else {
            0.0
        }
    };
    for step in 0..k {
        let grad = gram.dot(&x) - &aty;
        x = (&x - &(&grad * alpha)).mapv(|v| shrink(v, alpha * lambda));
        for (a, b) in traj.xs[step + 1].row(0).iter().zip(x.iter()) {
            assert!(
                (a - b).abs() <= 1e-10,
                "step {step}: pg-extra {a} vs ista {b}"
            );
        }
    }
}

#[test]
fn consensus_residual_vanishes() {
    for seed in [3, 4] {
        let inst = instance(seed, 5, 6, 20, 40);
        let prep = Prepared::metropolis(inst).unwrap();
        let tq = step_bound(&prep, 1.0);
        let sched = ParamSchedule::constant(tq.alpha_max / 2.0, 0.1, 2000).unwrap();
        let traj = run_solver(&prep, Algorithm::PgExtra, &sched, 2000, None, RecordOpts::default())
            .unwrap();
        let last = *traj.consensus.last().unwrap();
        assert!(last <= 1e-6, "seed {seed}: consensus residual {last}");
    }
}

#[test]
fn converged_state_is_a_fixed_point() {
    let inst = instance(7, 4, 5, 15, 24);
    let prep = Prepared::metropolis(inst).unwrap();
    let tq = step_bound(&prep, 1.0);
    let (alpha, lambda) = (tq.alpha_max / 2.0, 0.1);
    let mut run = SolverRun::new(&prep, Algorithm::PgExtra, None, false).unwrap();
    for _ in 0..30_000 {
        run.step(alpha, lambda).unwrap();
    }
    let before = run.x().clone();
    run.step(alpha, lambda).unwrap();
    let moved = (&before - run.x())
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    assert!(moved <= 1e-9, "one extra step moved by {moved}");
}

#[test]
fn relabeling_agents_permutes_trajectories() {
    let inst = instance(11, 5, 7, 10, 20);
    let prep = Prepared::metropolis(inst.clone()).unwrap();
    // Relabel agents by a fixed permutation.
    let perm = [2usize, 0, 4, 1, 3]; // new index of each old agent
    let edges: Vec<(usize, usize)> = inst
        .graph
        .edges()
        .iter()
        .map(|&(i, j)| (perm[i], perm[j]))
        .collect();
    let graph = CommGraph::new(5, edges).unwrap();
    let mut a = vec![Array2::<f64>::zeros((0, 0)); 5];
    let mut y = vec![Array1::<f64>::zeros(0); 5];
    for old in 0..5 {
        a[perm[old]] = inst.a[old].clone();
        y[perm[old]] = inst.y[old].clone();
    }
    let permuted = LassoInstance {
        graph,
        a,
        y,
        x_star: inst.x_star.clone(),
        sigma: inst.sigma,
        d: inst.d,
    };
    let prep_p = Prepared::metropolis(permuted).unwrap();

    let sched = ParamSchedule::constant(0.01, 0.1, 25).unwrap();
    let base = run_solver(&prep, Algorithm::PgExtra, &sched, 25, None, RecordOpts::default())
        .unwrap();
    let moved = run_solver(&prep_p, Algorithm::PgExtra, &sched, 25, None, RecordOpts::default())
        .unwrap();
    for k in 0..=25 {
        for (old, &new) in perm.iter().enumerate() {
            for j in 0..10 {
                let a = base.xs[k][[old, j]];
                let b = moved.xs[k][[new, j]];
                assert!(
                    (a - b).abs() <= 1e-12,
                    "k={k} agent {old} coord {j}: {a} vs {b}"
                );
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn update_reads_only_neighbors(seed in 0u64..1000, n in 3usize..7) {
        let max_e = n * (n - 1) / 2;
        let e = (n - 1) + (seed as usize % (max_e - n + 2));
        let inst = instance(seed, n, e.min(max_e), 6, 2 * n);
        let prep = Prepared::metropolis(inst).unwrap();
        // Pick any non-adjacent (agent, far) pair if one exists.
        let pair = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .find(|&(i, j)| i != j && !prep.inst.graph.has_edge(i, j));
        if let Some((agent, far)) = pair {
            let mut rng_state = seed;
            let mut x = Stacked::zeros((n, 6));
            for v in x.iter_mut() {
                rng_state = declasso::split_seed(rng_state, 1);
                *v = (rng_state % 1000) as f64 / 500.0 - 1.0;
            }
            let mut cut = x.clone();
            cut.row_mut(far).fill(0.0);

            let (_, full_next) = prox_dgd_step(&prep, &x, 0.01, 0.1).unwrap();
            let (_, cut_next) = prox_dgd_step(&prep, &cut, 0.01, 0.1).unwrap();
            for (a, b) in full_next.row(agent).iter().zip(cut_next.row(agent).iter()) {
                prop_assert_eq!(a, b);
            }

            // Same contract for the PG-EXTRA correction step.
            let (h0, x1) = pg_extra_first_step(&prep, &x, 0.01, 0.1).unwrap();
            let mut x1_cut = x1.clone();
            x1_cut.row_mut(far).fill(0.0);
            let (_, full2) = pg_extra_step(&prep, &x1, &x, &h0, 0.01, 0.1).unwrap();
            let mut x_cut = x.clone();
            x_cut.row_mut(far).fill(0.0);
            let (_, cut2) = pg_extra_step(&prep, &x1_cut, &x_cut, &h0, 0.01, 0.1).unwrap();
            for (a, b) in full2.row(agent).iter().zip(cut2.row(agent).iter()) {
                prop_assert_eq!(a, b);
            }
        }
    }
}
