//! Property coverage for graph sampling and the Metropolis mixing pair.

use declasso::topology::{
    check_assumption1, metropolis_pair, sample_connected_graph,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn metropolis_pair_satisfies_every_structural_check(
        seed in 0u64..100_000,
        n in 3usize..=10,
        extra in 0usize..16,
    ) {
        let max_e = n * (n - 1) / 2;
        let e = ((n - 1) + extra % (max_e - n + 2)).min(max_e);
        let g = sample_connected_graph(n, e, seed).unwrap();
        prop_assert_eq!(g.n_edges(), e);
        let pair = metropolis_pair(&g);
        let report = check_assumption1(&g, &pair, 1e-10);
        prop_assert!(
            report.all_pass(),
            "graph n={} e={} seed={} failed: {:?}",
            n, e, seed, report.failed()
        );
    }

    #[test]
    fn sampled_graphs_are_connected(seed in 0u64..100_000, n in 2usize..=12) {
        let e = n - 1; // spanning-tree sized sets stress the rejection loop
        let g = sample_connected_graph(n, e, seed).unwrap();
        // Connectivity is a construction invariant; a second build from the
        // same edges must succeed.
        let rebuilt = declasso::topology::CommGraph::new(n, g.edges().to_vec());
        prop_assert!(rebuilt.is_ok());
    }
}
