#![no_main]

use declasso::topology::{parse_graph, write_graph};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Parsing may reject the input, but must never panic; accepted graphs
    // satisfy the type invariants and round-trip exactly.
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(g) = parse_graph(text) {
            assert!(g.n_edges() + 1 >= g.n_nodes());
            let back = parse_graph(&write_graph(&g)).expect("round trip");
            assert_eq!(g, back);
        }
    }
});
