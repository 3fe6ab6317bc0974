//! Communication graphs and mixing matrices.
//!
//! Graphs are undirected, connected and simple. The mixing matrices `W`
//! (Metropolis weights) and `W_tilde = (I + W) / 2` drive the consensus steps
//! of the solvers; [`check_assumption1`] verifies the structural conditions
//! they must satisfy (symmetry, graph sparsity, row sums, the semidefinite
//! ordering `(I+W)/2 >= W_tilde >= W >= ...` and the one-dimensional null
//! space of `W_tilde - W`).

use crate::linalg::symmetric_eigen;
use crate::{Error, Result};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use std::fmt::Write as _;

/// Undirected connected communication topology.
///
/// Edges are stored as `(i, j)` with `i < j`; neighbor lists are derived at
/// construction. Instances are immutable after creation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGraph {
    n_nodes: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl CommGraph {
    /// Builds a graph, validating simplicity and connectivity.
    pub fn new(n_nodes: usize, mut edges: Vec<(usize, usize)>) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::InvalidParameter("graph needs at least one node".into()));
        }
        for e in edges.iter_mut() {
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
            if e.0 == e.1 {
                return Err(Error::Validation(format!("self-loop at node {}", e.0)));
            }
            if e.1 >= n_nodes {
                return Err(Error::Validation(format!(
                    "edge ({}, {}) out of range for {} nodes",
                    e.0, e.1, n_nodes
                )));
            }
        }
        edges.sort_unstable();
        if edges.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Validation("duplicate edge".into()));
        }
        let mut neighbors = vec![Vec::new(); n_nodes];
        for &(i, j) in &edges {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for list in neighbors.iter_mut() {
            list.sort_unstable();
        }
        let g = CommGraph {
            n_nodes,
            edges,
            neighbors,
        };
        if !g.is_connected() {
            return Err(Error::Validation("graph is not connected".into()));
        }
        Ok(g)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.edges.binary_search(&(a, b)).is_ok()
    }

    /// BFS reachability from node 0.
    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n_nodes];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = queue.pop_front() {
            for &j in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    queue.push_back(j);
                }
            }
        }
        count == self.n_nodes
    }
}

/// Samples a connected graph uniformly over edge sets of the requested size.
///
/// Draws an edge set uniformly at random and rejects until connected, so the
/// result is uniform over connected graphs with exactly `n_edges` edges.
pub fn sample_connected_graph(n_nodes: usize, n_edges: usize, seed: u64) -> Result<CommGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_connected_graph_with(n_nodes, n_edges, &mut rng)
}

/// As [`sample_connected_graph`], drawing from a caller-provided stream.
pub fn sample_connected_graph_with(
    n_nodes: usize,
    n_edges: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CommGraph> {
    if n_nodes == 0 {
        return Err(Error::InvalidParameter("graph needs at least one node".into()));
    }
    let max_edges = n_nodes * (n_nodes - 1) / 2;
    if n_edges + 1 < n_nodes || n_edges > max_edges {
        return Err(Error::InvalidParameter(format!(
            "cannot build a connected graph on {n_nodes} nodes with {n_edges} edges \
             (need {} ..= {max_edges})",
            n_nodes - 1
        )));
    }
    let mut all: Vec<(usize, usize)> = Vec::with_capacity(max_edges);
    for i in 0..n_nodes {
        for j in (i + 1)..n_nodes {
            all.push((i, j));
        }
    }
    loop {
        // Partial Fisher-Yates: the first n_edges slots become the sample.
        let mut pool = all.clone();
        for k in 0..n_edges {
            let pick = k + rng.random_range(0..pool.len() - k);
            pool.swap(k, pick);
        }
        pool.truncate(n_edges);
        if let Ok(g) = CommGraph::new(n_nodes, pool) {
            return Ok(g);
        }
    }
}

/// Metropolis weights: `w_ij = 1 / (1 + max(deg_i, deg_j))` on edges, the
/// diagonal fills each row to sum one. Symmetric and doubly stochastic.
pub fn metropolis_weights(g: &CommGraph) -> Array2<f64> {
    let n = g.n_nodes();
    let mut w = Array2::<f64>::zeros((n, n));
    for &(i, j) in g.edges() {
        let v = 1.0 / (1.0 + g.degree(i).max(g.degree(j)) as f64);
        w[[i, j]] = v;
        w[[j, i]] = v;
    }
    for i in 0..n {
        let off: f64 = g.neighbors(i).iter().map(|&j| w[[i, j]]).sum();
        w[[i, i]] = 1.0 - off;
    }
    w
}

/// The two mixing matrices used by PG-EXTRA.
#[derive(Debug, Clone)]
pub struct MixingPair {
    pub w: Array2<f64>,
    pub w_tilde: Array2<f64>,
}

/// Builds the pair `(W, (I + W) / 2)` after validating the input weights.
pub fn make_pg_extra_pair(g: &CommGraph, w: Array2<f64>) -> Result<MixingPair> {
    let n = g.n_nodes();
    let tol = 1e-10;
    if w.nrows() != n || w.ncols() != n {
        return Err(Error::Validation(format!(
            "mixing matrix is {}x{}, graph has {n} nodes",
            w.nrows(),
            w.ncols()
        )));
    }
    for i in 0..n {
        let mut row_sum = 0.0;
        for j in 0..n {
            if (w[[i, j]] - w[[j, i]]).abs() > tol {
                return Err(Error::Validation(format!("W not symmetric at ({i}, {j})")));
            }
            if i != j && !g.has_edge(i, j) && w[[i, j]].abs() > tol {
                return Err(Error::Validation(format!(
                    "W has weight {} on non-edge ({i}, {j})",
                    w[[i, j]]
                )));
            }
            row_sum += w[[i, j]];
        }
        if (row_sum - 1.0).abs() > tol {
            return Err(Error::Validation(format!("row {i} of W sums to {row_sum}")));
        }
    }
    let mut w_tilde = w.clone() * 0.5;
    for i in 0..n {
        w_tilde[[i, i]] += 0.5;
    }
    Ok(MixingPair { w, w_tilde })
}

/// One named structural check with its residual.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub residual: f64,
    pub pass: bool,
}

/// Outcome of [`check_assumption1`].
#[derive(Debug, Clone)]
pub struct MixingReport {
    pub checks: Vec<CheckResult>,
}

impl MixingReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failed(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }
}

/// Verifies every structural condition the pair must satisfy for PG-EXTRA.
///
/// Failures are returned as data, never as errors: each check carries a
/// residual and passes when the residual is within `tol` (strict positivity
/// checks pass when the smallest required entry exceeds `tol`).
pub fn check_assumption1(g: &CommGraph, pair: &MixingPair, tol: f64) -> MixingReport {
    let n = g.n_nodes();
    let w = &pair.w;
    let wt = &pair.w_tilde;
    let mut checks = Vec::new();

    let sym_residual = |m: &Array2<f64>| {
        let mut r: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                r = r.max((m[[i, j]] - m[[j, i]]).abs());
            }
        }
        r
    };
    let push = |checks: &mut Vec<CheckResult>, name, residual: f64| {
        checks.push(CheckResult {
            name,
            residual,
            pass: residual <= tol,
        });
    };

    push(&mut checks, "W symmetric", sym_residual(w));
    push(&mut checks, "W_tilde symmetric", sym_residual(wt));

    // Zero off the graph, strictly positive on edges and the diagonal.
    let mut off_graph: f64 = 0.0;
    let mut min_on_graph = f64::INFINITY;
    for m in [w, wt] {
        for i in 0..n {
            min_on_graph = min_on_graph.min(m[[i, i]]);
            for j in 0..n {
                if i == j {
                    continue;
                }
                if g.has_edge(i, j) {
                    min_on_graph = min_on_graph.min(m[[i, j]]);
                } else {
                    off_graph = off_graph.max(m[[i, j]].abs());
                }
            }
        }
    }
    push(&mut checks, "zero off the graph", off_graph);
    checks.push(CheckResult {
        name: "positive on edges and diagonal",
        residual: -min_on_graph,
        pass: min_on_graph > tol,
    });

    let row_sum_residual = |m: &Array2<f64>| {
        (0..n)
            .map(|i| ((0..n).map(|j| m[[i, j]]).sum::<f64>() - 1.0).abs())
            .fold(0.0f64, f64::max)
    };
    push(&mut checks, "W row sums one", row_sum_residual(w));
    push(&mut checks, "W_tilde row sums one", row_sum_residual(wt));

    let (wt_vals, _) = symmetric_eigen(wt);
    push(
        &mut checks,
        "W_tilde PSD",
        (-wt_vals[0]).max(0.0),
    );
    push(
        &mut checks,
        "lambda_max(W_tilde) = 1",
        (wt_vals[n - 1] - 1.0).abs(),
    );

    let mut half = w * 0.5;
    for i in 0..n {
        half[[i, i]] += 0.5;
    }
    let upper = &half - wt;
    let (upper_vals, _) = symmetric_eigen(&upper);
    push(
        &mut checks,
        "(I + W)/2 - W_tilde PSD",
        (-upper_vals[0]).max(0.0),
    );

    let diff = wt - w;
    let (diff_vals, diff_vecs) = symmetric_eigen(&diff);
    push(
        &mut checks,
        "W_tilde - W PSD",
        (-diff_vals[0]).max(0.0),
    );

    // null(W_tilde - W) = span{1}: smallest eigenvalue ~ 0 with eigenvector
    // aligned with 1, second-smallest strictly positive.
    if n == 1 {
        checks.push(CheckResult {
            name: "null(W_tilde - W) = span{1}",
            residual: diff_vals[0].abs(),
            pass: diff_vals[0].abs() <= tol,
        });
    } else {
        let align: f64 = (0..n).map(|k| diff_vecs[[k, 0]]).sum::<f64>().abs() / (n as f64).sqrt();
        let small_ok = diff_vals[0].abs() <= tol && (1.0 - align) <= tol;
        let gap_ok = diff_vals[1] > tol;
        checks.push(CheckResult {
            name: "null(W_tilde - W) = span{1}",
            residual: if small_ok { -diff_vals[1] } else { diff_vals[0].abs().max(1.0 - align) },
            pass: small_ok && gap_ok,
        });
    }

    MixingReport { checks }
}

/// Symmetric PSD square root via eigendecomposition.
///
/// Eigenvalues below `-eig_floor` are rejected; eigenvalues inside the floor
/// are numerical noise and collapse to zero before taking the root, which
/// keeps near-null directions exactly null in the result.
pub fn psd_sqrt(m: &Array2<f64>, eig_floor: f64) -> Result<Array2<f64>> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::InvalidParameter("psd_sqrt needs a square matrix".into()));
    }
    let (vals, vecs) = symmetric_eigen(m);
    if let Some(&min_eig) = vals.iter().find(|&&v| v < -eig_floor) {
        return Err(Error::NotPsd { min_eig });
    }
    let roots = Array1::from_iter(
        vals.iter()
            .map(|&v| if v <= eig_floor { 0.0 } else { v.sqrt() }),
    );
    let scaled = &vecs * &roots; // scale columns
    let mut r = scaled.dot(&vecs.t());
    // Symmetrize away rounding from the triple product.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (r[[i, j]] + r[[j, i]]);
            r[[i, j]] = v;
            r[[j, i]] = v;
        }
    }
    Ok(r)
}

/// Default eigenvalue floor for [`psd_sqrt`] on `W_tilde - W`.
pub const PSD_SQRT_FLOOR: f64 = 1e-10;

/// Writes the plain-text graph document: `n_nodes n_edges`, then one
/// `i j` pair per line with `i < j`.
pub fn write_graph(g: &CommGraph) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} {}", g.n_nodes(), g.n_edges());
    for &(i, j) in g.edges() {
        let _ = writeln!(out, "{i} {j}");
    }
    out
}

/// Parses the graph document produced by [`write_graph`].
pub fn parse_graph(text: &str) -> Result<CommGraph> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty graph document"))?;
    let mut parts = header.split_whitespace();
    let n_nodes: usize = parts
        .next()
        .ok_or_else(|| Error::parse(1, "missing node count"))?
        .parse()
        .map_err(|_| Error::parse(1, "invalid node count"))?;
    let n_edges: usize = parts
        .next()
        .ok_or_else(|| Error::parse(1, "missing edge count"))?
        .parse()
        .map_err(|_| Error::parse(1, "invalid edge count"))?;
    if parts.next().is_some() {
        return Err(Error::parse(1, "trailing tokens after header"));
    }
    if n_nodes > 1_000_000 {
        return Err(Error::parse(1, "node count out of range"));
    }
    if n_edges > n_nodes.saturating_mul(n_nodes.saturating_sub(1)) / 2 {
        return Err(Error::parse(1, "edge count exceeds the simple-graph bound"));
    }
    let mut edges = Vec::with_capacity(n_edges);
    for _ in 0..n_edges {
        let (idx, line) = lines
            .next()
            .ok_or_else(|| Error::parse(n_edges + 1, "truncated edge list"))?;
        let line_no = idx + 1;
        let mut parts = line.split_whitespace();
        let i: usize = parts
            .next()
            .ok_or_else(|| Error::parse(line_no, "missing edge endpoint"))?
            .parse()
            .map_err(|_| Error::parse(line_no, "invalid edge endpoint"))?;
        let j: usize = parts
            .next()
            .ok_or_else(|| Error::parse(line_no, "missing edge endpoint"))?
            .parse()
            .map_err(|_| Error::parse(line_no, "invalid edge endpoint"))?;
        if parts.next().is_some() {
            return Err(Error::parse(line_no, "trailing tokens on edge line"));
        }
        if i >= j {
            return Err(Error::parse(line_no, "edge endpoints must satisfy i < j"));
        }
        edges.push((i, j));
    }
    for (idx, line) in lines {
        if !line.trim().is_empty() {
            return Err(Error::parse(idx + 1, "unexpected content after edge list"));
        }
    }
    CommGraph::new(n_nodes, edges)
}

/// Convenience: Metropolis pair `(W, (I+W)/2)` for a graph.
pub fn metropolis_pair(g: &CommGraph) -> MixingPair {
    let w = metropolis_weights(g);
    make_pg_extra_pair(g, w).expect("metropolis weights always validate")
}
