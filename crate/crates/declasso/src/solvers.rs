//! Soft thresholding and the Prox-DGD / PG-EXTRA iteration maps.
//!
//! Both algorithms alternate a neighbor-only mixing step, a local gradient
//! step and an elementwise shrinkage. Prox-DGD:
//!
//! ```text
//! x_i^{k+1/2} = sum_j w_ij x_j^k - alpha * A_i'(A_i x_i^k - y_i)
//! x_i^{k+1}   = S_{alpha*lambda}(x_i^{k+1/2})
//! ```
//!
//! PG-EXTRA reuses that map at k = 0 and afterwards corrects with the second
//! mixing matrix and the previous half-state:
//!
//! ```text
//! x_i^{k+1/2} = sum_j w_ij x_j^k + x_i^{k-1/2} - sum_j wt_ij x_j^{k-1}
//!               - alpha * A_i'A_i (x_i^k - x_i^{k-1})
//! x_i^{k+1}   = S_{alpha*lambda}(x_i^{k+1/2})
//! ```
//!
//! Every mixing sum only reads neighbor rows, so an agent's update is
//! unchanged by arbitrary data on non-neighbor rows.

use crate::instance::{namse, LassoInstance, Stacked};
use crate::topology::{metropolis_pair, psd_sqrt, MixingPair, PSD_SQRT_FLOOR};
use crate::{Error, Result};
use ndarray::{Array1, Array2};
use std::fmt::Write as _;
use std::time::{Duration, Instant};

/// Which iteration map to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    ProxDgd,
    PgExtra,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::ProxDgd => "prox-dgd",
            Algorithm::PgExtra => "pg-extra",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "prox-dgd" => Ok(Algorithm::ProxDgd),
            "pg-extra" => Ok(Algorithm::PgExtra),
            other => Err(Error::InvalidParameter(format!("unknown algorithm '{other}'"))),
        }
    }
}

/// Per-iteration `(alpha_k, lambda_k)` lists; a classical run uses constants.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSchedule {
    alphas: Vec<f64>,
    lambdas: Vec<f64>,
}

impl ParamSchedule {
    pub fn new(alphas: Vec<f64>, lambdas: Vec<f64>) -> Result<Self> {
        if alphas.len() != lambdas.len() {
            return Err(Error::InvalidParameter(
                "schedule lists must have equal length".into(),
            ));
        }
        if alphas.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::InvalidParameter("step sizes must be positive".into()));
        }
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidParameter(
                "regularization weights must be nonnegative".into(),
            ));
        }
        Ok(ParamSchedule { alphas, lambdas })
    }

    /// Constant schedule of length `k`.
    pub fn constant(alpha: f64, lambda: f64, k: usize) -> Result<Self> {
        ParamSchedule::new(vec![alpha; k], vec![lambda; k])
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k]
    }

    pub fn lambda(&self, k: usize) -> f64 {
        self.lambdas[k]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }
}

/// Soft-thresholding `S_t(v) = sign(v) * max(|v| - t, 0)`.
pub fn soft_threshold(v: f64, t: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(Error::InvalidParameter(format!("threshold {t} must be >= 0")));
    }
    Ok(shrink(v, t))
}

#[inline]
fn shrink(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// An instance with its per-agent Gram blocks, gradient offsets and mixing
/// pair precomputed, so each iteration is a couple of matrix-vector products.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub inst: LassoInstance,
    /// `A_i' A_i`, one `d x d` block per agent.
    pub gram: Vec<Array2<f64>>,
    /// `A_i' y_i` per agent.
    pub aty: Vec<Array1<f64>>,
    pub pair: MixingPair,
}

impl Prepared {
    /// Default preparation: Metropolis `W` and `W_tilde = (I + W) / 2`.
    pub fn metropolis(inst: LassoInstance) -> Result<Self> {
        let pair = metropolis_pair(&inst.graph);
        Prepared::with_pair(inst, pair)
    }

    /// Preparation with caller-supplied mixing matrices.
    pub fn with_pair(inst: LassoInstance, pair: MixingPair) -> Result<Self> {
        inst.validate()?;
        if pair.w.nrows() != inst.n_nodes() {
            return Err(Error::Validation("mixing pair size != agent count".into()));
        }
        let gram: Vec<Array2<f64>> = inst.a.iter().map(|a| a.t().dot(a)).collect();
        let aty: Vec<Array1<f64>> = inst
            .a
            .iter()
            .zip(inst.y.iter())
            .map(|(a, y)| a.t().dot(y))
            .collect();
        Ok(Prepared {
            inst,
            gram,
            aty,
            pair,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.inst.n_nodes()
    }

    pub fn d(&self) -> usize {
        self.inst.d
    }

    /// Stacked gradient of the data-fit term: row `i` is `A_i'(A_i x_i - y_i)`.
    pub fn gradient(&self, x: &Stacked) -> Stacked {
        let mut out = Stacked::zeros(x.raw_dim());
        for i in 0..self.n_nodes() {
            let xi = x.row(i);
            let gi = self.gram[i].dot(&xi) - &self.aty[i];
            out.row_mut(i).assign(&gi);
        }
        out
    }

    /// Row `i` of `M x` using only rows `j` with `m_ij != 0` structurally,
    /// i.e. neighbors of `i` plus `i` itself.
    pub fn mix(&self, m: &Array2<f64>, x: &Stacked) -> Stacked {
        let n = self.n_nodes();
        let d = self.d();
        let mut out = Stacked::zeros((n, d));
        for i in 0..n {
            // Fixed visiting order: self first, then neighbors ascending.
            let mut row = x.row(i).to_owned() * m[[i, i]];
            for &j in self.inst.graph.neighbors(i) {
                let w = m[[i, j]];
                row.scaled_add(w, &x.row(j));
            }
            out.row_mut(i).assign(&row);
        }
        out
    }

    /// `G (x - x_prev)` per agent, the gradient-difference term of PG-EXTRA.
    pub fn gram_apply(&self, x: &Stacked) -> Stacked {
        let mut out = Stacked::zeros(x.raw_dim());
        for i in 0..self.n_nodes() {
            out.row_mut(i).assign(&self.gram[i].dot(&x.row(i)));
        }
        out
    }
}

/// Prepares a whole split in parallel with the default Metropolis pair.
pub fn prepare_all(instances: Vec<LassoInstance>) -> Result<Vec<Prepared>> {
    use rayon::prelude::*;
    instances
        .into_par_iter()
        .map(Prepared::metropolis)
        .collect()
}

fn check_shape(prep: &Prepared, x: &Stacked) -> Result<()> {
    if x.nrows() != prep.n_nodes() || x.ncols() != prep.d() {
        return Err(Error::Validation(format!(
            "estimate is {}x{}, expected {}x{}",
            x.nrows(),
            x.ncols(),
            prep.n_nodes(),
            prep.d()
        )));
    }
    Ok(())
}

fn apply_shrink(half: &Stacked, t: f64) -> Stacked {
    half.mapv(|v| shrink(v, t))
}

/// One Prox-DGD iteration. Returns the pre-threshold half state and the next
/// iterate.
pub fn prox_dgd_step(
    prep: &Prepared,
    x: &Stacked,
    alpha: f64,
    lambda: f64,
) -> Result<(Stacked, Stacked)> {
    check_shape(prep, x)?;
    if !(alpha > 0.0) || lambda < 0.0 {
        return Err(Error::InvalidParameter("need alpha > 0 and lambda >= 0".into()));
    }
    let mut half = prep.mix(&prep.pair.w, x);
    half -= &(prep.gradient(x) * alpha);
    let next = apply_shrink(&half, alpha * lambda);
    Ok((half, next))
}

/// First PG-EXTRA iteration; the map coincides with [`prox_dgd_step`].
pub fn pg_extra_first_step(
    prep: &Prepared,
    x0: &Stacked,
    alpha: f64,
    lambda: f64,
) -> Result<(Stacked, Stacked)> {
    prox_dgd_step(prep, x0, alpha, lambda)
}

/// One PG-EXTRA iteration for `k >= 1`, given the current iterate, the
/// previous iterate and the previous half state.
pub fn pg_extra_step(
    prep: &Prepared,
    x_curr: &Stacked,
    x_prev: &Stacked,
    x_half_prev: &Stacked,
    alpha: f64,
    lambda: f64,
) -> Result<(Stacked, Stacked)> {
    check_shape(prep, x_curr)?;
    check_shape(prep, x_prev)?;
    check_shape(prep, x_half_prev)?;
    if !(alpha > 0.0) || lambda < 0.0 {
        return Err(Error::InvalidParameter("need alpha > 0 and lambda >= 0".into()));
    }
    let mut half = prep.mix(&prep.pair.w, x_curr);
    half += x_half_prev;
    half -= &prep.mix(&prep.pair.w_tilde, x_prev);
    let delta = x_curr - x_prev;
    half -= &(prep.gram_apply(&delta) * alpha);
    let next = apply_shrink(&half, alpha * lambda);
    Ok((half, next))
}

/// Rolling solver state: current iterate, PG-EXTRA history, optional
/// accumulator `q^k = sum_t (W_tilde - W)^{1/2} x^t`.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub x_curr: Stacked,
    pub x_prev: Option<Stacked>,
    pub x_half_prev: Option<Stacked>,
    pub q_acc: Option<Stacked>,
    pub iter: usize,
}

/// Drives one solve step-by-step so callers can stop on their own criteria.
pub struct SolverRun<'a> {
    prep: &'a Prepared,
    algorithm: Algorithm,
    state: SolverState,
    sqrt_diff: Option<Array2<f64>>,
}

impl<'a> SolverRun<'a> {
    /// Starts a run from `x0` (zeros when `None`). `track_q` maintains the
    /// accumulator needed by the Lyapunov diagnostics.
    pub fn new(
        prep: &'a Prepared,
        algorithm: Algorithm,
        x0: Option<Stacked>,
        track_q: bool,
    ) -> Result<Self> {
        let x0 = match x0 {
            Some(x) => {
                check_shape(prep, &x)?;
                x
            }
            None => Stacked::zeros((prep.n_nodes(), prep.d())),
        };
        let (sqrt_diff, q_acc) = if track_q {
            let diff = &prep.pair.w_tilde - &prep.pair.w;
            let r = psd_sqrt(&diff, PSD_SQRT_FLOOR)?;
            let q0 = r.dot(&x0);
            (Some(r), Some(q0))
        } else {
            (None, None)
        };
        Ok(SolverRun {
            prep,
            algorithm,
            state: SolverState {
                x_curr: x0,
                x_prev: None,
                x_half_prev: None,
                q_acc,
                iter: 0,
            },
            sqrt_diff,
        })
    }

    pub fn state(&self) -> &SolverState {
        &self.state
    }

    pub fn x(&self) -> &Stacked {
        &self.state.x_curr
    }

    pub fn q(&self) -> Option<&Stacked> {
        self.state.q_acc.as_ref()
    }

    pub fn iter(&self) -> usize {
        self.state.iter
    }

    /// Advances one iteration with the given parameters. Errors with
    /// [`Error::Divergence`] as soon as a non-finite entry appears.
    pub fn step(&mut self, alpha: f64, lambda: f64) -> Result<()> {
        let (half, next) = match self.algorithm {
            Algorithm::ProxDgd => prox_dgd_step(self.prep, &self.state.x_curr, alpha, lambda)?,
            Algorithm::PgExtra => {
                if self.state.iter == 0 {
                    pg_extra_first_step(self.prep, &self.state.x_curr, alpha, lambda)?
                } else {
                    let x_prev = self.state.x_prev.as_ref().ok_or_else(|| {
                        Error::State("PG-EXTRA needs the previous iterate".into())
                    })?;
                    let x_half_prev = self.state.x_half_prev.as_ref().ok_or_else(|| {
                        Error::State("PG-EXTRA needs the previous half state".into())
                    })?;
                    pg_extra_step(
                        self.prep,
                        &self.state.x_curr,
                        x_prev,
                        x_half_prev,
                        alpha,
                        lambda,
                    )?
                }
            }
        };
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence {
                iter: self.state.iter + 1,
            });
        }
        let old = std::mem::replace(&mut self.state.x_curr, next);
        if self.algorithm == Algorithm::PgExtra {
            self.state.x_prev = Some(old);
            self.state.x_half_prev = Some(half);
        }
        if let (Some(r), Some(q)) = (&self.sqrt_diff, &mut self.state.q_acc) {
            *q += &r.dot(&self.state.x_curr);
        }
        self.state.iter += 1;
        Ok(())
    }
}

/// What to keep while running a solve.
#[derive(Debug, Clone, Copy, Default)]
pub struct RecordOpts {
    /// Also record the accumulator `q^k` per iteration.
    pub q: bool,
}

/// Everything recorded along one solve, length `K + 1` including the start.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub xs: Vec<Stacked>,
    pub qs: Option<Vec<Stacked>>,
    pub namse_db: Vec<f64>,
    /// `max_i ||x_i - mean_j x_j||_2` per iteration.
    pub consensus: Vec<f64>,
    pub elapsed: Duration,
}

impl Trajectory {
    pub fn k(&self) -> usize {
        self.xs.len() - 1
    }

    pub fn final_x(&self) -> &Stacked {
        self.xs.last().expect("trajectory holds at least x0")
    }

    pub fn final_namse(&self) -> f64 {
        *self.namse_db.last().expect("trajectory holds at least x0")
    }
}

/// Largest distance of any agent row from the row average.
pub fn consensus_residual(x: &Stacked) -> f64 {
    let n = x.nrows() as f64;
    let mean = x.sum_axis(ndarray::Axis(0)) / n;
    let mut worst = 0.0f64;
    for row in x.rows() {
        let mut dist = 0.0;
        for (v, m) in row.iter().zip(mean.iter()) {
            dist += (v - m) * (v - m);
        }
        worst = worst.max(dist.sqrt());
    }
    worst
}

/// Runs `k` iterations from `x0` (zeros by default), recording snapshots,
/// per-iteration NAMSE and consensus residuals.
pub fn run_solver(
    prep: &Prepared,
    algorithm: Algorithm,
    schedule: &ParamSchedule,
    k: usize,
    x0: Option<Stacked>,
    record: RecordOpts,
) -> Result<Trajectory> {
    if schedule.len() < k {
        return Err(Error::InvalidParameter(format!(
            "schedule supplies {} iterations, {k} requested",
            schedule.len()
        )));
    }
    let start = Instant::now();
    let mut run = SolverRun::new(prep, algorithm, x0, record.q)?;
    let mut xs = Vec::with_capacity(k + 1);
    let mut qs = record.q.then(|| Vec::with_capacity(k + 1));
    let mut namse_db = Vec::with_capacity(k + 1);
    let mut consensus = Vec::with_capacity(k + 1);

    // A zero ground truth leaves the metric undefined; record NaN rather
    // than aborting the solve.
    let metric = |x: &Stacked| match namse(x, &prep.inst.x_star) {
        Ok(v) => Ok(v),
        Err(Error::UndefinedMetric(_)) => Ok(f64::NAN),
        Err(e) => Err(e),
    };

    xs.push(run.x().clone());
    if let Some(qs) = qs.as_mut() {
        qs.push(run.q().expect("q tracked").clone());
    }
    namse_db.push(metric(run.x())?);
    consensus.push(consensus_residual(run.x()));

    for t in 0..k {
        run.step(schedule.alpha(t), schedule.lambda(t))?;
        xs.push(run.x().clone());
        if let Some(qs) = qs.as_mut() {
            qs.push(run.q().expect("q tracked").clone());
        }
        namse_db.push(metric(run.x())?);
        consensus.push(consensus_residual(run.x()));
    }

    Ok(Trajectory {
        xs,
        qs,
        namse_db,
        consensus,
        elapsed: start.elapsed(),
    })
}

/// Schema string heading every trajectory CSV.
pub const TRAJECTORY_CSV_SCHEMA: &str = "# schema declasso.trajectory.v1";

/// Renders `iter, namse_db, consensus_residual` rows for a single trajectory.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{TRAJECTORY_CSV_SCHEMA}");
    let _ = writeln!(out, "iter,namse_db,consensus_residual");
    for (k, (e, c)) in traj.namse_db.iter().zip(traj.consensus.iter()).enumerate() {
        let _ = writeln!(out, "{k},{e:.10e},{c:.10e}");
    }
    out
}

/// As [`trajectory_csv`] with one extra column per agent holding
/// `||x_i^k - x*||_2`.
pub fn trajectory_csv_with_agents(traj: &Trajectory, x_star: &Array1<f64>) -> String {
    let n = traj.xs[0].nrows();
    let mut out = String::new();
    let _ = writeln!(out, "{TRAJECTORY_CSV_SCHEMA}");
    out.push_str("iter,namse_db,consensus_residual");
    for i in 0..n {
        let _ = write!(out, ",err_agent_{i}");
    }
    out.push('\n');
    for (k, (e, c)) in traj.namse_db.iter().zip(traj.consensus.iter()).enumerate() {
        let _ = write!(out, "{k},{e:.10e},{c:.10e}");
        for row in traj.xs[k].rows() {
            let dist: f64 = row
                .iter()
                .zip(x_star.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let _ = write!(out, ",{dist:.10e}");
        }
        out.push('\n');
    }
    out
}
