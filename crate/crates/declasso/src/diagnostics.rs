//! Convergence certificates for PG-EXTRA and the recovery-scaling study.
//!
//! The descent certificate tracks `z^k = (q^k, x^k)` with
//! `q^k = sum_t (W_tilde - W)^{1/2} x^t` in the block norm
//! `||z||_G^2 = ||q||_F^2 + ||x||_{W_tilde}^2` and checks the per-step
//! inequality
//!
//! ```text
//! ||z^k - z_hat||_G^2 - ||z^{k+1} - z_hat||_G^2 >= xi ||z^k - z^{k+1}||_G^2,
//! xi = 1 - alpha L_s / (2 lambda_min(W_tilde))
//! ```
//!
//! against the fixed point `z_hat = (q_hat, x_hat)`, where `x_hat` solves the
//! consensus LASSO and `q_hat` satisfies
//! `(W_tilde - W)^{1/2} q_hat + alpha (grad_s(x_hat) + lambda g) = 0` for a
//! valid subgradient `g` of the l1 norm.

use crate::instance::{stack_rows, InstanceConfig, Stacked};
use crate::linalg::max_eigenvalue_power;
use crate::linalg::symmetric_eigen;
use crate::solvers::{Algorithm, Prepared, SolverRun, Trajectory};
use crate::{split_seed, Error, Result};
use ndarray::{Array1, Array2};
use rayon::prelude::*;

/// Smoothness constant of the data-fit term: `max_i lambda_max(A_i' A_i)`.
///
/// Power iteration per agent block; the eigensolver route serves as the test
/// oracle.
pub fn lipschitz_ls(prep: &Prepared) -> f64 {
    prep.gram
        .iter()
        .map(|g| max_eigenvalue_power(g, 1e-13, 50_000))
        .fold(0.0f64, f64::max)
}

/// The quantities entering the step-size bound and descent factor.
#[derive(Debug, Clone)]
pub struct StepBound {
    pub l_s: f64,
    pub lambda_min_w_tilde: f64,
    pub xi: f64,
    /// Admissible upper bound `2 lambda_min(W_tilde) / L_s`.
    pub alpha_max: f64,
    pub alpha: f64,
    pub alpha_in_range: bool,
}

/// Computes the descent factor `xi = 1 - alpha L_s / (2 lambda_min(W_tilde))`
/// and whether `alpha` sits inside the admissible range.
pub fn step_bound(prep: &Prepared, alpha: f64) -> StepBound {
    let l_s = lipschitz_ls(prep);
    let (vals, _) = symmetric_eigen(&prep.pair.w_tilde);
    let lambda_min_w_tilde = vals[0];
    let alpha_max = 2.0 * lambda_min_w_tilde / l_s;
    let xi = 1.0 - alpha * l_s / (2.0 * lambda_min_w_tilde);
    StepBound {
        l_s,
        lambda_min_w_tilde,
        xi,
        alpha_max,
        alpha,
        alpha_in_range: alpha > 0.0 && alpha < alpha_max,
    }
}

/// Squared block norm `||q||_F^2 + trace(x' W_tilde x)`.
pub fn g_norm_sq(q: &Stacked, x: &Stacked, w_tilde: &Array2<f64>) -> f64 {
    let q_term: f64 = q.iter().map(|v| v * v).sum();
    let wx = w_tilde.dot(x);
    let x_term: f64 = wx.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    q_term + x_term
}

/// Solves the consensus-collapsed LASSO
/// `min_x sum_i 1/2 ||A_i x - y_i||^2 + N lambda ||x||_1`
/// by accelerated proximal gradient with gradient-based restart.
///
/// Terminates when the scaled proximal fixed-point residual
/// `||x - S(x - s grad f(x))|| / s` drops to `tol`.
pub fn centralized_lasso_oracle(
    prep: &Prepared,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Array1<f64>> {
    if lambda < 0.0 {
        return Err(Error::InvalidParameter("lambda must be nonnegative".into()));
    }
    let d = prep.d();
    let n = prep.n_nodes() as f64;
    // Total quadratic: H = sum_i A_i' A_i, b = sum_i A_i' y_i.
    let mut h = Array2::<f64>::zeros((d, d));
    for g in &prep.gram {
        h += g;
    }
    let mut b = Array1::<f64>::zeros(d);
    for aty in &prep.aty {
        b += aty;
    }
    let l = max_eigenvalue_power(&h, 1e-13, 50_000);
    if l <= 0.0 {
        // Zero sensing: the regularized minimum is the origin.
        return Ok(Array1::zeros(d));
    }
    let step = 1.0 / l;
    let shrink_t = step * n * lambda;
    let shrink = |v: f64, t: f64| {
        if v > t {
            v - t
        } else if v < -t {
            v + t
        } else {
            0.0
        }
    };

    let mut x = Array1::<f64>::zeros(d);
    let mut momentum = x.clone();
    let mut theta = 1.0f64;
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let grad = h.dot(&momentum) - &b;
        let next = (&momentum - &(&grad * step)).mapv(|v| shrink(v, shrink_t));

        // Gradient restart: reset momentum when it points uphill.
        let restart = (&momentum - &next)
            .iter()
            .zip(next.iter().zip(x.iter()))
            .map(|(gv, (nv, xv))| gv * (nv - xv))
            .sum::<f64>()
            > 0.0;
        let theta_next = if restart {
            1.0
        } else {
            (1.0 + (1.0 + 4.0 * theta * theta).sqrt()) / 2.0
        };
        let beta = if restart { 0.0 } else { (theta - 1.0) / theta_next };
        momentum = &next + &((&next - &x) * beta);
        theta = theta_next;
        x = next;

        // Fixed-point residual at x itself.
        let gx = h.dot(&x) - &b;
        let px = (&x - &(&gx * step)).mapv(|v| shrink(v, shrink_t));
        residual = (&x - &px).iter().map(|v| v * v).sum::<f64>().sqrt() / step;
        if residual <= tol {
            return Ok(x);
        }
    }
    Err(Error::NonConvergence {
        iters: max_iter,
        residual,
    })
}

/// KKT residual of a candidate solution: the norm of
/// `sum_i A_i'(A_i x - y_i) + N lambda g` minimized over valid subgradients.
pub fn lasso_kkt_residual(prep: &Prepared, x: &Array1<f64>, lambda: f64) -> f64 {
    let n = prep.n_nodes() as f64;
    let mut grad = Array1::<f64>::zeros(prep.d());
    for (g, aty) in prep.gram.iter().zip(prep.aty.iter()) {
        grad += &(g.dot(x) - aty);
    }
    let t = n * lambda;
    let mut sq = 0.0;
    for (v, xv) in grad.iter().zip(x.iter()) {
        let r = if *xv > 0.0 {
            v + t
        } else if *xv < 0.0 {
            v - t
        } else {
            (v.abs() - t).max(0.0)
        };
        sq += r * r;
    }
    sq.sqrt()
}

/// The PG-EXTRA fixed point: consensus LASSO solution plus the accumulator
/// limit and the residual of the stationarity relation at `alpha`.
#[derive(Debug, Clone)]
pub struct FixedPoint {
    pub x_hat: Array1<f64>,
    pub x_hat_stacked: Stacked,
    pub q_hat: Stacked,
    /// `||(W_tilde - W)^{1/2} q_hat + alpha (grad_s + lambda g)||_F` minimized
    /// over valid subgradients `g`.
    pub residual: f64,
    pub alpha: f64,
    pub lambda: f64,
}

fn stationarity_residual(
    prep: &Prepared,
    sqrt_diff: &Array2<f64>,
    q: &Stacked,
    x_hat_stacked: &Stacked,
    alpha: f64,
    lambda: f64,
) -> f64 {
    let grad = prep.gradient(x_hat_stacked);
    let lead = sqrt_diff.dot(q) + &(&grad * alpha);
    let t = alpha * lambda;
    let mut sq = 0.0;
    for (lv, xv) in lead.iter().zip(x_hat_stacked.iter()) {
        let r = if *xv != 0.0 {
            lv + t * xv.signum()
        } else {
            // Pick the subgradient in [-1, 1] minimizing the entry.
            (lv.abs() - t).max(0.0)
        };
        sq += r * r;
    }
    sq.sqrt()
}

/// Computes the fixed point `(q_hat, x_hat)` for the given parameters.
///
/// `x_hat` comes from the centralized oracle. `q_hat` is the limit of the
/// running accumulator along a PG-EXTRA solve; because the stationarity
/// relation is linear in `alpha` and `x_hat` does not depend on it, the
/// accumulator is computed at a step size inside the admissible range and
/// rescaled, which also covers diagnostic calls with out-of-range `alpha`.
pub fn fixed_point(
    prep: &Prepared,
    alpha: f64,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPoint> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidParameter("alpha must be positive".into()));
    }
    let tq = step_bound(prep, alpha);
    let alpha_run = if alpha < 0.9 * tq.alpha_max {
        alpha
    } else {
        0.5 * tq.alpha_max
    };
    let x_hat = centralized_lasso_oracle(prep, lambda, tol * 0.1, max_iter)?;
    let x_hat_stacked = stack_rows(&x_hat, prep.n_nodes());

    let diff = &prep.pair.w_tilde - &prep.pair.w;
    let sqrt_diff = crate::topology::psd_sqrt(&diff, crate::topology::PSD_SQRT_FLOOR)?;

    let mut run = SolverRun::new(prep, Algorithm::PgExtra, None, true)?;
    let scale = alpha / alpha_run;
    let mut best_residual = f64::INFINITY;
    for iter in 0..max_iter {
        run.step(alpha_run, lambda)?;
        if iter % 25 == 24 {
            let x_err = {
                let mut sq = 0.0;
                for (a, b) in run.x().iter().zip(x_hat_stacked.iter()) {
                    sq += (a - b) * (a - b);
                }
                sq.sqrt()
            };
            if x_err <= tol {
                let q_scaled = run.q().expect("q tracked") * scale;
                best_residual = stationarity_residual(
                    prep,
                    &sqrt_diff,
                    &q_scaled,
                    &x_hat_stacked,
                    alpha,
                    lambda,
                );
                if best_residual <= 5.0 * tol {
                    return Ok(FixedPoint {
                        x_hat,
                        x_hat_stacked,
                        q_hat: q_scaled,
                        residual: best_residual,
                        alpha,
                        lambda,
                    });
                }
            }
        }
    }
    Err(Error::NonConvergence {
        iters: max_iter,
        residual: best_residual,
    })
}

/// Runs PG-EXTRA with the accumulator recorded, truncating the trajectory at
/// the first divergent iterate instead of failing.
///
/// Out-of-range step sizes are expected to blow up; the finite prefix is
/// exactly what the descent diagnostics need to exhibit the violation.
pub fn pg_extra_recorded_prefix(
    prep: &Prepared,
    alpha: f64,
    lambda: f64,
    k: usize,
) -> Result<(Trajectory, Option<usize>)> {
    let start = std::time::Instant::now();
    let mut run = SolverRun::new(prep, Algorithm::PgExtra, None, true)?;
    let metric =
        |x: &Stacked| crate::instance::namse(x, &prep.inst.x_star).unwrap_or(f64::NAN);
    let mut xs = vec![run.x().clone()];
    let mut qs = vec![run.q().expect("q tracked").clone()];
    let mut namse_db = vec![metric(run.x())];
    let mut consensus = vec![crate::solvers::consensus_residual(run.x())];
    let mut diverged_at = None;
    for _ in 0..k {
        match run.step(alpha, lambda) {
            Ok(()) => {
                xs.push(run.x().clone());
                qs.push(run.q().expect("q tracked").clone());
                namse_db.push(metric(run.x()));
                consensus.push(crate::solvers::consensus_residual(run.x()));
            }
            Err(Error::Divergence { iter }) => {
                diverged_at = Some(iter);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((
        Trajectory {
            xs,
            qs: Some(qs),
            namse_db,
            consensus,
            elapsed: start.elapsed(),
        },
        diverged_at,
    ))
}

/// One Lyapunov descent step: measured decrease vs required decrease.
#[derive(Debug, Clone, Copy)]
pub struct LyapunovStep {
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
}

/// Per-step descent report for a recorded PG-EXTRA trajectory.
#[derive(Debug, Clone)]
pub struct LyapunovReport {
    pub steps: Vec<LyapunovStep>,
    /// `||z^0 - z_hat||_G^2`, the natural scale for margin tolerances.
    pub initial_gap_sq: f64,
    pub min_margin: f64,
}

impl LyapunovReport {
    pub fn pass(&self, tol_abs: f64) -> bool {
        self.min_margin >= -tol_abs
    }
}

/// Evaluates the per-step descent inequality along a trajectory recorded with
/// the accumulator enabled.
pub fn lyapunov_check(
    traj: &Trajectory,
    fp: &FixedPoint,
    tq: &StepBound,
    prep: &Prepared,
) -> Result<LyapunovReport> {
    let qs = traj
        .qs
        .as_ref()
        .ok_or_else(|| Error::State("trajectory lacks accumulator recording".into()))?;
    let wt = &prep.pair.w_tilde;
    let gap = |q: &Stacked, x: &Stacked| {
        let dq = q - &fp.q_hat;
        let dx = x - &fp.x_hat_stacked;
        g_norm_sq(&dq, &dx, wt)
    };
    let initial_gap_sq = gap(&qs[0], &traj.xs[0]);
    let mut steps = Vec::with_capacity(traj.k());
    let mut min_margin = f64::INFINITY;
    for k in 0..traj.k() {
        let lhs = gap(&qs[k], &traj.xs[k]) - gap(&qs[k + 1], &traj.xs[k + 1]);
        let dq = &qs[k + 1] - &qs[k];
        let dx = &traj.xs[k + 1] - &traj.xs[k];
        let rhs = tq.xi * g_norm_sq(&dq, &dx, wt);
        let margin = lhs - rhs;
        min_margin = min_margin.min(margin);
        steps.push(LyapunovStep { lhs, rhs, margin });
    }
    Ok(LyapunovReport {
        steps,
        initial_gap_sq,
        min_margin,
    })
}

/// One step of the assembled bound: recovery error vs accumulated descent
/// plus the measured oracle error.
#[derive(Debug, Clone, Copy)]
pub struct RecoveryBoundStep {
    /// `||x^{k+1} - x*_stacked||_{W_tilde}^2`.
    pub lhs: f64,
    /// `2 ||z^0 - z_hat||_G^2 - 2 xi sum_t ||z^{t+1} - z^t||_G^2
    ///  + 2 ||x_hat_stacked - x*_stacked||_F^2`.
    pub rhs: f64,
    /// `(rhs - lhs) / scale`; nonnegative when the bound holds.
    pub slack_rel: f64,
}

/// Checks the iteration-wise recovery bound along a recorded trajectory,
/// substituting the measured oracle error for the statistical term.
pub fn recovery_bound_check(
    traj: &Trajectory,
    fp: &FixedPoint,
    tq: &StepBound,
    prep: &Prepared,
) -> Result<Vec<RecoveryBoundStep>> {
    let qs = traj
        .qs
        .as_ref()
        .ok_or_else(|| Error::State("trajectory lacks accumulator recording".into()))?;
    let wt = &prep.pair.w_tilde;
    let x_star_stacked = prep.inst.x_star_stacked();
    let oracle_err_sq: f64 = (&fp.x_hat_stacked - &x_star_stacked)
        .iter()
        .map(|v| v * v)
        .sum();
    let initial_gap = {
        let dq = &qs[0] - &fp.q_hat;
        let dx = &traj.xs[0] - &fp.x_hat_stacked;
        g_norm_sq(&dq, &dx, wt)
    };
    let mut descent_sum = 0.0;
    let mut out = Vec::with_capacity(traj.k());
    for k in 0..traj.k() {
        let dq = &qs[k + 1] - &qs[k];
        let dx = &traj.xs[k + 1] - &traj.xs[k];
        descent_sum += g_norm_sq(&dq, &dx, wt);

        let dxs = &traj.xs[k + 1] - &x_star_stacked;
        let lhs = {
            let zero = Stacked::zeros(dxs.raw_dim());
            g_norm_sq(&zero, &dxs, wt)
        };
        let rhs = 2.0 * initial_gap - 2.0 * tq.xi * descent_sum + 2.0 * oracle_err_sq;
        let scale = lhs.abs().max(rhs.abs()).max(initial_gap).max(1e-300);
        out.push(RecoveryBoundStep {
            lhs,
            rhs,
            slack_rel: (rhs - lhs) / scale,
        });
    }
    Ok(out)
}

/// How the oracle regularization scales with the measurement count in the
/// recovery-scaling experiment.
#[derive(Debug, Clone, Copy)]
pub enum LambdaRule {
    /// The same weight at every `m`.
    Fixed(f64),
    /// `coeff * sigma * sqrt(m log d) / N`, the estimation-optimal growth.
    TheoryScaled { coeff: f64 },
}

impl LambdaRule {
    pub fn lambda(&self, m: usize, d: usize, n_nodes: usize, sigma: f64) -> f64 {
        match self {
            LambdaRule::Fixed(l) => *l,
            LambdaRule::TheoryScaled { coeff } => {
                coeff * sigma * ((m as f64) * (d as f64).ln()).sqrt() / n_nodes as f64
            }
        }
    }
}

/// Mean squared oracle error per measurement count.
#[derive(Debug, Clone)]
pub struct ScalingPoint {
    pub m: usize,
    pub lambda: f64,
    /// Mean of `||x_hat_stacked - x*_stacked||_F^2` over trials.
    pub mse: f64,
    pub trials: usize,
}

/// Outcome of the scaling experiment: per-`m` errors and the log-log slope.
#[derive(Debug, Clone)]
pub struct ScalingOutcome {
    pub points: Vec<ScalingPoint>,
    /// Least-squares slope of `ln mse` against `ln m`; `None` when degenerate
    /// (fewer than two usable points or vanishing errors).
    pub slope: Option<f64>,
}

/// Mean oracle recovery error at one `(m, sigma)` cell, with per-trial seeds
/// split off `base.seed` so cells are reproducible and pairable across
/// noise levels.
pub fn oracle_mse(
    base: &InstanceConfig,
    m: usize,
    sigma: f64,
    lambda: f64,
    trials: usize,
    oracle_tol: f64,
) -> Result<f64> {
    let total: Result<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut cfg = base.clone();
            cfg.m_total = m;
            cfg.seed = split_seed(base.seed, (m as u64) << 20 | t as u64);
            let inst = crate::instance::sample_instance_with_sigmas(
                &cfg,
                &vec![sigma; cfg.n_nodes],
            )?;
            let prep = Prepared::metropolis(inst)?;
            let x_hat = centralized_lasso_oracle(&prep, lambda, oracle_tol, 400_000)?;
            let n = prep.n_nodes() as f64;
            let err: f64 = (&x_hat - &prep.inst.x_star).iter().map(|v| v * v).sum();
            Ok(n * err)
        })
        .sum();
    Ok(total? / trials as f64)
}

/// Sweeps the measurement count and fits the log-log slope of the oracle
/// recovery error. The noise level is held fixed across `m`.
pub fn recovery_scaling_experiment(
    base: &InstanceConfig,
    m_list: &[usize],
    trials: usize,
    rule: LambdaRule,
) -> Result<ScalingOutcome> {
    if m_list.len() < 2 {
        return Err(Error::InvalidParameter(
            "scaling experiment needs at least two measurement counts".into(),
        ));
    }
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be positive".into()));
    }
    let sigma = base.sigma();
    let mut points = Vec::with_capacity(m_list.len());
    for &m in m_list {
        if m % base.n_nodes != 0 {
            return Err(Error::InvalidParameter(format!(
                "m = {m} must divide evenly over {} agents",
                base.n_nodes
            )));
        }
        let lambda = rule.lambda(m, base.d, base.n_nodes, sigma);
        let mse = oracle_mse(base, m, sigma, lambda, trials, 1e-9)?;
        points.push(ScalingPoint {
            m,
            lambda,
            mse,
            trials,
        });
    }
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.mse > 0.0)
        .map(|p| ((p.m as f64).ln(), p.mse.ln()))
        .collect();
    let slope = if usable.len() < 2 {
        None
    } else {
        let n = usable.len() as f64;
        let mean_x = usable.iter().map(|(x, _)| x).sum::<f64>() / n;
        let mean_y = usable.iter().map(|(_, y)| y).sum::<f64>() / n;
        let sxx: f64 = usable.iter().map(|(x, _)| (x - mean_x) * (x - mean_x)).sum();
        let sxy: f64 = usable
            .iter()
            .map(|(x, y)| (x - mean_x) * (y - mean_y))
            .sum();
        Some(sxy / sxx)
    };
    Ok(ScalingOutcome { points, slope })
}
