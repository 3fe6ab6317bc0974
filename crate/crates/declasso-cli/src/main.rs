//! Command-line experiments: dataset generation, solving, grid tuning,
//! training, evaluation, descent diagnostics and the measurement-scaling
//! study. Every subcommand is deterministic given its `--seed`; timing lives
//! in a `<out>.run.txt` sidecar so CSV payloads are byte-identical across
//! re-runs.

use clap::{Args, Parser, Subcommand};
use declasso::diagnostics::{
    fixed_point, lasso_kkt_residual, lyapunov_check, pg_extra_recorded_prefix,
    recovery_scaling_experiment, recovery_bound_check, step_bound, LambdaRule,
};
use declasso::instance::{read_dataset, sample_dataset, write_dataset, InstanceConfig};
use declasso::solvers::{prepare_all, Algorithm, ParamSchedule, Prepared};
use declasso::unroll::{
    evaluate, theta_from_str, theta_to_string, train, ThetaFile, TrainConfig,
};
use declasso::{split_seed, Error};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "declasso",
    about = "Decentralized LASSO solvers, learned schedules and diagnostics",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Instance-shape flags shared by the sampling subcommands.
#[derive(Args, Debug, Clone)]
struct ShapeArgs {
    /// Number of agents.
    #[arg(long, default_value_t = 5)]
    nodes: usize,
    /// Number of communication links.
    #[arg(long, default_value_t = 6)]
    edges: usize,
    /// Signal dimension.
    #[arg(long, default_value_t = 100)]
    d: usize,
    /// Total measurement count (split evenly over agents).
    #[arg(long, default_value_t = 300)]
    m: usize,
    /// Signal-to-noise ratio in dB.
    #[arg(long, default_value_t = 50.0)]
    snr: f64,
    /// Expected nonzero count of the ground truth; defaults to m / (2 nodes).
    #[arg(long)]
    p_s: Option<f64>,
}

impl ShapeArgs {
    fn config(&self, seed: u64) -> InstanceConfig {
        InstanceConfig {
            n_nodes: self.nodes,
            n_edges: self.edges,
            d: self.d,
            m_total: self.m,
            snr_db: self.snr,
            p_s: self.p_s.unwrap_or(self.m as f64 / (2.0 * self.nodes as f64)),
            seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample train/val/test dataset splits.
    GenData {
        #[command(flatten)]
        shape: ShapeArgs,
        /// Training split size.
        #[arg(long, default_value_t = 1000)]
        train: usize,
        /// Validation split size.
        #[arg(long, default_value_t = 100)]
        val: usize,
        /// Test split size.
        #[arg(long, default_value_t = 100)]
        test: usize,
        #[arg(long)]
        seed: u64,
        /// Output directory for train.ds / val.ds / test.ds.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a fixed-parameter solver over a split and export the NAMSE curve.
    Solve {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_parser = Algorithm::from_name, default_value = "pg-extra")]
        alg: Algorithm,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cartesian parameter sweep on a validation split.
    TuneGrid {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_parser = Algorithm::from_name, default_value = "pg-extra")]
        alg: Algorithm,
        /// Comma-separated step sizes.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.001, 0.003, 0.004, 0.005, 0.006])]
        alphas: Vec<f64>,
        /// Comma-separated regularization weights.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.05, 0.1, 0.3, 0.5])]
        lambdas: Vec<f64>,
        #[arg(long, default_value_t = 200)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the best cell as a constant schedule document.
        #[arg(long)]
        emit_theta: Option<PathBuf>,
    },
    /// Train a learned schedule and write the theta document plus a log.
    Train {
        /// Directory holding train.ds and val.ds.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_parser = Algorithm::from_name, default_value = "pg-extra")]
        alg: Algorithm,
        #[arg(long, default_value_t = 50)]
        k: usize,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        #[arg(long, default_value_t = 500)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Adam learning rate.
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long)]
        seed: u64,
        /// Step-size initialization; defaults to the dataset-derived bound.
        #[arg(long)]
        init_alpha: Option<f64>,
        #[arg(long, default_value_t = 0.1)]
        init_lambda: f64,
        /// Output path for the theta document.
        #[arg(long)]
        out: PathBuf,
        /// Output path for the training-log CSV.
        #[arg(long)]
        log: PathBuf,
    },
    /// Evaluate a schedule document on a split.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        theta: PathBuf,
        /// Expected unroll depth; errors when the document disagrees.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-step descent margins and the assembled recovery bound on one
    /// seeded instance.
    Diagnose {
        #[command(flatten)]
        shape: ShapeArgs,
        #[arg(long)]
        seed: u64,
        /// Absolute step size; overrides --alpha-scale.
        #[arg(long)]
        alpha: Option<f64>,
        /// Step size as a multiple of the admissible bound.
        #[arg(long, default_value_t = 0.5)]
        alpha_scale: f64,
        #[arg(long, default_value_t = 0.1)]
        lambda: f64,
        #[arg(long, default_value_t = 500)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Oracle recovery error against the measurement count.
    Scaling {
        /// Comma-separated total measurement counts.
        #[arg(long, value_delimiter = ',', default_values_t = vec![60, 120, 240, 480])]
        m_list: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 5)]
        nodes: usize,
        #[arg(long, default_value_t = 6)]
        edges: usize,
        #[arg(long, default_value_t = 100)]
        d: usize,
        #[arg(long, default_value_t = 20.0)]
        snr: f64,
        /// Expected nonzero count, held fixed across m.
        #[arg(long, default_value_t = 8.0)]
        p_s: f64,
        /// "theory[:coeff]" scales the weight with sqrt(m log d); "fixed:v"
        /// keeps it constant.
        #[arg(long, default_value = "theory:1.0")]
        lambda_rule: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Io(_) | Error::Parse { .. } => 2,
                Error::Divergence { .. }
                | Error::NonConvergence { .. }
                | Error::NotPsd { .. }
                | Error::Training(_) => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Timing and run metadata live next to the artifact, never inside it.
fn write_run_meta(out: &Path, lines: &[String], started: Instant) -> Result<(), Error> {
    let mut meta = String::new();
    for l in lines {
        let _ = writeln!(meta, "{l}");
    }
    let _ = writeln!(meta, "wall_ms {:.3}", started.elapsed().as_secs_f64() * 1e3);
    let mut path = out.as_os_str().to_owned();
    path.push(".run.txt");
    write_text(Path::new(&path), &meta)
}

fn load_prepared(path: &Path) -> Result<Vec<Prepared>, Error> {
    let ds = read_dataset(path)?;
    prepare_all(ds.samples)
}

fn curve_csv(namse: &[f64], consensus: &[f64]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", declasso::solvers::TRAJECTORY_CSV_SCHEMA);
    let _ = writeln!(out, "iter,namse_db,consensus_residual");
    for (k, (e, c)) in namse.iter().zip(consensus.iter()).enumerate() {
        let _ = writeln!(out, "{k},{e:.10e},{c:.10e}");
    }
    out
}

fn dispatch(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::GenData {
            shape,
            train,
            val,
            test,
            seed,
            out,
        } => cmd_gen_data(shape, train, val, test, seed, out),
        Command::Solve {
            dataset,
            alg,
            alpha,
            lambda,
            k,
            out,
        } => cmd_solve(dataset, alg, alpha, lambda, k, out),
        Command::TuneGrid {
            dataset,
            alg,
            alphas,
            lambdas,
            k,
            out,
            emit_theta,
        } => cmd_tune_grid(dataset, alg, alphas, lambdas, k, out, emit_theta),
        Command::Train {
            dataset,
            alg,
            k,
            gamma,
            epochs,
            batch,
            lr,
            seed,
            init_alpha,
            init_lambda,
            out,
            log,
        } => cmd_train(
            dataset, alg, k, gamma, epochs, batch, lr, seed, init_alpha, init_lambda, out, log,
        ),
        Command::Eval {
            dataset,
            theta,
            k,
            out,
        } => cmd_eval(dataset, theta, k, out),
        Command::Diagnose {
            shape,
            seed,
            alpha,
            alpha_scale,
            lambda,
            k,
            out,
        } => cmd_diagnose(shape, seed, alpha, alpha_scale, lambda, k, out),
        Command::Scaling {
            m_list,
            trials,
            nodes,
            edges,
            d,
            snr,
            p_s,
            lambda_rule,
            seed,
            out,
        } => cmd_scaling(m_list, trials, nodes, edges, d, snr, p_s, lambda_rule, seed, out),
    }
}

fn cmd_gen_data(
    shape: ShapeArgs,
    train: usize,
    val: usize,
    test: usize,
    seed: u64,
    out: PathBuf,
) -> Result<(), Error> {
    let started = Instant::now();
    std::fs::create_dir_all(&out)?;
    let splits = [("train", train, 0u64), ("val", val, 1), ("test", test, 2)];
    for (name, count, salt) in splits {
        let cfg = shape.config(split_seed(seed, salt));
        let ds = sample_dataset(&cfg, count)?;
        let path = out.join(format!("{name}.ds"));
        write_dataset(&path, &ds)?;
        println!("wrote {count} samples to {}", path.display());
    }
    write_run_meta(
        &out.join("gen-data"),
        &[format!("cmd gen-data seed={seed} shape={shape:?}")],
        started,
    )
}

fn cmd_solve(
    dataset: PathBuf,
    alg: Algorithm,
    alpha: f64,
    lambda: f64,
    k: usize,
    out: PathBuf,
) -> Result<(), Error> {
    let started = Instant::now();
    let split = load_prepared(&dataset)?;
    let schedule = ParamSchedule::constant(alpha, lambda, k)?;
    let outcome = evaluate(&split, alg, &schedule)?;
    write_text(&out, &curve_csv(&outcome.namse_curve, &outcome.consensus_curve))?;
    println!(
        "{} k={k} alpha={alpha} lambda={lambda}: final NAMSE {:.4} dB ({} of {} samples diverged)",
        alg.name(),
        outcome.final_namse,
        outcome.diverged,
        outcome.total
    );
    write_run_meta(
        &out,
        &[
            format!("cmd solve alg={} alpha={alpha} lambda={lambda} k={k}", alg.name()),
            format!("diverged {} of {}", outcome.diverged, outcome.total),
        ],
        started,
    )
}

const GRID_CSV_SCHEMA: &str = "# schema declasso.grid.v1";

fn cmd_tune_grid(
    dataset: PathBuf,
    alg: Algorithm,
    alphas: Vec<f64>,
    lambdas: Vec<f64>,
    k: usize,
    out: PathBuf,
    emit_theta: Option<PathBuf>,
) -> Result<(), Error> {
    let started = Instant::now();
    let split = load_prepared(&dataset)?;
    let mut cells: Vec<(f64, f64, f64, usize)> = Vec::new();
    for &alpha in &alphas {
        for &lambda in &lambdas {
            let schedule = ParamSchedule::constant(alpha, lambda, k)?;
            let (namse, diverged) = match evaluate(&split, alg, &schedule) {
                Ok(o) => (o.final_namse, o.diverged),
                // A cell where every sample diverges is reported as +inf.
                Err(Error::Training(_)) => (f64::INFINITY, split.len()),
                Err(e) => return Err(e),
            };
            cells.push((alpha, lambda, namse, diverged));
            println!("alpha={alpha} lambda={lambda}: NAMSE {namse:.4} dB ({diverged} diverged)");
        }
    }
    let best = cells
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.2.partial_cmp(&b.2).expect("no NaN cells"))
        .map(|(i, _)| i)
        .expect("non-empty grid");
    let mut csv = String::new();
    let _ = writeln!(csv, "{GRID_CSV_SCHEMA}");
    let _ = writeln!(csv, "alpha,lambda,final_namse_db,diverged,is_best");
    for (i, (a, l, e, dv)) in cells.iter().enumerate() {
        let flag = if i == best { 1 } else { 0 };
        let _ = writeln!(csv, "{a},{l},{e:.10e},{dv},{flag}");
    }
    write_text(&out, &csv)?;
    let (ba, bl, be, _) = cells[best];
    println!("best cell: alpha={ba} lambda={bl} NAMSE {be:.4} dB");
    if let Some(theta_path) = emit_theta {
        let theta = ThetaFile {
            algorithm: alg,
            gamma: 1.0,
            seed: 0,
            config_hash: "grid-argmin".into(),
            schedule: ParamSchedule::constant(ba, bl, k)?,
        };
        write_text(&theta_path, &theta_to_string(&theta))?;
    }
    write_run_meta(
        &out,
        &[format!(
            "cmd tune-grid alg={} k={k} best_alpha={ba} best_lambda={bl} best_namse={be}",
            alg.name()
        )],
        started,
    )
}

const TRAINLOG_CSV_SCHEMA: &str = "# schema declasso.trainlog.v1";

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    dataset: PathBuf,
    alg: Algorithm,
    k: usize,
    gamma: f64,
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
    init_alpha: Option<f64>,
    init_lambda: f64,
    out: PathBuf,
    log: PathBuf,
) -> Result<(), Error> {
    let started = Instant::now();
    let train_set = load_prepared(&dataset.join("train.ds"))?;
    let val_set = load_prepared(&dataset.join("val.ds"))?;
    let cfg = TrainConfig {
        algorithm: alg,
        k,
        gamma,
        epochs,
        batch_size: batch,
        learning_rate: lr,
        seed,
        init_alpha,
        init_lambda,
    };
    let outcome = train(&train_set, &val_set, &cfg)?;
    let theta = ThetaFile {
        algorithm: alg,
        gamma,
        seed,
        config_hash: cfg.config_hash(),
        schedule: outcome.params.schedule()?,
    };
    write_text(&out, &theta_to_string(&theta))?;

    let mut csv = String::new();
    let _ = writeln!(csv, "{TRAINLOG_CSV_SCHEMA}");
    let _ = writeln!(csv, "epoch,train_loss,val_namse_db");
    for e in &outcome.log {
        let _ = writeln!(csv, "{},{:.10e},{:.10e}", e.epoch, e.train_loss, e.val_namse_db);
    }
    write_text(&log, &csv)?;

    println!(
        "trained {} for {epochs} epochs; best validation NAMSE {:.4} dB at epoch {}",
        alg.name(),
        outcome.best_val_namse,
        outcome.best_epoch
    );
    let mut meta = vec![
        format!(
            "cmd train alg={} k={k} gamma={gamma} epochs={epochs} batch={batch} lr={lr} seed={seed}",
            alg.name()
        ),
        format!(
            "best_epoch {} best_val_namse {:.6}",
            outcome.best_epoch, outcome.best_val_namse
        ),
    ];
    for e in &outcome.log {
        meta.push(format!("epoch {} wall_ms {:.3}", e.epoch, e.wall_ms));
    }
    write_run_meta(&log, &meta, started)
}

fn cmd_eval(
    dataset: PathBuf,
    theta: PathBuf,
    k: Option<usize>,
    out: PathBuf,
) -> Result<(), Error> {
    let started = Instant::now();
    let text = std::fs::read_to_string(&theta)?;
    let theta = theta_from_str(&text)?;
    if let Some(k) = k {
        if k != theta.schedule.len() {
            return Err(Error::Validation(format!(
                "requested k = {k} but the schedule document has {} layers",
                theta.schedule.len()
            )));
        }
    }
    let split = load_prepared(&dataset)?;
    let outcome = evaluate(&split, theta.algorithm, &theta.schedule)?;
    write_text(&out, &curve_csv(&outcome.namse_curve, &outcome.consensus_curve))?;
    println!(
        "{} k={}: final NAMSE {:.4} dB ({} of {} samples diverged)",
        theta.algorithm.name(),
        theta.schedule.len(),
        outcome.final_namse,
        outcome.diverged,
        outcome.total
    );
    write_run_meta(
        &out,
        &[
            format!("cmd eval theta_k={}", theta.schedule.len()),
            format!("final_namse {:.6}", outcome.final_namse),
            format!("diverged {} of {}", outcome.diverged, outcome.total),
        ],
        started,
    )
}

const LYAPUNOV_CSV_SCHEMA: &str = "# schema declasso.lyapunov.v1";

fn cmd_diagnose(
    shape: ShapeArgs,
    seed: u64,
    alpha: Option<f64>,
    alpha_scale: f64,
    lambda: f64,
    k: usize,
    out: PathBuf,
) -> Result<(), Error> {
    let started = Instant::now();
    let cfg = shape.config(seed);
    let inst = declasso::instance::sample_instance(&cfg)?;
    let prep = Prepared::metropolis(inst)?;
    let probe = step_bound(&prep, 1.0);
    let alpha = alpha.unwrap_or(alpha_scale * probe.alpha_max);
    let tq = step_bound(&prep, alpha);

    let fp = fixed_point(&prep, alpha, lambda, 1e-10, 500_000)?;
    let (traj, diverged_at) = pg_extra_recorded_prefix(&prep, alpha, lambda, k)?;
    let report = lyapunov_check(&traj, &fp, &tq, &prep)?;
    let assembly = recovery_bound_check(&traj, &fp, &tq, &prep)?;

    let mut csv = String::new();
    let _ = writeln!(csv, "{LYAPUNOV_CSV_SCHEMA}");
    let _ = writeln!(csv, "k,lhs,rhs,margin");
    for (i, s) in report.steps.iter().enumerate() {
        let _ = writeln!(csv, "{i},{:.10e},{:.10e},{:.10e}", s.lhs, s.rhs, s.margin);
    }
    write_text(&out, &csv)?;

    let margin_tol = 1e-8 * report.initial_gap_sq;
    let lyapunov_pass = report.pass(margin_tol);
    let min_slack = assembly
        .iter()
        .map(|s| s.slack_rel)
        .fold(f64::INFINITY, f64::min);
    let assembly_pass = min_slack >= -1e-8;
    let kkt = lasso_kkt_residual(&prep, &fp.x_hat, lambda);

    let mut summary = String::new();
    let _ = writeln!(summary, "alpha {alpha:.10e}");
    let _ = writeln!(summary, "alpha_max {:.10e}", tq.alpha_max);
    let _ = writeln!(summary, "alpha_in_range {}", tq.alpha_in_range);
    let _ = writeln!(summary, "l_s {:.10e}", tq.l_s);
    let _ = writeln!(summary, "lambda_min_w_tilde {:.10e}", tq.lambda_min_w_tilde);
    let _ = writeln!(summary, "xi {:.10e}", tq.xi);
    let _ = writeln!(summary, "fixed_point_residual {:.10e}", fp.residual);
    let _ = writeln!(summary, "oracle_kkt_residual {kkt:.10e}");
    let _ = writeln!(summary, "initial_gap_sq {:.10e}", report.initial_gap_sq);
    let _ = writeln!(summary, "min_margin {:.10e}", report.min_margin);
    let _ = writeln!(summary, "steps_recorded {}", report.steps.len());
    if let Some(at) = diverged_at {
        let _ = writeln!(summary, "diverged_at {at}");
    }
    let _ = writeln!(
        summary,
        "lyapunov {}",
        if lyapunov_pass { "PASS" } else { "FAIL" }
    );
    let _ = writeln!(summary, "min_assembly_slack {min_slack:.10e}");
    let _ = writeln!(
        summary,
        "assembly {}",
        if assembly_pass { "PASS" } else { "FAIL" }
    );
    print!("{summary}");
    let mut sum_path = out.as_os_str().to_owned();
    sum_path.push(".summary.txt");
    write_text(Path::new(&sum_path), &summary)?;
    write_run_meta(
        &out,
        &[format!(
            "cmd diagnose seed={seed} alpha={alpha} lambda={lambda} k={k}"
        )],
        started,
    )
}

const SCALING_CSV_SCHEMA: &str = "# schema declasso.scaling.v1";

#[allow(clippy::too_many_arguments)]
fn cmd_scaling(
    m_list: Vec<usize>,
    trials: usize,
    nodes: usize,
    edges: usize,
    d: usize,
    snr: f64,
    p_s: f64,
    lambda_rule: String,
    seed: u64,
    out: PathBuf,
) -> Result<(), Error> {
    let started = Instant::now();
    let rule = parse_lambda_rule(&lambda_rule)?;
    if trials == 1 {
        eprintln!("warning: a single trial per cell gives a high-variance slope");
    }
    let base = InstanceConfig {
        n_nodes: nodes,
        n_edges: edges,
        d,
        m_total: m_list[0].max(nodes),
        snr_db: snr,
        p_s,
        seed,
    };
    let outcome = recovery_scaling_experiment(&base, &m_list, trials, rule)?;
    let mut csv = String::new();
    let _ = writeln!(csv, "{SCALING_CSV_SCHEMA}");
    let _ = writeln!(csv, "m,lambda,mse,trials");
    for p in &outcome.points {
        let _ = writeln!(csv, "{},{:.10e},{:.10e},{}", p.m, p.lambda, p.mse, p.trials);
    }
    write_text(&out, &csv)?;
    match outcome.slope {
        Some(s) => println!("log-log slope of MSE vs m: {s:.4}"),
        None => println!("slope degenerate (vanishing errors)"),
    }
    write_run_meta(
        &out,
        &[
            format!("cmd scaling seed={seed} trials={trials} rule={lambda_rule}"),
            format!("slope {:?}", outcome.slope),
        ],
        started,
    )
}

fn parse_lambda_rule(s: &str) -> Result<LambdaRule, Error> {
    if let Some(rest) = s.strip_prefix("fixed:") {
        let v: f64 = rest
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("bad lambda rule '{s}'")))?;
        return Ok(LambdaRule::Fixed(v));
    }
    if s == "theory" {
        return Ok(LambdaRule::TheoryScaled { coeff: 1.0 });
    }
    if let Some(rest) = s.strip_prefix("theory:") {
        let coeff: f64 = rest
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("bad lambda rule '{s}'")))?;
        return Ok(LambdaRule::TheoryScaled { coeff });
    }
    Err(Error::InvalidParameter(format!(
        "lambda rule '{s}' is neither 'theory[:coeff]' nor 'fixed:value'"
    )))
}
