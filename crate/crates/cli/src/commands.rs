//! The five commands. Each writes only inside the `--out` directory.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tracenorm::linalg::Mat;
use tracenorm::oracle::{self, DenseProblem, OracleConfig};
use tracenorm::problems::rmse;
use tracenorm::regpath::{compute_path_traced, PathMode, PathRecord, PathResult};
use tracenorm::solver::{minimize_traced, SolveStatus, TraceEvent};
use tracenorm::synth::{self, NoiseLevel};
use tracenorm::{FixedRankPoint, MatrixCompletion, MultivariateRegression, ProblemModel, RegressionData};

use crate::config::{RunConfig, SharedArgs};
use crate::io::{read_dense, read_json, read_observed, write_dense, write_json, write_observed, TraceWriter};
use crate::{CliError, Outcome};

/// Version of the JSON records written by the commands.
const RECORD_VERSION: u32 = 1;
/// Both sides count singular values above this fraction of the largest.
const CHECK_RANK_TOL: f64 = 1e-6;

pub const OBSERVED_FILE: &str = "observed.mtx";
pub const TRUTH_LEFT_FILE: &str = "truth_left.csv";
pub const TRUTH_RIGHT_FILE: &str = "truth_right.csv";
pub const X_FILE: &str = "x.csv";
pub const Y_FILE: &str = "y.csv";
pub const W_STAR_FILE: &str = "w_star.csv";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
pub enum ProblemKind {
    #[serde(rename = "mc")]
    #[value(name = "mc")]
    Completion,
    #[serde(rename = "mlr")]
    #[value(name = "mlr")]
    Regression,
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub kind: ProblemKind,
    /// Rows of the matrix (mc) or number of observations (mlr).
    #[arg(long)]
    pub n: usize,
    /// Columns of the matrix (mc).
    #[arg(long)]
    pub m: Option<usize>,
    /// Input features (mlr).
    #[arg(long)]
    pub q: Option<usize>,
    /// Responses (mlr).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub rank: usize,
    /// Oversampling ratio: observe `round(OS·(n+m−r)·r)` entries (mc).
    #[arg(long, group = "amount")]
    pub os: Option<f64>,
    /// Fraction of entries observed (mc).
    #[arg(long, group = "amount")]
    pub fraction: Option<f64>,
    /// Number of entries observed (mc).
    #[arg(long, group = "amount")]
    pub count: Option<usize>,
    /// Per-entry standard deviation of Gaussian noise.
    #[arg(long, conflicts_with = "snr")]
    pub noise: Option<f64>,
    /// Signal-to-noise ratio `‖Y_train‖_F/‖noise‖_F` (mlr).
    #[arg(long)]
    pub snr: Option<f64>,
    /// Fraction of rows used for training (mlr).
    #[arg(long, default_value_t = 0.7)]
    pub train: f64,
}

/// Where to read a problem from. Explicit files override `--data`.
#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Directory written by `gen`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Observed entries in Matrix Market coordinate format.
    #[arg(long)]
    pub observed: Option<PathBuf>,
    /// Regression inputs, dense CSV.
    #[arg(long)]
    pub x: Option<PathBuf>,
    /// Regression responses, dense CSV.
    #[arg(long)]
    pub y: Option<PathBuf>,
    /// JSON `{"train": [...], "test": [...]}` with 0-based row indices.
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Largest accepted relative objective difference.
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn out_path(shared: &SharedArgs, name: &str) -> PathBuf {
    shared.out.join(name)
}

fn echo_config(shared: &SharedArgs, command: &str, cfg: &RunConfig) -> Result<(), CliError> {
    write_json(&out_path(shared, "config.json"), &json!({ "command": command, "config": cfg }))
}

fn print_json<T: Serialize>(value: &T) {
    if let Ok(text) = serde_json::to_string_pretty(value) {
        println!("{text}");
    }
}

pub fn gen(shared: &SharedArgs, args: &GenArgs) -> Result<Outcome, CliError> {
    let cfg = shared.resolve(RunConfig::default())?;
    let seed = cfg.seed.ok_or_else(|| CliError::Input("gen needs --seed".into()))?;
    let info = match args.kind {
        ProblemKind::Completion => gen_completion(shared, args, seed)?,
        ProblemKind::Regression => gen_regression(shared, args, seed)?,
    };
    write_json(&out_path(shared, "instance.json"), &info)?;
    echo_config(shared, "gen", &cfg)?;
    print_json(&info);
    Ok(Outcome::Certified)
}

fn gen_completion(shared: &SharedArgs, args: &GenArgs, seed: u64) -> Result<serde_json::Value, CliError> {
    let (n, r) = (args.n, args.rank);
    let m = args.m.ok_or_else(|| CliError::Input("gen --kind mc needs --m".into()))?;
    if args.snr.is_some() {
        return Err(CliError::Input("--snr applies to regression; use --noise".into()));
    }
    let count = match (args.os, args.fraction, args.count) {
        (Some(os), _, _) => synth::observed_count(n, m, r, os).map_err(|e| CliError::Input(e.to_string()))?,
        (_, Some(f), _) if (0.0..=1.0).contains(&f) => (f * (n * m) as f64).round() as usize,
        (_, Some(f), _) => return Err(CliError::Input(format!("fraction {f} outside [0, 1]"))),
        (_, _, Some(c)) => c,
        _ => return Err(CliError::Input("gen --kind mc needs one of --os, --fraction, --count".into())),
    };
    let noise = args.noise.unwrap_or(0.0);
    let inst = synth::completion_instance(n, m, r, count, noise, seed).map_err(|e| CliError::Input(e.to_string()))?;
    write_observed(&out_path(shared, OBSERVED_FILE), &inst.observed)?;
    write_dense(&out_path(shared, TRUTH_LEFT_FILE), &inst.left)?;
    write_dense(&out_path(shared, TRUTH_RIGHT_FILE), &inst.right)?;
    Ok(json!({
        "v": RECORD_VERSION,
        "kind": ProblemKind::Completion,
        "seed": seed,
        "n": n,
        "m": m,
        "rank": r,
        "observed": count,
        "oversampling": count as f64 / ((n + m - r) * r) as f64,
        "noise_std": inst.noise_std,
    }))
}

fn gen_regression(shared: &SharedArgs, args: &GenArgs, seed: u64) -> Result<serde_json::Value, CliError> {
    let (n, r) = (args.n, args.rank);
    let q = args.q.ok_or_else(|| CliError::Input("gen --kind mlr needs --q".into()))?;
    let k = args.k.ok_or_else(|| CliError::Input("gen --kind mlr needs --k".into()))?;
    if args.os.is_some() || args.fraction.is_some() || args.count.is_some() {
        return Err(CliError::Input("--os, --fraction and --count apply to completion".into()));
    }
    let noise = match (args.snr, args.noise) {
        (Some(s), _) => NoiseLevel::Snr(s),
        (_, Some(s)) => NoiseLevel::Std(s),
        _ => NoiseLevel::None,
    };
    let inst =
        synth::regression_instance(n, q, k, r, args.train, noise, seed).map_err(|e| CliError::Input(e.to_string()))?;
    let mut x = Mat::zeros(n, q);
    let mut y = Mat::zeros(n, k);
    for (t, &row) in inst.train_rows.iter().enumerate() {
        x.row_mut(row).copy_from(&inst.x_train.row(t));
        y.row_mut(row).copy_from(&inst.y_train.row(t));
    }
    for (t, &row) in inst.test_rows.iter().enumerate() {
        x.row_mut(row).copy_from(&inst.x_test.row(t));
        y.row_mut(row).copy_from(&inst.y_test.row(t));
    }
    write_dense(&out_path(shared, X_FILE), &x)?;
    write_dense(&out_path(shared, Y_FILE), &y)?;
    write_dense(&out_path(shared, W_STAR_FILE), &inst.w_star)?;
    let split = Split {
        train: inst.train_rows.clone(),
        test: inst.test_rows.clone(),
    };
    write_json(&out_path(shared, SPLIT_FILE), &split)?;
    Ok(json!({
        "v": RECORD_VERSION,
        "kind": ProblemKind::Regression,
        "seed": seed,
        "n": n,
        "q": q,
        "k": k,
        "rank": r,
        "train_rows": split.train.len(),
        "test_rows": split.test.len(),
        "snr": args.snr,
        "noise_std": inst.noise_std,
    }))
}

/// A loaded problem with whatever ground truth or test data came with it.
pub enum Problem {
    Completion {
        model: MatrixCompletion,
        truth: Option<Mat>,
    },
    Regression {
        model: MultivariateRegression,
        x_test: Mat,
        y_test: Mat,
        w_star: Option<Mat>,
    },
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Metrics {
    /// `‖X̃ − X‖_F/‖X̃‖_F` against the ground truth, when known.
    pub relative_error: Option<f64>,
    /// `‖W ⊙ (X̃ − X)‖²_F` for completion, `‖Y − XW‖²_F` on the training rows for regression.
    pub training_error: f64,
    pub test_rmse: Option<f64>,
}

impl Problem {
    pub fn kind(&self) -> ProblemKind {
        match self {
            Problem::Completion { .. } => ProblemKind::Completion,
            Problem::Regression { .. } => ProblemKind::Regression,
        }
    }

    pub fn model(&self) -> &dyn ProblemModel {
        match self {
            Problem::Completion { model, .. } => model,
            Problem::Regression { model, .. } => model,
        }
    }

    pub fn dense(&self) -> &(dyn DenseProblem + Sync) {
        match self {
            Problem::Completion { model, .. } => model,
            Problem::Regression { model, .. } => model,
        }
    }

    pub fn metrics(&self, x: &FixedRankPoint) -> Metrics {
        match self {
            Problem::Completion { model, truth } => {
                let training_error = model
                    .predict_observed(x)
                    .iter()
                    .zip(model.data().values())
                    .map(|(p, v)| (p - v) * (p - v))
                    .sum();
                Metrics {
                    relative_error: truth.as_ref().map(|t| synth::relative_error(t, &x.to_dense())),
                    training_error,
                    test_rmse: None,
                }
            }
            Problem::Regression {
                model,
                x_test,
                y_test,
                w_star,
            } => {
                let data = model.data();
                let training_error = (model.predict(data.x(), x) - data.y()).norm_squared();
                Metrics {
                    relative_error: w_star.as_ref().map(|w| synth::relative_error(w, &x.to_dense())),
                    training_error,
                    test_rmse: (x_test.nrows() > 0).then(|| rmse(model, x_test, y_test, x)),
                }
            }
        }
    }
}

fn locate(explicit: &Option<PathBuf>, dir: &Option<PathBuf>, name: &str) -> Option<PathBuf> {
    explicit
        .clone()
        .or_else(|| dir.as_ref().map(|d| d.join(name)).filter(|p| p.exists()))
}

fn select_rows(a: &Mat, rows: &[usize], what: &str) -> Result<Mat, CliError> {
    if let Some(&bad) = rows.iter().find(|&&r| r >= a.nrows()) {
        return Err(CliError::Input(format!("{what} row {bad} out of range for {} rows", a.nrows())));
    }
    Ok(a.select_rows(rows))
}

pub fn load_problem(data: &DataArgs, want: Option<ProblemKind>, cfg: &RunConfig) -> Result<Problem, CliError> {
    let observed = locate(&data.observed, &data.data, OBSERVED_FILE);
    let x_path = locate(&data.x, &data.data, X_FILE);
    let kind = match (want, observed.is_some(), x_path.is_some()) {
        (Some(k), _, _) => k,
        (None, true, false) => ProblemKind::Completion,
        (None, false, true) => ProblemKind::Regression,
        (None, true, true) => {
            return Err(CliError::Input("both completion and regression inputs given".into()));
        }
        (None, false, false) => {
            return Err(CliError::Input("no input: pass --data, --observed or --x/--y".into()));
        }
    };
    let invalid = |e: tracenorm::Error| CliError::Input(e.to_string());
    match kind {
        ProblemKind::Completion => {
            let path = observed.ok_or_else(|| CliError::Input("missing observed entries (--observed or --data)".into()))?;
            let model = MatrixCompletion::new(read_observed(&path)?).with_ridge(cfg.ridge).map_err(invalid)?;
            let left = locate(&None, &data.data, TRUTH_LEFT_FILE);
            let right = locate(&None, &data.data, TRUTH_RIGHT_FILE);
            let truth = match (left, right) {
                (Some(l), Some(r)) => {
                    let t = read_dense(&l)? * read_dense(&r)?.transpose();
                    if t.shape() != model.shape() {
                        return Err(CliError::Input("ground-truth factors do not match the observed shape".into()));
                    }
                    Some(t)
                }
                _ => None,
            };
            Ok(Problem::Completion { model, truth })
        }
        ProblemKind::Regression => {
            let x_path = x_path.ok_or_else(|| CliError::Input("missing regression inputs (--x or --data)".into()))?;
            let y_path = locate(&data.y, &data.data, Y_FILE)
                .ok_or_else(|| CliError::Input("missing regression responses (--y or --data)".into()))?;
            let x = read_dense(&x_path)?;
            let y = read_dense(&y_path)?;
            if x.nrows() != y.nrows() {
                return Err(CliError::Input(format!("X has {} rows but Y has {}", x.nrows(), y.nrows())));
            }
            let split: Split = match locate(&data.split, &data.data, SPLIT_FILE) {
                Some(p) => read_json(&p)?,
                None => Split {
                    train: (0..x.nrows()).collect(),
                    test: Vec::new(),
                },
            };
            let x_train = select_rows(&x, &split.train, "train")?;
            let y_train = select_rows(&y, &split.train, "train")?;
            let x_test = select_rows(&x, &split.test, "test")?;
            let y_test = select_rows(&y, &split.test, "test")?;
            let w_star = match locate(&None, &data.data, W_STAR_FILE) {
                Some(p) => Some(read_dense(&p)?),
                None => None,
            };
            let rd = RegressionData::new(x_train, y_train).map_err(invalid)?.scaled(cfg.scaled);
            let model = MultivariateRegression::new(rd).map_err(invalid)?.with_ridge(cfg.ridge).map_err(invalid)?;
            Ok(Problem::Regression {
                model,
                x_test,
                y_test,
                w_star,
            })
        }
    }
}

/// Multiplies `epsilon_sigma` by `‖∇f(0)‖_op` so one default fits data of any
/// scale. Returns the scale, or 1 for all-zero data.
fn scale_sigma_threshold(cfg: &mut RunConfig, problem: &Problem) -> Result<f64, CliError> {
    let scale = problem.model().lambda_max()?;
    let scale = if scale > 0.0 && scale.is_finite() { scale } else { 1.0 };
    cfg.path.solver.epsilon_sigma *= scale;
    Ok(scale)
}

fn write_point(shared: &SharedArgs, x: &FixedRankPoint) -> Result<(), CliError> {
    write_dense(&out_path(shared, "solution_u.csv"), x.u())?;
    write_dense(&out_path(shared, "solution_b.csv"), x.b())?;
    write_dense(&out_path(shared, "solution_v.csv"), x.v())
}

/// Reads a point written by a solve.
pub fn read_point(dir: &Path) -> Result<FixedRankPoint, CliError> {
    let u = read_dense(&dir.join("solution_u.csv"))?;
    let b = read_dense(&dir.join("solution_b.csv"))?;
    let v = read_dense(&dir.join("solution_v.csv"))?;
    if b.nrows() == 0 {
        return Ok(FixedRankPoint::zero(u.nrows(), v.nrows()));
    }
    FixedRankPoint::new(u, b, v).map_err(|e| CliError::Input(e.to_string()))
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveSummary {
    pub v: u32,
    pub command: String,
    pub problem: ProblemKind,
    pub shape: (usize, usize),
    pub lambda: f64,
    pub rank: usize,
    pub objective: f64,
    pub gap: f64,
    pub rel_gap: f64,
    pub sigma1: f64,
    pub sigma_gap: f64,
    /// `epsilon_sigma` was applied as `epsilon_sigma · sigma_scale`.
    pub sigma_scale: f64,
    pub status: SolveStatus,
    pub certified: bool,
    pub tr_iters: usize,
    pub inner_iters: usize,
    pub rank_updates: usize,
    pub wall_time_s: f64,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Collects the first trace write error; the solver sink cannot fail.
struct TraceSink {
    writer: Option<TraceWriter>,
    error: Option<CliError>,
}

impl TraceSink {
    fn new(shared: &SharedArgs, cfg: &RunConfig, name: &str) -> Result<Self, CliError> {
        let writer = if cfg.trace { Some(TraceWriter::create(&out_path(shared, name))?) } else { None };
        Ok(Self { writer, error: None })
    }

    fn write(&mut self, event: &TraceEvent, extra: &[(&str, serde_json::Value)]) {
        if self.error.is_some() {
            return;
        }
        if let Some(w) = &mut self.writer {
            if let Err(e) = w.write(event, extra) {
                self.error = Some(e);
            }
        }
    }

    fn finish(self) -> Result<(), CliError> {
        if let Some(e) = self.error {
            return Err(e);
        }
        match self.writer {
            Some(w) => w.finish(),
            None => Ok(()),
        }
    }
}

pub fn solve(
    shared: &SharedArgs,
    data: &DataArgs,
    want: Option<ProblemKind>,
    command: &str,
) -> Result<Outcome, CliError> {
    let mut cfg = shared.resolve(RunConfig::default())?;
    let lambda = cfg.single_lambda()?;
    let problem = load_problem(data, want, &cfg)?;
    let model = problem.model();
    cfg.path.solver.validate(model.shape()).map_err(|e| CliError::Input(e.to_string()))?;
    echo_config(shared, command, &cfg)?;
    let sigma_scale = scale_sigma_threshold(&mut cfg, &problem)?;

    let mut sink = TraceSink::new(shared, &cfg, "trace.jsonl")?;
    let sol = minimize_traced(model, lambda, &cfg.path.solver, None, &mut |e| sink.write(e, &[]))?;
    sink.finish()?;
    write_point(shared, &sol.point)?;

    let summary = SolveSummary {
        v: RECORD_VERSION,
        command: command.to_owned(),
        problem: problem.kind(),
        shape: model.shape(),
        lambda,
        rank: sol.rank,
        objective: sol.objective,
        gap: sol.certificate.gap,
        rel_gap: sol.certificate.rel_gap,
        sigma1: sol.certificate.sigma1,
        sigma_gap: sol.certificate.sigma_gap,
        sigma_scale,
        status: sol.status,
        certified: sol.certified(),
        tr_iters: sol.tr_iters,
        inner_iters: sol.inner_iters,
        rank_updates: sol.updates.len(),
        wall_time_s: sol.wall_time_s,
        metrics: problem.metrics(&sol.point),
    };
    write_json(&out_path(shared, "summary.json"), &summary)?;
    print_json(&summary);
    Ok(if sol.certified() { Outcome::Certified } else { Outcome::Uncertified })
}

/// One CSV row per grid point.
#[derive(Debug, Clone, Serialize)]
struct PathRow {
    lambda: f64,
    rank: usize,
    objective: f64,
    gap: f64,
    rel_gap: f64,
    sigma_gap: f64,
    tr_iters: usize,
    inner_iters: usize,
    mode: PathMode,
    step: Option<f64>,
    start_rank: usize,
    predicted_inaccuracy: Option<f64>,
    warm_inaccuracy: Option<f64>,
    status: SolveStatus,
    certified: bool,
    relative_error: Option<f64>,
    test_rmse: Option<f64>,
    wall_time_s: f64,
    error: Option<String>,
}

impl PathRow {
    fn new(r: &PathRecord, problem: &Problem) -> Self {
        let metrics = problem.metrics(&r.point);
        Self {
            lambda: r.lambda,
            rank: r.rank,
            objective: r.objective,
            gap: r.gap,
            rel_gap: r.rel_gap,
            sigma_gap: r.sigma_gap,
            tr_iters: r.tr_iters,
            inner_iters: r.inner_iters,
            mode: r.mode,
            step: r.step,
            start_rank: r.start_rank,
            predicted_inaccuracy: r.predicted_inaccuracy,
            warm_inaccuracy: r.warm_inaccuracy,
            status: r.status,
            certified: r.certified(),
            relative_error: metrics.relative_error,
            test_rmse: metrics.test_rmse,
            wall_time_s: r.wall_time_s,
            error: r.error.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PathSummary {
    pub predictor: bool,
    pub grid_len: usize,
    pub records: usize,
    pub uncertified: usize,
    pub total_tr_iters: usize,
    pub mean_tr_iters: f64,
    pub warm_restarts: usize,
    pub rank_changes: usize,
    pub final_rank: usize,
    /// Predicted starts that kept their rank, and how many of them beat a warm restart.
    pub same_rank_points: usize,
    pub predictor_wins: usize,
    pub wall_time_s: f64,
}

impl PathSummary {
    fn new(result: &PathResult, predictor: bool) -> Self {
        let n = result.records.len();
        let same_rank: Vec<_> = result
            .records
            .iter()
            .filter(|r| r.mode == PathMode::Predicted && r.rank == r.start_rank)
            .collect();
        let predictor_wins = same_rank
            .iter()
            .filter(|r| matches!((r.predicted_inaccuracy, r.warm_inaccuracy), (Some(p), Some(w)) if p < w))
            .count();
        Self {
            predictor,
            grid_len: result.grid_len,
            records: n,
            uncertified: result.records.iter().filter(|r| !r.certified()).count(),
            total_tr_iters: result.total_tr_iters(),
            mean_tr_iters: result.total_tr_iters() as f64 / n.max(1) as f64,
            warm_restarts: result.warm_count(),
            rank_changes: result.rank_changes(),
            final_rank: result.records.last().map_or(0, |r| r.rank),
            same_rank_points: same_rank.len(),
            predictor_wins,
            wall_time_s: result.wall_time_s,
        }
    }
}

fn write_path_csv(path: &Path, result: &PathResult, problem: &Problem) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::Output(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in &result.records {
        w.serialize(PathRow::new(r, problem)).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::Output(format!("{}: {e}", path.display())))
}

fn run_path(
    shared: &SharedArgs,
    cfg: &RunConfig,
    problem: &Problem,
    sink: &mut TraceSink,
    run: &str,
) -> Result<PathResult, CliError> {
    let result = compute_path_traced(problem.model(), &cfg.path, &mut |i, e| {
        sink.write(e, &[("run", run.into()), ("lambda_index", i.into())]);
    })?;
    let name = if run == "warm" { "path_warm.csv" } else { "path.csv" };
    write_path_csv(&out_path(shared, name), &result, problem)?;
    log::info!("{run} path: {} values in {:.1}s", result.records.len(), result.wall_time_s);
    Ok(result)
}

pub fn path(shared: &SharedArgs, data: &DataArgs, compare_warm: bool) -> Result<Outcome, CliError> {
    let mut cfg = shared.resolve(RunConfig::default())?;
    let problem = load_problem(data, None, &cfg)?;
    cfg.path.solver.validate(problem.model().shape()).map_err(|e| CliError::Input(e.to_string()))?;
    echo_config(shared, "path", &cfg)?;
    let sigma_scale = scale_sigma_threshold(&mut cfg, &problem)?;

    let mut sink = TraceSink::new(shared, &cfg, "trace.jsonl")?;
    let main_run = if cfg.path.predictor { "predictor" } else { "warm" };
    let result = run_path(shared, &cfg, &problem, &mut sink, main_run)?;
    let mut summaries = vec![PathSummary::new(&result, cfg.path.predictor)];
    let mut certified = summaries[0].uncertified == 0;
    if compare_warm && cfg.path.predictor {
        let mut warm_cfg = cfg.clone();
        warm_cfg.path.predictor = false;
        let warm = run_path(shared, &warm_cfg, &problem, &mut sink, "warm")?;
        let s = PathSummary::new(&warm, false);
        certified &= s.uncertified == 0;
        summaries.push(s);
    }
    sink.finish()?;
    let record = json!({
        "v": RECORD_VERSION,
        "problem": problem.kind(),
        "sigma_scale": sigma_scale,
        "runs": summaries,
    });
    write_json(&out_path(shared, "summary.json"), &record)?;
    print_json(&record);
    Ok(if certified { Outcome::Certified } else { Outcome::Uncertified })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Agree,
    Disagree,
    /// Mismatch, but the oracle or the solver stopped short of its own
    /// convergence test.
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub lambda: f64,
    pub objective_solver: f64,
    pub objective_oracle: f64,
    pub rel_diff: f64,
    pub gap_solver: f64,
    pub rel_gap_solver: f64,
    pub gap_oracle: f64,
    pub rel_gap_oracle: f64,
    pub rank_solver: usize,
    pub rank_oracle: usize,
    pub solver_certified: bool,
    pub oracle_converged: bool,
    pub oracle_iterations: usize,
    pub status: CheckStatus,
}

fn check_one(problem: &Problem, lambda: f64, cfg: &RunConfig, ocfg: &OracleConfig, tol: f64) -> Result<CheckRow, CliError> {
    let sol = tracenorm::minimize(problem.model(), lambda, &cfg.path.solver, None)?;
    let orc = oracle::solve_convex_dense(problem.dense(), lambda, ocfg)?;
    let rel_diff = (sol.objective - orc.objective).abs() / orc.objective.abs().max(f64::MIN_POSITIVE);
    let rank_solver = sol.point.numerical_rank(CHECK_RANK_TOL);
    let rank_oracle = orc.numerical_rank(CHECK_RANK_TOL);
    // A mismatch only counts against the solver when both sides converged.
    let status = if rel_diff <= tol && rank_solver == rank_oracle {
        CheckStatus::Agree
    } else if orc.converged && sol.certified() {
        CheckStatus::Disagree
    } else {
        CheckStatus::Inconclusive
    };
    Ok(CheckRow {
        lambda,
        objective_solver: sol.objective,
        objective_oracle: orc.objective,
        rel_diff,
        gap_solver: sol.certificate.gap,
        rel_gap_solver: sol.certificate.rel_gap,
        gap_oracle: orc.gap.gap,
        rel_gap_oracle: orc.gap.relative,
        rank_solver,
        rank_oracle,
        solver_certified: sol.certified(),
        oracle_converged: orc.converged,
        oracle_iterations: orc.iterations,
        status,
    })
}

/// Defaults for `check`: three `λ` values and thresholds tight enough to
/// pin the objective well below the comparison tolerance.
fn check_defaults() -> RunConfig {
    let mut cfg = RunConfig {
        lambda: vec![1e-3, 1e-1, 1.0],
        ..Default::default()
    };
    cfg.path.solver.epsilon_sigma = 1e-10;
    cfg.path.solver.epsilon_gap = 1e-10;
    cfg
}

pub fn check(shared: &SharedArgs, args: &CheckArgs) -> Result<Outcome, CliError> {
    if !(args.tolerance > 0.0) {
        return Err(CliError::Input("--tolerance must be positive".into()));
    }
    let mut cfg = shared.resolve(check_defaults())?;
    if cfg.lambda.is_empty() {
        return Err(CliError::Input("check needs at least one --lambda".into()));
    }
    let problem = load_problem(&args.data, None, &cfg)?;
    cfg.path.solver.validate(problem.model().shape()).map_err(|e| CliError::Input(e.to_string()))?;
    echo_config(shared, "check", &cfg)?;
    let sigma_scale = scale_sigma_threshold(&mut cfg, &problem)?;
    // Run to a tight gap instead of stopping on a small objective change.
    let ocfg = OracleConfig {
        tol: 0.0,
        gap_tol: 1e-10,
        ..Default::default()
    };

    // Independent solves, one thread per λ.
    let rows: Vec<Result<CheckRow, CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = cfg
            .lambda
            .iter()
            .map(|&lam| {
                let (problem, cfg, ocfg) = (&problem, &cfg, &ocfg);
                s.spawn(move || check_one(problem, lam, cfg, ocfg, args.tolerance))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Output("check worker panicked".into()))))
            .collect()
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;

    let status = if rows.iter().any(|r| r.status == CheckStatus::Disagree) {
        CheckStatus::Disagree
    } else if rows.iter().any(|r| r.status == CheckStatus::Inconclusive) {
        CheckStatus::Inconclusive
    } else {
        CheckStatus::Agree
    };
    let report = json!({
        "v": RECORD_VERSION,
        "problem": problem.kind(),
        "tolerance": args.tolerance,
        "sigma_scale": sigma_scale,
        "status": status,
        "rows": rows,
    });
    write_json(&out_path(shared, "check.json"), &report)?;
    print_json(&report);
    match status {
        CheckStatus::Agree => Ok(Outcome::Certified),
        CheckStatus::Inconclusive => Ok(Outcome::Uncertified),
        CheckStatus::Disagree => Err(CliError::Disagreement(format!(
            "solver and oracle differ beyond {:e} relative; see check.json",
            args.tolerance
        ))),
    }
}
