//! Regularization paths over a geometric `λ` grid with a first-order
//! predictor on the fixed-rank manifold and a solver-based corrector.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{inverse_retract_approx, retract, FixedRankPoint};
use crate::problems::ProblemModel;
use crate::solver::{minimize_traced, ConvexSolution, RankOneRecord, SolveStatus, SolverConfig, TraceEvent};

/// Step sizes below this abandon the prediction in favor of a warm restart.
const MIN_STEP: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathConfig {
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub gamma: f64,
    pub solver: SolverConfig,
    pub predictor: bool,
    pub step_shrink: f64,
    /// End the path at the first record that hits the solver's rank cap.
    pub stop_at_rank_cap: bool,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            lambda_max: 1e3,
            lambda_min: 1e-3,
            gamma: 0.95,
            solver: SolverConfig::default(),
            predictor: true,
            step_shrink: 0.5,
            stop_at_rank_cap: false,
        }
    }
}

impl PathConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.gamma
            && self.gamma < 1.0
            && 0.0 < self.lambda_min
            && self.lambda_min < self.lambda_max
            && self.lambda_max.is_finite()
            && 0.0 < self.step_shrink
            && self.step_shrink < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Precondition(format!(
                "invalid path grid: lambda in [{}, {}], gamma {}, step shrink {}",
                self.lambda_min, self.lambda_max, self.gamma, self.step_shrink
            )))
        }
    }
}

/// `λ_max, γλ_max, γ²λ_max, …` while `λ ≥ λ_min`.
pub fn lambda_grid(lambda_max: f64, lambda_min: f64, gamma: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut lam = lambda_max;
    let floor = lambda_min * (1.0 - 1e-12);
    while lam >= floor {
        out.push(lam);
        lam *= gamma;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PathMode {
    Warm,
    Predicted,
}

#[derive(Debug, Clone)]
pub struct PathRecord {
    pub lambda: f64,
    pub rank: usize,
    pub objective: f64,
    pub gap: f64,
    pub rel_gap: f64,
    pub sigma_gap: f64,
    pub status: SolveStatus,
    pub tr_iters: usize,
    pub inner_iters: usize,
    pub mode: PathMode,
    /// Accepted predictor step `s_t` (0 when the prediction fell back).
    pub step: Option<f64>,
    /// `φ̄_λ(X̂) − φ̄_λ(X*)` for the predicted start.
    pub predicted_inaccuracy: Option<f64>,
    /// `φ̄_λ(X*(λ_prev)) − φ̄_λ(X*)`, the inaccuracy a warm restart would have.
    pub warm_inaccuracy: Option<f64>,
    /// Rank of the corrector's starting point.
    pub start_rank: usize,
    pub updates: Vec<RankOneRecord>,
    pub error: Option<String>,
    pub wall_time_s: f64,
    pub point: FixedRankPoint,
}

impl PathRecord {
    pub fn certified(&self) -> bool {
        self.status == SolveStatus::Certified && self.error.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct PathResult {
    pub records: Vec<PathRecord>,
    pub grid_len: usize,
    pub wall_time_s: f64,
}

impl PathResult {
    pub fn total_tr_iters(&self) -> usize {
        self.records.iter().map(|r| r.tr_iters).sum()
    }
    pub fn warm_count(&self) -> usize {
        self.records.iter().filter(|r| r.mode == PathMode::Warm).count()
    }
    pub fn rank_changes(&self) -> usize {
        self.records.windows(2).filter(|w| w[0].rank != w[1].rank).count()
    }
}

/// `φ̄_λ(X̂) − φ̄_λ(X*)`.
pub fn prediction_inaccuracy(
    x_hat: &FixedRankPoint,
    x_star: &FixedRankPoint,
    model: &dyn ProblemModel,
    lambda: f64,
) -> Result<f64> {
    Ok(model.objective(x_hat, lambda)? - model.objective(x_star, lambda)?)
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub point: FixedRankPoint,
    /// Accepted step, 0 when the warm-restart candidate was returned.
    pub step: f64,
    pub backtracks: usize,
}

/// First-order prediction of the solution at `λ_{i+1}` from the solutions at
/// `λ_{i−1}` (`x_prev`) and `λ_i` (`x_curr`), both of the same rank.
///
/// Moves from `x_curr` along `−ξ̂`, where `ξ̂` approximates the inverse
/// retraction of `x_prev`, starting with `s = (λ_{i+1} − λ_i)/(λ_i − λ_{i−1})`
/// and shrinking `s` until the objective at `λ_{i+1}` does not exceed that of
/// `x_curr`.
#[allow(clippy::too_many_arguments)]
pub fn predict_next(
    x_prev: &FixedRankPoint,
    x_curr: &FixedRankPoint,
    lambda_prev: f64,
    lambda_curr: f64,
    lambda_next: f64,
    model: &dyn ProblemModel,
    step_shrink: f64,
) -> Result<Prediction> {
    if x_prev.rank() != x_curr.rank() {
        return Err(Error::Precondition("prediction needs two points of equal rank".into()));
    }
    let denom = lambda_curr - lambda_prev;
    if denom == 0.0 {
        return Err(Error::Precondition("consecutive lambda values coincide".into()));
    }
    let fallback = |backtracks| Prediction {
        point: x_curr.clone(),
        step: 0.0,
        backtracks,
    };
    if x_curr.rank() == 0 {
        return Ok(fallback(0));
    }
    let xi = inverse_retract_approx(x_curr, x_prev)?;
    if xi.norm_euclidean() == 0.0 {
        return Ok(fallback(0));
    }
    let phi_warm = model.objective(x_curr, lambda_next)?;
    let mut s = (lambda_next - lambda_curr) / denom;
    let mut backtracks = 0;
    while s >= MIN_STEP {
        if let Ok(candidate) = retract(x_curr, &xi.scale(-s)) {
            let phi = model.objective(&candidate, lambda_next)?;
            if phi <= phi_warm {
                return Ok(Prediction {
                    point: candidate,
                    step: s,
                    backtracks,
                });
            }
        }
        s *= step_shrink;
        backtracks += 1;
    }
    Ok(fallback(backtracks))
}

/// Computes certified solutions along the grid of `cfg`.
pub fn compute_path(model: &dyn ProblemModel, cfg: &PathConfig) -> Result<PathResult> {
    compute_path_traced(model, cfg, &mut |_, _| {})
}

/// [`compute_path`] with a sink receiving `(grid index, event)` pairs.
pub fn compute_path_traced(
    model: &dyn ProblemModel,
    cfg: &PathConfig,
    sink: &mut dyn FnMut(usize, &TraceEvent),
) -> Result<PathResult> {
    cfg.validate()?;
    let start = Instant::now();
    let grid = lambda_grid(cfg.lambda_max, cfg.lambda_min, cfg.gamma);
    let (n, m) = model.shape();
    let mut records: Vec<PathRecord> = Vec::with_capacity(grid.len());

    for (i, &lam) in grid.iter().enumerate() {
        let t0 = Instant::now();
        let mut mode = PathMode::Warm;
        let mut step = None;
        let start_point = match records.len() {
            0 => FixedRankPoint::zero(n, m),
            1 => records[0].point.clone(),
            k => {
                let (prev, curr) = (&records[k - 2], &records[k - 1]);
                if cfg.predictor && prev.rank == curr.rank {
                    let pred = predict_next(
                        &prev.point,
                        &curr.point,
                        prev.lambda,
                        curr.lambda,
                        lam,
                        model,
                        cfg.step_shrink,
                    )?;
                    mode = PathMode::Predicted;
                    step = Some(pred.step);
                    pred.point
                } else {
                    curr.point.clone()
                }
            }
        };
        let start_rank = start_point.rank();
        let warm_point = records.last().map(|r| r.point.clone());

        let mut traced = |e: &TraceEvent| sink(i, e);
        let solved = minimize_traced(model, lam, &cfg.solver, Some(start_point.clone()), &mut traced);
        let record = match solved {
            Ok(sol) => {
                let warm_inaccuracy = match &warm_point {
                    Some(w) => Some(model.objective(w, lam)? - sol.objective),
                    None => None,
                };
                let predicted_inaccuracy = match mode {
                    PathMode::Predicted => Some(model.objective(&start_point, lam)? - sol.objective),
                    PathMode::Warm => None,
                };
                from_solution(sol, mode, step, predicted_inaccuracy, warm_inaccuracy, start_rank, t0)
            }
            Err(e) => {
                log::warn!("path point {i} (lambda = {lam:e}) failed: {e}");
                let objective = model.objective(&start_point, lam)?;
                PathRecord {
                    lambda: lam,
                    rank: start_point.rank(),
                    objective,
                    gap: f64::NAN,
                    rel_gap: f64::NAN,
                    sigma_gap: f64::NAN,
                    status: SolveStatus::MaxRank,
                    tr_iters: 0,
                    inner_iters: 0,
                    mode,
                    step,
                    predicted_inaccuracy: None,
                    warm_inaccuracy: None,
                    start_rank,
                    updates: Vec::new(),
                    error: Some(e.to_string()),
                    wall_time_s: t0.elapsed().as_secs_f64(),
                    point: warm_point.unwrap_or(start_point),
                }
            }
        };
        let hit_cap = record.status == SolveStatus::MaxRank && record.error.is_none();
        records.push(record);
        if cfg.stop_at_rank_cap && hit_cap {
            break;
        }
    }
    Ok(PathResult {
        records,
        grid_len: grid.len(),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

fn from_solution(
    sol: ConvexSolution,
    mode: PathMode,
    step: Option<f64>,
    predicted_inaccuracy: Option<f64>,
    warm_inaccuracy: Option<f64>,
    start_rank: usize,
    t0: Instant,
) -> PathRecord {
    PathRecord {
        lambda: sol.lambda,
        rank: sol.rank,
        objective: sol.objective,
        gap: sol.certificate.gap,
        rel_gap: sol.certificate.rel_gap,
        sigma_gap: sol.certificate.sigma_gap,
        status: sol.status,
        tr_iters: sol.tr_iters,
        inner_iters: sol.inner_iters,
        mode,
        step,
        predicted_inaccuracy,
        warm_inaccuracy,
        start_rank,
        updates: sol.updates,
        error: None,
        wall_time_s: t0.elapsed().as_secs_f64(),
        point: sol.point,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{MatrixCompletion, ObservedEntries};
    use crate::synth;

    #[test]
    fn grid_counts() {
        let g = lambda_grid(1e3, 1e-3, 0.95);
        assert_eq!(g.len(), 270);
        for w in g.windows(2) {
            assert_eq!(w[1], w[0] * 0.95);
        }
        assert_eq!(lambda_grid(1.0, 0.5, 0.5).len(), 2);
    }

    #[test]
    fn zero_data_gives_flat_path() {
        let model = MatrixCompletion::new(
            ObservedEntries::new(4, 3, vec![(0, 0, 0.0), (1, 2, 0.0), (3, 1, 0.0)]).unwrap(),
        );
        let cfg = PathConfig {
            lambda_max: 1.0,
            lambda_min: 0.1,
            gamma: 0.5,
            ..Default::default()
        };
        let path = compute_path(&model, &cfg).unwrap();
        assert_eq!(path.records.len(), 4);
        for r in &path.records {
            assert_eq!(r.rank, 0);
            assert_eq!(r.objective, 0.0);
            assert!(r.certified());
        }
    }

    #[test]
    fn prediction_from_identical_points_stays_put() {
        let inst = synth::completion_instance(8, 7, 2, 40, 0.0, 1).unwrap();
        let model = MatrixCompletion::new(inst.observed);
        let sol = crate::solver::minimize(&model, 1.0, &SolverConfig::default(), None).unwrap();
        let p = predict_next(&sol.point, &sol.point, 1.1, 1.0, 0.9, &model, 0.5).unwrap();
        let x = sol.point.to_dense();
        assert!((p.point.to_dense() - &x).norm() <= 1e-12 * x.norm());
    }

    #[test]
    fn inaccuracy_signs() {
        let inst = synth::completion_instance(8, 7, 2, 40, 0.0, 2).unwrap();
        let model = MatrixCompletion::new(inst.observed);
        let sol = crate::solver::minimize(&model, 0.5, &SolverConfig::default(), None).unwrap();
        assert_eq!(prediction_inaccuracy(&sol.point, &sol.point, &model, 0.5).unwrap(), 0.0);
        let b = sol.point.b() * 1.1;
        let worse = FixedRankPoint::new(sol.point.u().clone(), b, sol.point.v().clone()).unwrap();
        assert!(prediction_inaccuracy(&worse, &sol.point, &model, 0.5).unwrap() > 0.0);
    }
}
