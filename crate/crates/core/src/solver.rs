//! Descent-restart meta-algorithm: fixed-rank trust-region solves alternated
//! with rank-one descent updates until a global optimality certificate holds.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::FixedRankPoint;
use crate::linalg::{self, polar_orthonormal_factor, small_svd, Mat, SingularTriplet, Vector};
use crate::problems::{duality_gap, DualityGap, Evaluation, ProblemModel};
use crate::rng;
use crate::trustregion::{solve_fixed_rank, IterationRecord, StopReason, TrustRegionConfig};

/// Norms below this mark a rank-one direction as lying inside the current
/// column or row space.
const EMBED_DEGENERATE: f64 = 1e-14;
/// Singular values of the embedded core are floored at this fraction of the largest.
const EMBED_SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Initializer {
    /// Start from `X = 0` and let the first rank-one update pick the direction.
    #[default]
    Zero,
    /// Orthonormalized Gaussian `U`, `V` of rank `rank0` and `B = init_scale·I`.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub rank0: usize,
    pub epsilon_sigma: f64,
    pub epsilon_gap: f64,
    /// Optional threshold on the absolute duality gap.
    pub epsilon_gap_abs: Option<f64>,
    pub max_rank: Option<usize>,
    pub tr: TrustRegionConfig,
    /// Caps trust-region iterations per rank before a forced increment.
    pub max_rank_fixed_inner: Option<usize>,
    pub backtrack_shrink: f64,
    pub armijo_c: f64,
    pub init: Initializer,
    pub init_scale: f64,
    pub seed: u64,
    pub triplet_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rank0: 1,
            epsilon_sigma: 1e-5,
            epsilon_gap: 1e-5,
            epsilon_gap_abs: None,
            max_rank: None,
            tr: TrustRegionConfig::default(),
            max_rank_fixed_inner: None,
            backtrack_shrink: 0.5,
            armijo_c: 1e-4,
            init: Initializer::Zero,
            init_scale: 1e-3,
            seed: 0,
            triplet_tol: linalg::tol::TRIPLET,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self, shape: (usize, usize)) -> Result<()> {
        self.tr.validate()?;
        let cap = shape.0.min(shape.1);
        let ok = self.epsilon_sigma > 0.0
            && self.epsilon_gap > 0.0
            && self.epsilon_gap_abs.is_none_or(|e| e > 0.0)
            && self.rank0 >= 1
            && self.max_rank.is_none_or(|r| r <= cap)
            && self.backtrack_shrink > 0.0
            && self.backtrack_shrink < 1.0
            && self.armijo_c > 0.0
            && self.armijo_c < 1.0
            && self.init_scale > 0.0
            && self.triplet_tol > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Precondition(format!("invalid solver configuration: {self:?}")))
        }
    }

    fn rank_cap(&self, shape: (usize, usize)) -> usize {
        let cap = shape.0.min(shape.1);
        self.max_rank.map_or(cap, |r| r.min(cap))
    }
}

/// Optimality certificate at a point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Certificate {
    pub sigma1: f64,
    /// `σ₁(S) − λ`.
    pub sigma_gap: f64,
    pub gap: f64,
    pub rel_gap: f64,
    pub dual_value: f64,
    pub triplet_converged: bool,
    pub certified: bool,
}

/// Evaluates the certificate and returns the dominant triplet of `S`.
pub fn check_certificate(
    x: &FixedRankPoint,
    model: &dyn ProblemModel,
    lambda: f64,
    cfg: &SolverConfig,
) -> Result<(Certificate, SingularTriplet)> {
    let eval = model.evaluate(x)?;
    certificate_from(x, &eval, lambda, cfg)
}

fn certificate_from(
    x: &FixedRankPoint,
    eval: &Evaluation,
    lambda: f64,
    cfg: &SolverConfig,
) -> Result<(Certificate, SingularTriplet)> {
    let (n, m) = eval.s.shape();
    let (triplet, converged) = linalg::dominant_singular_triplet_or_best(
        &eval.s,
        cfg.triplet_tol,
        linalg::default_max_iter(n, m),
    )?;
    let g: DualityGap = duality_gap(&eval.gap_terms, x.trace_b(), lambda, triplet.sigma);
    let sigma_gap = triplet.sigma - lambda;
    let certified = sigma_gap <= cfg.epsilon_sigma
        || g.relative <= cfg.epsilon_gap
        || cfg.epsilon_gap_abs.is_some_and(|e| g.gap <= e);
    Ok((
        Certificate {
            sigma1: triplet.sigma,
            sigma_gap,
            gap: g.gap,
            rel_gap: g.relative,
            dual_value: g.conjugate,
            triplet_converged: converged,
            certified,
        },
        triplet,
    ))
}

/// Rank-one step `X₊ = X − βuvᵀ` with its line-search record.
#[derive(Debug, Clone)]
pub struct RankOneUpdate {
    pub beta: f64,
    pub u: Vector,
    pub v: Vector,
    pub point: FixedRankPoint,
    pub record: RankOneRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankOneRecord {
    pub rank_before: usize,
    pub lambda: f64,
    pub sigma1: f64,
    pub lipschitz: f64,
    pub beta0: f64,
    pub beta: f64,
    pub backtracks: usize,
    pub phi_before: f64,
    pub phi_after: f64,
    /// `armijo_c·β(σ₁ − λ − L_f β/2)`.
    pub required_decrease: f64,
}

impl RankOneRecord {
    /// Whether the sufficient-decrease inequality holds for this step.
    pub fn satisfies_descent_bound(&self) -> bool {
        self.phi_after <= self.phi_before - self.required_decrease
    }
}

/// Backtracking rank-one update from `β = (σ₁ − λ)/L_f`.
pub fn rank_one_update(
    x: &FixedRankPoint,
    model: &dyn ProblemModel,
    lambda: f64,
    lipschitz: f64,
    triplet: &SingularTriplet,
    cfg: &SolverConfig,
) -> Result<RankOneUpdate> {
    let excess = triplet.sigma - lambda;
    if !(excess > 0.0) {
        return Err(Error::Precondition(format!(
            "rank-one update needs sigma1 > lambda (sigma1 = {:e}, lambda = {lambda:e})",
            triplet.sigma
        )));
    }
    if !(lipschitz > 0.0) {
        return Err(Error::Precondition("Lipschitz constant must be positive".into()));
    }
    let phi_before = model.objective(x, lambda)?;
    let beta0 = excess / lipschitz;
    let mut beta = beta0;
    let mut backtracks = 0;
    loop {
        let point = embed_rank_increment(x, beta, &triplet.u, &triplet.v)?;
        let phi_after = model.objective(&point, lambda)?;
        let required = cfg.armijo_c * beta * (excess - 0.5 * lipschitz * beta);
        if phi_after <= phi_before - required {
            return Ok(RankOneUpdate {
                beta,
                u: triplet.u.clone(),
                v: triplet.v.clone(),
                point,
                record: RankOneRecord {
                    rank_before: x.rank(),
                    lambda,
                    sigma1: triplet.sigma,
                    lipschitz,
                    beta0,
                    beta,
                    backtracks,
                    phi_before,
                    phi_after,
                    required_decrease: required,
                },
            });
        }
        beta *= cfg.backtrack_shrink;
        backtracks += 1;
        if beta < 1e-16 * beta0 {
            return Err(Error::DegenerateUpdate { beta });
        }
    }
}

/// Unit vector orthogonal to the columns of `q`, drawn from a fixed stream.
fn orthogonal_direction(q: &Mat, salt: u64) -> Result<Vector> {
    let n = q.nrows();
    if q.ncols() >= n {
        return Err(Error::Precondition("no orthogonal complement left".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x0e4b_ed00 ^ salt);
    for _ in 0..16 {
        let g = Vector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let w = &g - q * q.tr_mul(&g);
        let w = &w - q * q.tr_mul(&w);
        let nw = w.norm();
        if nw > 1e-8 * g.norm() {
            return Ok(w / nw);
        }
    }
    Err(Error::Numerical("could not draw an orthogonal direction".into()))
}

/// Factored form of `UBVᵀ − βuvᵀ` at rank `p + 1`.
///
/// With `a = Uᵀu`, `u′ = (I − UUᵀ)u`, `b = Vᵀv`, `v′ = (I − VVᵀ)(−βv)`:
/// `X₊ = [U û′] K [V v̂′]ᵀ`, `K = [[I, a], [0, ‖u′‖]]·diag(B, 1)·[[I, −βb], [0, ‖v′‖]]ᵀ`,
/// and the SVD `K = P′Σ′Q′ᵀ` gives `U₊ = [U û′]P′`, `B₊ = Σ′`, `V₊ = [V v̂′]Q′`.
pub fn embed_rank_increment(x: &FixedRankPoint, beta: f64, u: &Vector, v: &Vector) -> Result<FixedRankPoint> {
    if !(beta > 0.0) {
        return Err(Error::Precondition("beta must be positive".into()));
    }
    if u.len() != x.rows() || v.len() != x.cols() {
        return Err(Error::Dimension("singular vectors do not match the point".into()));
    }
    let p = x.rank();
    if p + 1 > x.rows().min(x.cols()) {
        return Err(Error::Precondition("rank cannot grow beyond min(n, m)".into()));
    }
    let (uu, vv) = (x.u(), x.v());
    let a = uu.tr_mul(u);
    let u_perp = u - uu * &a;
    let b = vv.tr_mul(v);
    let v_perp = (v - vv * &b) * (-beta);

    let (nu, u_hat) = match u_perp.norm() {
        n if n >= EMBED_DEGENERATE => (n, &u_perp / n),
        _ => (0.0, orthogonal_direction(uu, p as u64)?),
    };
    let (nv, v_hat) = match v_perp.norm() {
        n if n >= EMBED_DEGENERATE => (n, &v_perp / n),
        _ => (0.0, orthogonal_direction(vv, (p as u64) << 32)?),
    };

    let mut k = Mat::zeros(p + 1, p + 1);
    k.view_mut((0, 0), (p, p)).copy_from(&(x.b() - &a * b.transpose() * beta));
    k.view_mut((0, p), (p, 1)).copy_from(&(&a * nv));
    k.view_mut((p, 0), (1, p)).copy_from(&(b.transpose() * (-beta * nu)));
    k[(p, p)] = nu * nv;

    let svd = small_svd(&k)?;
    let smax = svd.sigma[0];
    if !(smax > 0.0) {
        return Err(Error::Numerical("rank-one update annihilated the iterate".into()));
    }
    let sigma = svd.sigma.map(|s| s.max(EMBED_SIGMA_FLOOR * smax));

    let mut ubar = Mat::zeros(x.rows(), p + 1);
    ubar.columns_mut(0, p).copy_from(uu);
    ubar.set_column(p, &u_hat);
    let mut vbar = Mat::zeros(x.cols(), p + 1);
    vbar.columns_mut(0, p).copy_from(vv);
    vbar.set_column(p, &v_hat);

    let u_new = polish_orthonormal(ubar * svd.left)?;
    let v_new = polish_orthonormal(vbar * svd.right)?;
    FixedRankPoint::new(u_new, Mat::from_diagonal(&sigma), v_new)
}

/// Removes roundoff drift from a matrix that is orthonormal up to rounding.
fn polish_orthonormal(q: Mat) -> Result<Mat> {
    if linalg::orthonormality_defect(&q) <= 1e-13 {
        Ok(q)
    } else {
        polar_orthonormal_factor(&q)
    }
}

/// Random starting point of rank `p`: Gaussian `U`, `V` orthonormalized and `B = scale·I`.
pub fn random_point(n: usize, m: usize, p: usize, scale: f64, rng: &mut ChaCha8Rng) -> Result<FixedRankPoint> {
    let gu = Mat::from_fn(n, p, |_, _| StandardNormal.sample(rng));
    let gv = Mat::from_fn(m, p, |_, _| StandardNormal.sample(rng));
    FixedRankPoint::new(
        polar_orthonormal_factor(&gu)?,
        Mat::identity(p, p) * scale,
        polar_orthonormal_factor(&gv)?,
    )
}

/// Trust-region run at one rank.
#[derive(Debug, Clone, Serialize)]
pub struct RankStage {
    pub rank: usize,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub cost: f64,
    pub grad_norm: f64,
    pub stop_reason: StopReason,
    pub grad_history: Vec<f64>,
    pub cost_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Certified,
    /// The rank cap was reached before the certificate held.
    MaxRank,
    /// The rank-one line search underflowed without sufficient decrease.
    DegenerateUpdate,
}

/// Events emitted during [`minimize_traced`].
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    Iteration(IterationRecord),
    Certificate {
        rank: usize,
        cost: f64,
        #[serde(flatten)]
        certificate: Certificate,
    },
    RankOne(RankOneRecord),
}

#[derive(Debug, Clone)]
pub struct ConvexSolution {
    pub point: FixedRankPoint,
    pub lambda: f64,
    pub rank: usize,
    pub objective: f64,
    pub certificate: Certificate,
    pub status: SolveStatus,
    pub stages: Vec<RankStage>,
    pub updates: Vec<RankOneRecord>,
    pub tr_iters: usize,
    pub inner_iters: usize,
    pub wall_time_s: f64,
}

impl ConvexSolution {
    pub fn certified(&self) -> bool {
        self.status == SolveStatus::Certified
    }
    pub fn sigma_gap(&self) -> f64 {
        self.certificate.sigma_gap
    }
    pub fn duality_gap(&self) -> f64 {
        self.certificate.gap
    }
}

/// Solves `min f(X) + λ‖X‖_*`.
pub fn minimize(
    model: &dyn ProblemModel,
    lambda: f64,
    cfg: &SolverConfig,
    x0: Option<FixedRankPoint>,
) -> Result<ConvexSolution> {
    minimize_traced(model, lambda, cfg, x0, &mut |_| {})
}

/// [`minimize`] with a sink receiving every trace event.
pub fn minimize_traced(
    model: &dyn ProblemModel,
    lambda: f64,
    cfg: &SolverConfig,
    x0: Option<FixedRankPoint>,
    sink: &mut dyn FnMut(&TraceEvent),
) -> Result<ConvexSolution> {
    let start = Instant::now();
    let shape = model.shape();
    cfg.validate(shape)?;
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Precondition(format!("lambda must be positive, got {lambda}")));
    }
    let cap = cfg.rank_cap(shape);
    let mut x = match x0 {
        Some(x) => {
            if (x.rows(), x.cols()) != shape {
                return Err(Error::Dimension("initial point does not match the problem".into()));
            }
            x
        }
        None => match cfg.init {
            Initializer::Zero => FixedRankPoint::zero(shape.0, shape.1),
            Initializer::Random => {
                let mut r = rng::stream(cfg.seed, rng::INIT);
                random_point(shape.0, shape.1, cfg.rank0.min(cap), cfg.init_scale, &mut r)?
            }
        },
    };
    let mut tr_cfg = cfg.tr.clone();
    if let Some(k) = cfg.max_rank_fixed_inner {
        tr_cfg.max_outer = tr_cfg.max_outer.min(k.max(1));
    }
    let lipschitz = model.lipschitz_estimate();

    let mut stages = Vec::new();
    let mut updates = Vec::new();
    let mut tr_iters = 0;
    let mut inner_iters = 0;

    loop {
        if x.rank() > 0 {
            let mut tr_sink = |r: &IterationRecord| sink(&TraceEvent::Iteration(r.clone()));
            let res = solve_fixed_rank(model, lambda, x, &tr_cfg, Some(&mut tr_sink))?;
            tr_iters += res.outer_iters;
            inner_iters += res.inner_iters;
            log::debug!(
                "rank {}: {} TR iterations, cost {:e}, |grad| {:e}, {:?}",
                res.point.rank(),
                res.outer_iters,
                res.cost,
                res.grad_norm,
                res.stop_reason
            );
            stages.push(RankStage {
                rank: res.point.rank(),
                outer_iters: res.outer_iters,
                inner_iters: res.inner_iters,
                cost: res.cost,
                grad_norm: res.grad_norm,
                stop_reason: res.stop_reason,
                grad_history: res.grad_history,
                cost_history: res.cost_history,
            });
            x = res.point;
        }

        let eval = model.evaluate(&x)?;
        let objective = eval.loss + lambda * x.trace_b();
        let (cert, triplet) = certificate_from(&x, &eval, lambda, cfg)?;
        sink(&TraceEvent::Certificate {
            rank: x.rank(),
            cost: objective,
            certificate: cert,
        });

        let done = |x: FixedRankPoint, status, stages, updates| ConvexSolution {
            rank: x.rank(),
            point: x,
            lambda,
            objective,
            certificate: cert,
            status,
            stages,
            updates,
            tr_iters,
            inner_iters,
            wall_time_s: start.elapsed().as_secs_f64(),
        };

        if cert.certified {
            return Ok(done(x, SolveStatus::Certified, stages, updates));
        }
        if x.rank() >= cap {
            return Ok(done(x, SolveStatus::MaxRank, stages, updates));
        }
        match rank_one_update(&x, model, lambda, lipschitz, &triplet, cfg) {
            Ok(upd) => {
                sink(&TraceEvent::RankOne(upd.record));
                updates.push(upd.record);
                x = upd.point;
            }
            Err(Error::DegenerateUpdate { beta }) => {
                log::warn!("rank-one update degenerate at beta = {beta:e}");
                return Ok(done(x, SolveStatus::DegenerateUpdate, stages, updates));
            }
            Err(e) => return Err(e),
        }
    }
}
