//! Riemannian trust-region method with a truncated conjugate-gradient
//! (Steihaug-Toint) inner solver, working in the horizontal space.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{
    self, hessian_unchecked, inner, metric_norm, retract, FixedRankPoint, TangentVector, Triple,
};
use crate::problems::{self, Evaluation, ProblemModel};

/// Predicted reductions below `MODEL_DECREASE_FLOOR·max(1, |cost|)` stop the
/// iteration. Far below the cost's resolution on purpose: the regularized
/// ratio already accepts steps whose decrease is lost in roundoff.
const MODEL_DECREASE_FLOOR: f64 = f64::EPSILON * f64::EPSILON;

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrustRegionConfig {
    pub delta0: f64,
    pub delta_max: f64,
    pub rho_accept: f64,
    pub rho_expand: f64,
    pub tcg_kappa: f64,
    pub tcg_theta: f64,
    pub grad_tol: f64,
    pub rel_cost_tol: f64,
    pub abs_cost_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        Self {
            delta0: 1.0,
            delta_max: 1024.0,
            rho_accept: 0.1,
            rho_expand: 0.75,
            tcg_kappa: 0.1,
            tcg_theta: 1.0,
            grad_tol: 1e-12,
            rel_cost_tol: 1e-12,
            abs_cost_tol: 1e-12,
            max_outer: 500,
            max_inner: 1000,
        }
    }
}

impl TrustRegionConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.rho_accept
            && self.rho_accept < self.rho_expand
            && self.rho_expand < 1.0
            && self.delta0 > 0.0
            && self.delta0 <= self.delta_max
            && self.grad_tol > 0.0
            && self.rel_cost_tol > 0.0
            && self.abs_cost_tol > 0.0
            && self.tcg_kappa > 0.0
            && self.tcg_kappa < 1.0
            && self.tcg_theta > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Precondition(format!("invalid trust-region configuration: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TcgStatus {
    Interior,
    BoundaryHit,
    NegativeCurvature,
    MaxInner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Gradient,
    CostStagnation,
    ModelStagnation,
    MaxIters,
}

/// One outer iteration, as emitted to trace sinks.
#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub rank: usize,
    pub cost: f64,
    pub grad_norm: f64,
    pub delta: f64,
    pub rho: f64,
    pub inner: usize,
    pub accepted: bool,
    pub tcg: TcgStatus,
}

#[derive(Debug, Clone)]
pub struct FixedRankResult {
    pub point: FixedRankPoint,
    pub cost: f64,
    pub grad_norm: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub stop_reason: StopReason,
    /// Gradient norm at the start and after every accepted step.
    pub grad_history: Vec<f64>,
    /// Cost at the start and after every accepted step.
    pub cost_history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TcgOutput {
    pub eta: TangentVector,
    /// `Hess[η]`, tracked alongside `η`.
    pub h_eta: TangentVector,
    pub status: TcgStatus,
    pub iters: usize,
}

/// Model value `⟨g, η⟩ + ½⟨η, Hη⟩` (without the constant term).
pub fn model_value(x: &FixedRankPoint, grad: &TangentVector, eta: &TangentVector, h_eta: &TangentVector) -> f64 {
    inner(x, grad, eta) + 0.5 * inner(x, eta, h_eta)
}

/// Approximately minimizes `⟨g, η⟩ + ½⟨η, Hη⟩` subject to `‖η‖ ≤ Δ` by
/// truncated conjugate gradients.
pub fn tcg_subproblem(
    x: &FixedRankPoint,
    grad: &TangentVector,
    hess: &mut dyn FnMut(&TangentVector) -> Result<TangentVector>,
    delta: f64,
    cfg: &TrustRegionConfig,
) -> Result<TcgOutput> {
    let mut eta = TangentVector::zero(x);
    let mut h_eta = TangentVector::zero(x);
    let mut r = grad.clone();
    let mut r_r = inner(x, &r, &r);
    let r0 = r_r.sqrt();
    if r0 == 0.0 {
        return Ok(TcgOutput {
            eta,
            h_eta,
            status: TcgStatus::Interior,
            iters: 0,
        });
    }
    let target = r0 * r0.powf(cfg.tcg_theta).min(cfg.tcg_kappa);
    let mut d = r.scale(-1.0);
    let mut e_e = 0.0;
    let mut e_d = 0.0;
    let mut d_d = r_r;
    let delta_sq = delta * delta;

    for j in 0..cfg.max_inner {
        let h_d = hess(&d)?;
        let d_hd = inner(x, &d, &h_d);
        let alpha = r_r / d_hd;
        let e_e_new = e_e + 2.0 * alpha * e_d + alpha * alpha * d_d;

        if d_hd <= 0.0 || e_e_new >= delta_sq {
            // Move to the boundary along d.
            let tau = (-e_d + (e_d * e_d + d_d * (delta_sq - e_e)).max(0.0).sqrt()) / d_d;
            eta.axpy(tau, &d);
            h_eta.axpy(tau, &h_d);
            let status = if d_hd <= 0.0 {
                TcgStatus::NegativeCurvature
            } else {
                TcgStatus::BoundaryHit
            };
            return Ok(TcgOutput {
                eta,
                h_eta,
                status,
                iters: j + 1,
            });
        }

        e_e = e_e_new;
        eta.axpy(alpha, &d);
        h_eta.axpy(alpha, &h_d);
        r.axpy(alpha, &h_d);
        let r_r_new = inner(x, &r, &r);
        if r_r_new.sqrt() <= target {
            return Ok(TcgOutput {
                eta,
                h_eta,
                status: TcgStatus::Interior,
                iters: j + 1,
            });
        }
        let beta = r_r_new / r_r;
        r_r = r_r_new;
        d = TangentVector::lincomb(-1.0, &r, beta, &d);
        e_d = beta * (e_d + alpha * d_d);
        d_d = r_r + beta * beta * d_d;
    }
    Ok(TcgOutput {
        eta,
        h_eta,
        status: TcgStatus::MaxInner,
        iters: cfg.max_inner,
    })
}

/// Cost, Euclidean gradient triple and horizontal Riemannian gradient at a point.
struct State {
    x: FixedRankPoint,
    eval: Evaluation,
    cost: f64,
    egrad: Triple,
    grad: TangentVector,
    grad_norm: f64,
}

impl State {
    fn new(model: &dyn ProblemModel, lambda: f64, x: FixedRankPoint) -> Result<Self> {
        let eval = model.evaluate(&x)?;
        let cost = eval.loss + lambda * x.trace_b();
        let egrad = problems::euclidean_gradient(&x, &eval.s, lambda);
        let grad = geometry::riemannian_gradient(&x, &egrad)?;
        let grad_norm = metric_norm(&x, &grad);
        Ok(Self {
            x,
            eval,
            cost,
            egrad,
            grad,
            grad_norm,
        })
    }
}

/// Riemannian gradient norm of `φ̄` at `x`.
pub fn gradient_norm(model: &dyn ProblemModel, lambda: f64, x: &FixedRankPoint) -> Result<f64> {
    Ok(State::new(model, lambda, x.clone())?.grad_norm)
}

/// Minimizes `f(UBVᵀ) + λ Trace(B)` over rank-`p` points starting at `x0`.
pub fn solve_fixed_rank(
    model: &dyn ProblemModel,
    lambda: f64,
    x0: FixedRankPoint,
    cfg: &TrustRegionConfig,
    sink: Option<&mut dyn FnMut(&IterationRecord)>,
) -> Result<FixedRankResult> {
    cfg.validate()?;
    let mut sink = sink;
    let mut st = State::new(model, lambda, x0)?;
    let mut delta = cfg.delta0;
    let mut inner_total = 0;
    let mut grad_history = vec![st.grad_norm];
    let mut cost_history = vec![st.cost];
    let rank = st.x.rank();
    let max_inner = cfg.max_inner;
    let inner_cfg = TrustRegionConfig {
        max_inner,
        ..cfg.clone()
    };

    let finish = |st: State, outer: usize, inner: usize, reason, gh, ch| FixedRankResult {
        cost: st.cost,
        grad_norm: st.grad_norm,
        point: st.x,
        outer_iters: outer,
        inner_iters: inner,
        stop_reason: reason,
        grad_history: gh,
        cost_history: ch,
    };

    if rank == 0 || st.grad_norm <= cfg.grad_tol {
        return Ok(finish(st, 0, 0, StopReason::Gradient, grad_history, cost_history));
    }

    for k in 1..=cfg.max_outer {
        let out = {
            let x = &st.x;
            let s = &st.eval.s;
            let egrad = &st.egrad;
            let mut hess = |xi: &TangentVector| -> Result<TangentVector> {
                let gd = problems::hess_products_tangent(model, x, s, xi)?;
                Ok(hessian_unchecked(x, xi, egrad, &gd))
            };
            tcg_subproblem(x, &st.grad, &mut hess, delta, &inner_cfg)?
        };
        inner_total += out.iters;
        let model_decrease = -model_value(&st.x, &st.grad, &out.eta, &out.h_eta);

        if model_decrease.abs() < MODEL_DECREASE_FLOOR * st.cost.abs().max(1.0) {
            return Ok(finish(st, k, inner_total, StopReason::ModelStagnation, grad_history, cost_history));
        }

        let candidate = match retract(&st.x, &out.eta) {
            Ok(p) => Some(State::new(model, lambda, p)?),
            Err(Error::Singular(msg)) | Err(Error::Numerical(msg)) => {
                log::debug!("retraction failed ({msg}); shrinking radius");
                None
            }
            Err(Error::NotSpd) => None,
            Err(e) => return Err(e),
        };

        let (rho, accepted) = match &candidate {
            Some(c) => {
                let reg = 1e3 * f64::EPSILON * st.cost.abs().max(1.0);
                let rho = (st.cost - c.cost + reg) / (model_decrease + reg);
                (rho, rho > cfg.rho_accept && c.cost <= st.cost && c.cost.is_finite())
            }
            None => (f64::NEG_INFINITY, false),
        };

        if rho < 0.25 || !accepted {
            delta *= 0.25;
        } else if rho > cfg.rho_expand
            && matches!(out.status, TcgStatus::BoundaryHit | TcgStatus::NegativeCurvature)
        {
            delta = (2.0 * delta).min(cfg.delta_max);
        }

        let mut stop = None;
        if accepted {
            let c = candidate.expect("accepted implies candidate");
            let change = (st.cost - c.cost).abs();
            st = c;
            grad_history.push(st.grad_norm);
            cost_history.push(st.cost);
            if st.grad_norm <= cfg.grad_tol {
                stop = Some(StopReason::Gradient);
            } else if change <= cfg.abs_cost_tol || change <= cfg.rel_cost_tol * st.cost.abs() {
                stop = Some(StopReason::CostStagnation);
            }
        } else if rho > cfg.rho_accept && candidate.as_ref().is_some_and(|c| c.cost.is_finite()) {
            // The model agrees but the cost went up: the remaining decrease
            // is below the resolution of the cost.
            stop = Some(StopReason::CostStagnation);
        }

        if let Some(s) = sink.as_mut() {
            s(&IterationRecord {
                iter: k,
                rank,
                cost: st.cost,
                grad_norm: st.grad_norm,
                delta,
                rho,
                inner: out.iters,
                accepted,
                tcg: out.status,
            });
        }

        if let Some(reason) = stop {
            return Ok(finish(st, k, inner_total, reason, grad_history, cost_history));
        }
        if delta < 1e-300 {
            return Ok(finish(st, k, inner_total, StopReason::ModelStagnation, grad_history, cost_history));
        }
    }
    Ok(finish(st, cfg.max_outer, inner_total, StopReason::MaxIters, grad_history, cost_history))
}

/// Dimension of the horizontal space, `(n + m − p) p`.
pub fn horizontal_dim(x: &FixedRankPoint) -> usize {
    let p = x.rank();
    (x.rows() + x.cols()).saturating_sub(p) * p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project_to_horizontal, project_to_tangent};
    use crate::linalg::{svd_sorted, Mat};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_fn(n, m, |_, _| StandardNormal.sample(rng))
    }

    fn point(seed: u64) -> FixedRankPoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = svd_sorted(&gauss(6, 2, &mut rng)).unwrap().left;
        let v = svd_sorted(&gauss(5, 2, &mut rng)).unwrap().left;
        FixedRankPoint::new(u, Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 1.0])), v).unwrap()
    }

    fn horizontal(x: &FixedRankPoint, seed: u64) -> TangentVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Triple {
            u: gauss(6, 2, &mut rng),
            b: gauss(2, 2, &mut rng),
            v: gauss(5, 2, &mut rng),
        };
        project_to_horizontal(x, &project_to_tangent(x, &z).unwrap()).unwrap()
    }

    #[test]
    fn tcg_zero_gradient() {
        let x = point(1);
        let g = TangentVector::zero(&x);
        let mut h = |v: &TangentVector| Ok(v.clone());
        let out = tcg_subproblem(&x, &g, &mut h, 1.0, &TrustRegionConfig::default()).unwrap();
        assert_eq!(out.status, TcgStatus::Interior);
        assert_eq!(out.eta.norm_euclidean(), 0.0);
    }

    #[test]
    fn tcg_identity_hessian_gives_newton_step() {
        let x = point(2);
        let g = horizontal(&x, 3);
        let mut h = |v: &TangentVector| Ok(v.clone());
        let out = tcg_subproblem(&x, &g, &mut h, 1e6, &TrustRegionConfig::default()).unwrap();
        let diff = TangentVector::lincomb(1.0, &out.eta, 1.0, &g);
        assert!(metric_norm(&x, &diff) < 1e-12);
    }

    #[test]
    fn tcg_negative_curvature_exits_on_boundary() {
        let x = point(4);
        // Orthonormal pair e1, e2 in the horizontal space; H = diag(1, -1) on it.
        let a = horizontal(&x, 5);
        let e1 = a.scale(1.0 / metric_norm(&x, &a));
        let b = horizontal(&x, 6);
        let mut e2 = b.clone();
        e2.axpy(-inner(&x, &b, &e1), &e1);
        let e2 = e2.scale(1.0 / metric_norm(&x, &e2));
        let g = TangentVector::lincomb(1.0, &e1, 2.0, &e2);
        let (e1c, e2c) = (e1.clone(), e2.clone());
        let xc = x.clone();
        let mut h = move |v: &TangentVector| {
            let c1 = inner(&xc, v, &e1c);
            let c2 = inner(&xc, v, &e2c);
            Ok(TangentVector::lincomb(c1, &e1c, -c2, &e2c))
        };
        let delta = 0.75;
        let out = tcg_subproblem(&x, &g, &mut h, delta, &TrustRegionConfig::default()).unwrap();
        assert_eq!(out.status, TcgStatus::NegativeCurvature);
        assert!((metric_norm(&x, &out.eta) - delta).abs() < 1e-10);
    }

    #[test]
    fn tcg_beats_cauchy_point() {
        let x = point(7);
        let g = horizontal(&x, 8);
        let w = horizontal(&x, 9);
        let xc = x.clone();
        let wc = w.clone();
        // H = I + w wᵀ (positive definite).
        let mut h = move |v: &TangentVector| {
            let mut out = v.clone();
            out.axpy(inner(&xc, v, &wc), &wc);
            Ok(out)
        };
        for &delta in &[0.01, 0.3, 10.0] {
            let out = tcg_subproblem(&x, &g, &mut h, delta, &TrustRegionConfig::default()).unwrap();
            let m_tcg = model_value(&x, &g, &out.eta, &out.h_eta);
            let hg = h(&g).unwrap();
            let gn = metric_norm(&x, &g);
            let ghg = inner(&x, &g, &hg);
            let t = (gn * gn / ghg).min(delta / gn);
            let m_cauchy = -t * gn * gn + 0.5 * t * t * ghg;
            assert!(m_tcg <= m_cauchy + 1e-12, "delta {delta}: {m_tcg} vs {m_cauchy}");
            assert!(metric_norm(&x, &out.eta) <= delta * (1.0 + 1e-12));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrustRegionConfig::default().validate().is_ok());
        let bad = TrustRegionConfig {
            rho_accept: 0.9,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
