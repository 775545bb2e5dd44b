//! Dense proximal-gradient reference solver for small instances.
//!
//! Plain ISTA with singular value soft-thresholding. It works on explicit
//! `n×m` matrices and shares nothing with the factored solver except the
//! duality-gap formula, so agreement between the two is meaningful.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd_sorted, Mat};
use crate::problems::{duality_gap, DualityGap, GapTerms, MatrixCompletion, MultivariateRegression};

/// A loss with dense evaluation, for the reference solver.
pub trait DenseProblem {
    fn dense_shape(&self) -> (usize, usize);
    /// Residual terms at an explicit matrix.
    fn dense_terms(&self, x: &Mat) -> GapTerms;
    fn dense_gradient(&self, x: &Mat) -> Mat;
    fn dense_lipschitz(&self) -> f64;

    fn dense_loss(&self, x: &Mat) -> f64 {
        let t = self.dense_terms(x);
        t.residual_sq + t.ridge_sq
    }
}

impl DenseProblem for MatrixCompletion {
    fn dense_shape(&self) -> (usize, usize) {
        self.data().shape()
    }

    fn dense_terms(&self, x: &Mat) -> GapTerms {
        let target = self.data().to_dense();
        let r = (x - &target).component_mul(&self.data().mask());
        GapTerms {
            residual_sq: r.norm_squared(),
            cross: r.dot(&target),
            ridge_sq: self.ridge() * x.norm_squared(),
        }
    }

    fn dense_gradient(&self, x: &Mat) -> Mat {
        let target = self.data().to_dense();
        (x - &target).component_mul(&self.data().mask()) * 2.0 + x * (2.0 * self.ridge())
    }

    fn dense_lipschitz(&self) -> f64 {
        2.0 + 2.0 * self.ridge()
    }
}

impl DenseProblem for MultivariateRegression {
    fn dense_shape(&self) -> (usize, usize) {
        (self.data().x().ncols(), self.data().y().ncols())
    }

    fn dense_terms(&self, w: &Mat) -> GapTerms {
        let s = self.data().scale();
        let r = self.data().x() * w - self.data().y();
        GapTerms {
            residual_sq: s * r.norm_squared(),
            cross: s * r.dot(self.data().y()),
            ridge_sq: self.ridge() * w.norm_squared(),
        }
    }

    fn dense_gradient(&self, w: &Mat) -> Mat {
        let s = self.data().scale();
        let x = self.data().x();
        x.transpose() * (x * w - self.data().y()) * (2.0 * s) + w * (2.0 * self.ridge())
    }

    fn dense_lipschitz(&self) -> f64 {
        let sx = svd_sorted(self.data().x()).map(|s| s.sigma.get(0).copied().unwrap_or(0.0)).unwrap_or(0.0);
        2.0 * self.data().scale() * sx * sx + 2.0 * self.ridge()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    /// Step size; `1/L_f` when absent.
    pub step: Option<f64>,
    pub max_iter: usize,
    /// Relative objective change that stops the iteration.
    pub tol: f64,
    /// Relative duality gap that stops the iteration, checked every `gap_every` steps.
    pub gap_tol: f64,
    pub gap_every: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            step: None,
            max_iter: 200_000,
            tol: 1e-12,
            gap_tol: 1e-12,
            gap_every: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub x: Mat,
    pub objective: f64,
    pub iterations: usize,
    pub gap: DualityGap,
    /// Whether the relative gap reached `1e-8`.
    pub converged: bool,
}

impl OracleResult {
    /// Singular values above `rel·σ_max`.
    pub fn numerical_rank(&self, rel: f64) -> usize {
        numerical_rank(&self.x, rel)
    }
}

/// Number of singular values above `rel·σ_max`.
pub fn numerical_rank(x: &Mat, rel: f64) -> usize {
    let s = match svd_sorted(x) {
        Ok(s) => s.sigma,
        Err(_) => return 0,
    };
    match s.get(0) {
        Some(&smax) if smax > 0.0 => s.iter().filter(|&&v| v > rel * smax).count(),
        _ => 0,
    }
}

/// `argmin_Z ½‖Z − X‖²_F + τ‖Z‖_*`.
pub fn singular_value_soft_threshold(x: &Mat, tau: f64) -> Result<Mat> {
    Ok(soft_threshold_with_norm(x, tau)?.0)
}

/// SVT together with the trace norm of its result.
fn soft_threshold_with_norm(x: &Mat, tau: f64) -> Result<(Mat, f64)> {
    if !(tau >= 0.0) {
        return Err(Error::Precondition("threshold must be nonnegative".into()));
    }
    let svd = svd_sorted(x)?;
    let shrunk = svd.sigma.map(|s| (s - tau).max(0.0));
    let mut left = svd.left;
    for (j, mut col) in left.column_iter_mut().enumerate() {
        col *= shrunk[j];
    }
    Ok((left * svd.right.transpose(), shrunk.sum()))
}

/// Trace norm of a dense matrix.
pub fn trace_norm(x: &Mat) -> Result<f64> {
    Ok(svd_sorted(x)?.sigma.sum())
}

/// Duality gap at an explicit matrix, with `σ₁` from a full SVD.
pub fn dense_duality_gap(problem: &dyn DenseProblem, x: &Mat, lambda: f64) -> Result<DualityGap> {
    let s = problem.dense_gradient(x);
    let sigma1 = svd_sorted(&s)?.sigma.get(0).copied().unwrap_or(0.0);
    Ok(duality_gap(&problem.dense_terms(x), trace_norm(x)?, lambda, sigma1))
}

/// ISTA: `X ← SVT(X − t∇f(X), tλ)` from `X = 0`.
pub fn solve_convex_dense(problem: &dyn DenseProblem, lambda: f64, cfg: &OracleConfig) -> Result<OracleResult> {
    if !(lambda >= 0.0) {
        return Err(Error::Precondition("lambda must be nonnegative".into()));
    }
    let step = cfg.step.unwrap_or_else(|| 1.0 / problem.dense_lipschitz());
    if !(step > 0.0) {
        return Err(Error::Precondition("oracle step must be positive".into()));
    }
    let (n, m) = problem.dense_shape();
    let mut x = Mat::zeros(n, m);
    let mut obj = problem.dense_loss(&x);
    let mut iterations = 0;
    for k in 1..=cfg.max_iter {
        iterations = k;
        let g = problem.dense_gradient(&x);
        let (next, norm) = soft_threshold_with_norm(&(&x - g * step), step * lambda)?;
        let next_obj = problem.dense_loss(&next) + lambda * norm;
        let change = (obj - next_obj).abs();
        x = next;
        obj = next_obj;
        if change <= cfg.tol * obj.abs().max(f64::MIN_POSITIVE) {
            break;
        }
        if cfg.gap_every > 0 && k % cfg.gap_every == 0 {
            let gap = dense_duality_gap(problem, &x, lambda)?;
            if gap.relative <= cfg.gap_tol {
                break;
            }
        }
    }
    let gap = dense_duality_gap(problem, &x, lambda)?;
    Ok(OracleResult {
        objective: problem.dense_loss(&x) + lambda * trace_norm(&x)?,
        x,
        iterations,
        converged: gap.relative <= 1e-8,
        gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Vector;
    use crate::problems::ObservedEntries;

    #[test]
    fn svt_examples() {
        let a = Mat::from_row_slice(2, 3, &[1.0, 2.0, 0.5, -1.0, 0.0, 3.0]);
        assert!((singular_value_soft_threshold(&a, 0.0).unwrap() - &a).norm() < 1e-12);
        let smax = svd_sorted(&a).unwrap().sigma[0];
        assert!(singular_value_soft_threshold(&a, smax).unwrap().norm() < 1e-12);
        let d = Mat::from_diagonal(&Vector::from_vec(vec![3.0, 1.0]));
        let s = singular_value_soft_threshold(&d, 2.0).unwrap();
        assert!((s - Mat::from_diagonal(&Vector::from_vec(vec![1.0, 0.0]))).norm() < 1e-12);
    }

    #[test]
    fn svt_minimizes_prox_objective_on_grid() {
        // 2×2 diagonal: the prox decouples over singular values.
        let x = Mat::from_diagonal(&Vector::from_vec(vec![2.0, 0.7]));
        let tau = 0.5;
        let z = singular_value_soft_threshold(&x, tau).unwrap();
        let f = |a: f64, b: f64| {
            let zz = Mat::from_diagonal(&Vector::from_vec(vec![a, b]));
            0.5 * (zz - &x).norm_squared() + tau * (a.abs() + b.abs())
        };
        let best = f(z[(0, 0)], z[(1, 1)]);
        for i in 0..=60 {
            for j in 0..=60 {
                let (a, b) = (i as f64 * 0.05, j as f64 * 0.05);
                assert!(best <= f(a, b) + 1e-12);
            }
        }
    }

    #[test]
    fn huge_lambda_gives_zero() {
        let pos: Vec<_> = (0..4).flat_map(|i| (0..3).map(move |j| (i, j))).collect();
        let a = Mat::from_fn(4, 3, |i, j| (i + 2 * j) as f64 - 2.0);
        let model = MatrixCompletion::new(ObservedEntries::from_dense(&a, &pos).unwrap());
        let r = solve_convex_dense(&model, 1e6, &OracleConfig::default()).unwrap();
        assert_eq!(r.x.norm(), 0.0);
        assert!(r.converged);
    }

    #[test]
    fn full_observation_recovers_low_rank() {
        let l = Mat::from_fn(10, 2, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let rr = Mat::from_fn(8, 2, |i, j| ((i * 3 + j * 5) % 7) as f64 - 3.0);
        let a = &l * rr.transpose();
        let pos: Vec<_> = (0..10).flat_map(|i| (0..8).map(move |j| (i, j))).collect();
        let model = MatrixCompletion::new(ObservedEntries::from_dense(&a, &pos).unwrap());
        let r = solve_convex_dense(&model, 1e-7, &OracleConfig::default()).unwrap();
        assert!((&r.x - &a).norm() <= 1e-6 * a.norm(), "{} {} {}", (&r.x - &a).norm(), a.norm(), r.iterations);
    }

    #[test]
    fn ista_objective_is_monotone() {
        let a = Mat::from_fn(5, 4, |i, j| ((i * 5 + j * 3) % 7) as f64 - 3.0);
        let pos: Vec<_> = (0..5).flat_map(|i| (0..4).map(move |j| (i, j))).filter(|(i, j)| (i + j) % 3 != 1).collect();
        let model = MatrixCompletion::new(ObservedEntries::from_dense(&a, &pos).unwrap());
        let lam = 0.3;
        let mut x = Mat::zeros(5, 4);
        let mut prev = f64::INFINITY;
        for _ in 0..200 {
            let g = model.dense_gradient(&x);
            x = singular_value_soft_threshold(&(&x - g * 0.5), 0.5 * lam).unwrap();
            let obj = model.dense_loss(&x) + lam * trace_norm(&x).unwrap();
            assert!(obj <= prev + 1e-12);
            prev = obj;
        }
    }
}
