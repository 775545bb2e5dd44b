//! Smooth convex losses bound to the fixed-rank geometry.
//!
//! A [`ProblemModel`] evaluates `f(UBVᵀ)`, its Euclidean gradient `S` as a
//! structured [`DualOperator`], and the directional derivative `S_*` of `S`.
//! The Riemannian gradient and Hessian only ever need products of these
//! operators with thin matrices.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{FixedRankPoint, TangentVector, Triple};
use crate::linalg::{self, tol, LinearOperator, Mat, Vector};

/// Slack allowed for a negative duality gap caused by roundoff.
pub const GAP_SLACK: f64 = 1e-9;

/// Sparsity pattern shared by observed values and the sparse dual operators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsePattern {
    n: usize,
    m: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

impl SparsePattern {
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }
    pub fn cols(&self) -> &[usize] {
        &self.cols
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.n, self.m)
    }
    pub fn nnz(&self) -> usize {
        self.rows.len()
    }
}

/// Observed entries `(i, j, X̃_ij)` of an `n×m` matrix, sorted by `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedEntries {
    pattern: Arc<SparsePattern>,
    values: Vec<f64>,
}

impl ObservedEntries {
    /// Builds the store from unsorted triplets. Duplicates and out-of-range
    /// indices are rejected.
    pub fn new(n: usize, m: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        for &(i, j, x) in &triplets {
            if i >= n || j >= m {
                return Err(Error::Dimension(format!(
                    "entry ({i}, {j}) outside a {n}x{m} matrix"
                )));
            }
            if !x.is_finite() {
                return Err(Error::Precondition(format!("entry ({i}, {j}) is not finite")));
            }
        }
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        for w in triplets.windows(2) {
            if (w[0].0, w[0].1) == (w[1].0, w[1].1) {
                return Err(Error::Precondition(format!(
                    "duplicate entry ({}, {})",
                    w[0].0, w[0].1
                )));
            }
        }
        let rows = triplets.iter().map(|t| t.0).collect();
        let cols = triplets.iter().map(|t| t.1).collect();
        let values = triplets.iter().map(|t| t.2).collect();
        Ok(Self {
            pattern: Arc::new(SparsePattern { n, m, rows, cols }),
            values,
        })
    }

    /// Samples `X̃` at the given `(i, j)` positions.
    pub fn from_dense(x: &Mat, positions: &[(usize, usize)]) -> Result<Self> {
        let trip = positions.iter().map(|&(i, j)| (i, j, x[(i, j)])).collect();
        Self::new(x.nrows(), x.ncols(), trip)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pattern.shape()
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn pattern(&self) -> &Arc<SparsePattern> {
        &self.pattern
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.pattern
            .rows
            .iter()
            .zip(&self.pattern.cols)
            .zip(&self.values)
            .map(|((&i, &j), &x)| (i, j, x))
    }

    /// `W ⊙ X̃` as a dense matrix.
    pub fn to_dense(&self) -> Mat {
        let (n, m) = self.shape();
        let mut out = Mat::zeros(n, m);
        for (i, j, x) in self.iter() {
            out[(i, j)] = x;
        }
        out
    }

    /// 0/1 mask as a dense matrix.
    pub fn mask(&self) -> Mat {
        let (n, m) = self.shape();
        let mut out = Mat::zeros(n, m);
        for (i, j, _) in self.iter() {
            out[(i, j)] = 1.0;
        }
        out
    }

    /// Sparse operator `W ⊙ X̃`.
    pub fn as_operator(&self) -> DualOperator {
        DualOperator::sparse(self.pattern.clone(), self.values.clone())
    }
}

/// `Σ_k L_k R_kᵀ` stored as a thin product.
#[derive(Debug, Clone)]
struct LowRankTerm {
    left: Mat,
    right: Mat,
}

/// A matrix `S` accessed through thin products: a sparse part on a fixed
/// pattern, an optional dense part and a sum of low-rank terms.
#[derive(Debug, Clone)]
pub struct DualOperator {
    rows: usize,
    cols: usize,
    sparse: Option<(Arc<SparsePattern>, Vec<f64>)>,
    dense: Option<Mat>,
    low_rank: Vec<LowRankTerm>,
}

impl DualOperator {
    pub fn zero(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            sparse: None,
            dense: None,
            low_rank: Vec::new(),
        }
    }

    pub fn sparse(pattern: Arc<SparsePattern>, values: Vec<f64>) -> Self {
        assert_eq!(pattern.nnz(), values.len());
        let (rows, cols) = pattern.shape();
        Self {
            rows,
            cols,
            sparse: Some((pattern, values)),
            dense: None,
            low_rank: Vec::new(),
        }
    }

    pub fn dense(s: Mat) -> Self {
        Self {
            rows: s.nrows(),
            cols: s.ncols(),
            sparse: None,
            dense: Some(s),
            low_rank: Vec::new(),
        }
    }

    /// Adds `L Rᵀ`.
    pub fn with_low_rank(mut self, left: Mat, right: Mat) -> Self {
        assert_eq!(left.nrows(), self.rows);
        assert_eq!(right.nrows(), self.cols);
        assert_eq!(left.ncols(), right.ncols());
        if left.ncols() > 0 {
            self.low_rank.push(LowRankTerm { left, right });
        }
        self
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// `S M` for `M` of shape `cols×k`.
    pub fn mul_mat(&self, m: &Mat) -> Mat {
        assert_eq!(m.nrows(), self.cols);
        let k = m.ncols();
        let mut out = match &self.dense {
            Some(d) => d * m,
            None => Mat::zeros(self.rows, k),
        };
        if let Some((pat, vals)) = &self.sparse {
            for c in 0..k {
                let src = m.column(c);
                let mut dst = out.column_mut(c);
                for ((&i, &j), &s) in pat.rows.iter().zip(&pat.cols).zip(vals) {
                    dst[i] += s * src[j];
                }
            }
        }
        for t in &self.low_rank {
            out += &t.left * t.right.tr_mul(m);
        }
        out
    }

    /// `Sᵀ M` for `M` of shape `rows×k`.
    pub fn tr_mul_mat(&self, m: &Mat) -> Mat {
        assert_eq!(m.nrows(), self.rows);
        let k = m.ncols();
        let mut out = match &self.dense {
            Some(d) => d.tr_mul(m),
            None => Mat::zeros(self.cols, k),
        };
        if let Some((pat, vals)) = &self.sparse {
            for c in 0..k {
                let src = m.column(c);
                let mut dst = out.column_mut(c);
                for ((&i, &j), &s) in pat.rows.iter().zip(&pat.cols).zip(vals) {
                    dst[j] += s * src[i];
                }
            }
        }
        for t in &self.low_rank {
            out += &t.right * t.left.tr_mul(m);
        }
        out
    }

    /// Dense copy; for tests and desk-scale problems only.
    pub fn to_dense(&self) -> Mat {
        self.mul_mat(&Mat::identity(self.cols, self.cols))
    }
}

impl LinearOperator for DualOperator {
    fn rows(&self) -> usize {
        self.rows
    }
    fn cols(&self) -> usize {
        self.cols
    }
    fn apply(&self, v: &Vector) -> Vector {
        let m = Mat::from_column_slice(v.len(), 1, v.as_slice());
        self.mul_mat(&m).column(0).into_owned()
    }
    fn apply_transpose(&self, u: &Vector) -> Vector {
        let m = Mat::from_column_slice(u.len(), 1, u.as_slice());
        self.tr_mul_mat(&m).column(0).into_owned()
    }
}

/// Terms of the duality gap that depend on the residual `R = 𝒜(X) − target`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapTerms {
    /// `s‖R‖²`, the data-fit part of the loss.
    pub residual_sq: f64,
    /// `s⟨R, target⟩`.
    pub cross: f64,
    /// `μ‖X‖²_F`.
    pub ridge_sq: f64,
}

/// Loss value and dual operator at a point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// `f(UBVᵀ)` without the trace-norm term.
    pub loss: f64,
    /// `S = ∇f(UBVᵀ)`.
    pub s: DualOperator,
    pub gap_terms: GapTerms,
}

/// Duality gap at `X` for the dual candidate `M = min(1, λ/σ₁)·Grad ψ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualityGap {
    pub primal: f64,
    /// `ψ*(M)` (plus the ridge conjugate when a ridge is present).
    pub conjugate: f64,
    pub gap: f64,
    /// `gap / |ψ*(M)|`.
    pub relative: f64,
    pub scale: f64,
}

/// Duality gap from the residual terms and `σ₁ = ‖S‖_op`.
pub fn duality_gap(terms: &GapTerms, trace_norm: f64, lambda: f64, sigma1: f64) -> DualityGap {
    let c = if sigma1 > lambda { lambda / sigma1 } else { 1.0 };
    let primal = terms.residual_sq + terms.ridge_sq + lambda * trace_norm;
    let conjugate = c * c * (terms.residual_sq + terms.ridge_sq) + 2.0 * c * terms.cross;
    let gap = primal + conjugate;
    let relative = if conjugate != 0.0 {
        gap / conjugate.abs()
    } else if gap.abs() <= GAP_SLACK {
        0.0
    } else {
        f64::INFINITY
    };
    DualityGap {
        primal,
        conjugate,
        gap,
        relative,
        scale: c,
    }
}

/// A smooth convex loss `f` on `n×m` matrices, evaluated on factored points.
pub trait ProblemModel: Send + Sync {
    fn shape(&self) -> (usize, usize);

    /// Loss, gradient operator `S` and gap terms at `x`.
    fn evaluate(&self, x: &FixedRankPoint) -> Result<Evaluation>;

    /// `S_* = D S[Z]`, the derivative of the gradient along `Z`.
    fn gradient_derivative(&self, x: &FixedRankPoint, z: &Triple) -> Result<DualOperator>;

    /// Lipschitz constant of `∇f` in the Frobenius norm.
    fn lipschitz_estimate(&self) -> f64;

    /// `‖∇f(0)‖_op`: the smallest `λ` for which `X = 0` is optimal.
    fn lambda_max(&self) -> Result<f64> {
        let (n, m) = self.shape();
        let x = FixedRankPoint::zero(n, m);
        let e = self.evaluate(&x)?;
        let (t, _) = linalg::dominant_singular_triplet_or_best(
            &e.s,
            tol::TRIPLET,
            linalg::default_max_iter(n, m),
        )?;
        Ok(t.sigma)
    }

    /// `f(UBVᵀ) + λ Trace(B)`.
    fn objective(&self, x: &FixedRankPoint, lambda: f64) -> Result<f64> {
        Ok(self.evaluate(x)?.loss + lambda * x.trace_b())
    }
}

/// `(SVB, UᵀSV, SᵀUB)`, the Euclidean gradient of `f(UBVᵀ)` in the factors.
pub fn grad_products(x: &FixedRankPoint, s: &DualOperator) -> Triple {
    let sv = s.mul_mat(x.v());
    let stu = s.tr_mul_mat(x.u());
    Triple {
        u: &sv * x.b(),
        b: x.u().tr_mul(&sv),
        v: stu * x.b(),
    }
}

/// Euclidean gradient of `φ̄ = f(UBVᵀ) + λ Trace(B)` in the factors.
pub fn euclidean_gradient(x: &FixedRankPoint, s: &DualOperator, lambda: f64) -> Triple {
    let mut g = grad_products(x, s);
    for i in 0..x.rank() {
        g.b[(i, i)] += lambda;
    }
    g
}

/// Directional derivative of [`grad_products`] along `Z`:
/// `(S_*VB + S Z_V B + S V Z_B, Z_UᵀSV + UᵀS_*V + UᵀS Z_V, S_*ᵀUB + SᵀZ_U B + SᵀU Z_B)`.
pub fn hess_products(
    model: &dyn ProblemModel,
    x: &FixedRankPoint,
    s: &DualOperator,
    z: &Triple,
) -> Result<Triple> {
    let s_star = model.gradient_derivative(x, z)?;
    let (u, b, v) = (x.u(), x.b(), x.v());
    let sv = s.mul_mat(v);
    let szv = s.mul_mat(&z.v);
    let sstar_v = s_star.mul_mat(v);
    let stu = s.tr_mul_mat(u);
    let stzu = s.tr_mul_mat(&z.u);
    let sstar_tu = s_star.tr_mul_mat(u);
    Ok(Triple {
        u: &sstar_v * b + &szv * b + &sv * &z.b,
        b: z.u.tr_mul(&sv) + u.tr_mul(&sstar_v) + u.tr_mul(&szv),
        v: &sstar_tu * b + &stzu * b + &stu * &z.b,
    })
}

/// Directional derivative of the Euclidean gradient along a tangent vector.
pub fn hess_products_tangent(
    model: &dyn ProblemModel,
    x: &FixedRankPoint,
    s: &DualOperator,
    z: &TangentVector,
) -> Result<Triple> {
    hess_products(model, x, s, &z.to_triple())
}

/// Row-wise storage helper: `Mᵀ` so that rows of `M` become contiguous.
fn transposed(m: &Mat) -> Mat {
    m.transpose()
}

/// `Σ_k A_ik C_jk` over the pattern, with `At = Aᵀ`, `Ct = Cᵀ`.
fn pattern_products(pat: &SparsePattern, at: &Mat, ct: &Mat) -> Vec<f64> {
    pat.rows
        .iter()
        .zip(&pat.cols)
        .map(|(&i, &j)| at.column(i).dot(&ct.column(j)))
        .collect()
}

/// Matrix completion: `f(X) = ‖W ⊙ (X̃ − X)‖²_F + μ‖X‖²_F`.
#[derive(Debug, Clone)]
pub struct MatrixCompletion {
    data: ObservedEntries,
    ridge: f64,
}

impl MatrixCompletion {
    pub fn new(data: ObservedEntries) -> Self {
        Self { data, ridge: 0.0 }
    }

    /// Adds `μ‖X‖²_F` to the loss.
    pub fn with_ridge(mut self, mu: f64) -> Result<Self> {
        if !(mu >= 0.0) {
            return Err(Error::Precondition("ridge must be nonnegative".into()));
        }
        self.ridge = mu;
        Ok(self)
    }

    pub fn data(&self) -> &ObservedEntries {
        &self.data
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// `UBVᵀ` evaluated on the observed pattern.
    pub fn predict_observed(&self, x: &FixedRankPoint) -> Vec<f64> {
        let ub_t = transposed(&(x.u() * x.b()));
        let v_t = transposed(x.v());
        pattern_products(&self.data.pattern, &ub_t, &v_t)
    }
}

impl ProblemModel for MatrixCompletion {
    fn shape(&self) -> (usize, usize) {
        self.data.shape()
    }

    fn evaluate(&self, x: &FixedRankPoint) -> Result<Evaluation> {
        if (x.rows(), x.cols()) != self.shape() {
            return Err(Error::Dimension("point does not match the data shape".into()));
        }
        let pred = self.predict_observed(x);
        let mut residual_sq = 0.0;
        let mut cross = 0.0;
        let mut svals = Vec::with_capacity(pred.len());
        for (p, &t) in pred.iter().zip(&self.data.values) {
            let r = p - t;
            residual_sq += r * r;
            cross += r * t;
            svals.push(2.0 * r);
        }
        let mut s = DualOperator::sparse(self.data.pattern.clone(), svals);
        let mut ridge_sq = 0.0;
        if self.ridge > 0.0 && x.rank() > 0 {
            ridge_sq = self.ridge * x.b().norm_squared();
            s = s.with_low_rank(x.u() * x.b() * (2.0 * self.ridge), x.v().clone());
        }
        Ok(Evaluation {
            loss: residual_sq + ridge_sq,
            s,
            gap_terms: GapTerms {
                residual_sq,
                cross,
                ridge_sq,
            },
        })
    }

    fn gradient_derivative(&self, x: &FixedRankPoint, z: &Triple) -> Result<DualOperator> {
        // Ẋ = (Z_U B + U Z_B) Vᵀ + (UB) Z_Vᵀ
        let left1 = &z.u * x.b() + x.u() * &z.b;
        let ub = x.u() * x.b();
        let l1t = transposed(&left1);
        let vt = transposed(x.v());
        let ubt = transposed(&ub);
        let zvt = transposed(&z.v);
        let pat = &self.data.pattern;
        let vals: Vec<f64> = pat
            .rows
            .iter()
            .zip(&pat.cols)
            .map(|(&i, &j)| 2.0 * (l1t.column(i).dot(&vt.column(j)) + ubt.column(i).dot(&zvt.column(j))))
            .collect();
        let mut op = DualOperator::sparse(pat.clone(), vals);
        if self.ridge > 0.0 && x.rank() > 0 {
            let c = 2.0 * self.ridge;
            op = op
                .with_low_rank(left1 * c, x.v().clone())
                .with_low_rank(ub * c, z.v.clone());
        }
        Ok(op)
    }

    fn lipschitz_estimate(&self) -> f64 {
        2.0 + 2.0 * self.ridge
    }
}

/// Inputs `X` (`n×q`) and responses `Y` (`n×k`) with cached `XᵀX`, `XᵀY`.
#[derive(Debug, Clone)]
pub struct RegressionData {
    x: Mat,
    y: Mat,
    gram: Mat,
    cross: Mat,
    scaled: bool,
}

impl RegressionData {
    pub fn new(x: Mat, y: Mat) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::Dimension(format!(
                "X has {} rows but Y has {}",
                x.nrows(),
                y.nrows()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Precondition("regression data must be finite".into()));
        }
        let gram = linalg::sym_unchecked(&x.tr_mul(&x));
        let cross = x.tr_mul(&y);
        Ok(Self {
            x,
            y,
            gram,
            cross,
            scaled: false,
        })
    }

    /// Enables the `1/(nk)` loss scaling.
    pub fn scaled(mut self, on: bool) -> Self {
        self.scaled = on;
        self
    }

    pub fn x(&self) -> &Mat {
        &self.x
    }
    pub fn y(&self) -> &Mat {
        &self.y
    }
    pub fn gram(&self) -> &Mat {
        &self.gram
    }
    pub fn cross(&self) -> &Mat {
        &self.cross
    }
    pub fn is_scaled(&self) -> bool {
        self.scaled
    }

    /// Loss scale `s`: `1/(nk)` when scaled, else 1.
    pub fn scale(&self) -> f64 {
        if self.scaled {
            1.0 / (self.y.nrows() * self.y.ncols()) as f64
        } else {
            1.0
        }
    }
}

/// Multivariate regression: `f(W) = s‖Y − XW‖²_F + μ‖W‖²_F`.
#[derive(Debug, Clone)]
pub struct MultivariateRegression {
    data: RegressionData,
    ridge: f64,
    gram_norm: f64,
}

impl MultivariateRegression {
    pub fn new(data: RegressionData) -> Result<Self> {
        let q = data.gram.nrows();
        let gram_norm = if q == 0 || data.gram.norm() == 0.0 {
            0.0
        } else {
            let (t, _) = linalg::dominant_singular_triplet_or_best(
                &data.gram,
                tol::TRIPLET,
                linalg::default_max_iter(q, q).max(1000),
            )?;
            t.sigma
        };
        Ok(Self {
            data,
            ridge: 0.0,
            gram_norm,
        })
    }

    pub fn with_ridge(mut self, mu: f64) -> Result<Self> {
        if !(mu >= 0.0) {
            return Err(Error::Precondition("ridge must be nonnegative".into()));
        }
        self.ridge = mu;
        Ok(self)
    }

    pub fn data(&self) -> &RegressionData {
        &self.data
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// `X_new (UBVᵀ)` without forming `W`.
    pub fn predict(&self, x_new: &Mat, w: &FixedRankPoint) -> Mat {
        (x_new * w.u()) * (w.b() * w.v().transpose())
    }
}

impl ProblemModel for MultivariateRegression {
    fn shape(&self) -> (usize, usize) {
        (self.data.x.ncols(), self.data.y.ncols())
    }

    fn evaluate(&self, w: &FixedRankPoint) -> Result<Evaluation> {
        if (w.rows(), w.cols()) != self.shape() {
            return Err(Error::Dimension("point does not match the coefficient shape".into()));
        }
        let s = self.data.scale();
        let r = self.predict(&self.data.x, w) - &self.data.y;
        let residual_sq = s * r.norm_squared();
        let cross = s * r.dot(&self.data.y);
        let ridge_sq = self.ridge * w.b().norm_squared();

        // S = 2s(XᵀX W − XᵀY) + 2μW
        let gu = &self.data.gram * w.u();
        let bvt = w.b() * w.v().transpose();
        let mut sm = (gu * &bvt - &self.data.cross) * (2.0 * s);
        if self.ridge > 0.0 && w.rank() > 0 {
            sm += w.u() * &bvt * (2.0 * self.ridge);
        }
        Ok(Evaluation {
            loss: residual_sq + ridge_sq,
            s: DualOperator::dense(sm),
            gap_terms: GapTerms {
                residual_sq,
                cross,
                ridge_sq,
            },
        })
    }

    fn gradient_derivative(&self, w: &FixedRankPoint, z: &Triple) -> Result<DualOperator> {
        // Ẇ = [Z_U B + U Z_B, UB] [V, Z_V]ᵀ, S_* = (2s XᵀX + 2μ I) Ẇ
        let p = w.rank();
        let (q, k) = self.shape();
        let mut left = Mat::zeros(q, 2 * p);
        left.columns_mut(0, p).copy_from(&(&z.u * w.b() + w.u() * &z.b));
        left.columns_mut(p, p).copy_from(&(w.u() * w.b()));
        let mut right = Mat::zeros(k, 2 * p);
        right.columns_mut(0, p).copy_from(w.v());
        right.columns_mut(p, p).copy_from(&z.v);
        let mut l = &self.data.gram * &left * (2.0 * self.data.scale());
        if self.ridge > 0.0 {
            l += left * (2.0 * self.ridge);
        }
        Ok(DualOperator::zero(q, k).with_low_rank(l, right))
    }

    fn lipschitz_estimate(&self) -> f64 {
        2.0 * self.data.scale() * self.gram_norm + 2.0 * self.ridge
    }
}

/// Test rmse `sqrt(‖Y − XW‖²_F / (n k))`.
pub fn rmse(model: &MultivariateRegression, x: &Mat, y: &Mat, w: &FixedRankPoint) -> f64 {
    let r = model.predict(x, w) - y;
    (r.norm_squared() / (y.nrows() * y.ncols()).max(1) as f64).sqrt()
}
