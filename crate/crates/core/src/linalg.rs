//! Dense and structured matrix kernels.
//!
//! Everything here works on `nalgebra` dense matrices. The operations that
//! matter for the manifold code are the polar factor, functions of SPD
//! matrices through their eigendecomposition, the skew Lyapunov solve used by
//! the horizontal projection, and a power iteration for the dominant singular
//! triplet of an abstract operator.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Centralized numerical tolerances.
pub mod tol {
    /// Symmetry tolerance (relative to `max(1, ‖A‖_F)`).
    pub const SYM: f64 = 1e-10;
    /// Orthonormality tolerance on `‖QᵀQ − I‖_F`.
    pub const ORTH: f64 = 1e-10;
    /// Relative residual of the skew Lyapunov solve.
    pub const LYAP: f64 = 1e-12;
    /// Rank threshold relative to the largest singular value.
    pub const RANK: f64 = 1e-12;
    /// Default relative residual for the dominant singular triplet.
    pub const TRIPLET: f64 = 1e-10;
}

/// Seed of the deterministic start vector used by the power iteration.
const POWER_SEED: u64 = 0x5eed_0f_d0_u64;

fn check_square(a: &Mat, what: &str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension(format!(
            "{what}: expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

/// `(A + Aᵀ)/2`.
pub fn sym(a: &Mat) -> Result<Mat> {
    check_square(a, "sym")?;
    Ok(sym_unchecked(a))
}

/// `(A − Aᵀ)/2`.
pub fn skew(a: &Mat) -> Result<Mat> {
    check_square(a, "skew")?;
    Ok(skew_unchecked(a))
}

#[inline]
pub(crate) fn sym_unchecked(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

#[inline]
pub(crate) fn skew_unchecked(a: &Mat) -> Mat {
    (a - a.transpose()) * 0.5
}

/// `‖A + Aᵀ‖_F`, zero for skew matrices.
pub fn skew_defect(a: &Mat) -> f64 {
    (a + a.transpose()).norm()
}

/// `‖A − Aᵀ‖_F`, zero for symmetric matrices.
pub fn sym_defect(a: &Mat) -> f64 {
    (a - a.transpose()).norm()
}

/// `‖QᵀQ − I‖_F`.
pub fn orthonormality_defect(q: &Mat) -> f64 {
    let p = q.ncols();
    (q.transpose() * q - Mat::identity(p, p)).norm()
}

/// Symmetric eigendecomposition `A = Q diag(λ) Qᵀ`.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub vectors: Mat,
    pub values: Vector,
}

impl SymEigen {
    pub fn new(a: &Mat) -> Result<Self> {
        check_square(a, "eigendecomposition")?;
        if a.nrows() == 0 {
            return Ok(Self {
                vectors: Mat::zeros(0, 0),
                values: Vector::zeros(0),
            });
        }
        let s = sym_unchecked(a);
        let eig = SymmetricEigen::try_new(s, f64::EPSILON, 0)
            .ok_or_else(|| Error::Numerical("symmetric eigendecomposition failed".into()))?;
        Ok(Self {
            vectors: eig.eigenvectors,
            values: eig.eigenvalues,
        })
    }

    /// `Q diag(f(λ)) Qᵀ`.
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> Mat {
        let mut scaled = self.vectors.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= f(self.values[j]);
        }
        let out = scaled * self.vectors.transpose();
        sym_unchecked(&out)
    }
}

/// Apply a scalar function to a symmetric matrix through its spectrum.
pub fn sym_apply_function(a: &Mat, f: impl Fn(f64) -> f64) -> Result<Mat> {
    Ok(SymEigen::new(a)?.apply(f))
}

/// A symmetric positive definite matrix.
///
/// Construction symmetrizes the input and checks positivity with a Cholesky
/// factorization attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(Mat);

impl SpdMatrix {
    pub fn new(a: Mat) -> Result<Self> {
        check_square(&a, "SpdMatrix")?;
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotSpd);
        }
        if sym_defect(&a) > tol::SYM * a.norm().max(1.0) {
            return Err(Error::Precondition("matrix is not symmetric".into()));
        }
        let s = sym_unchecked(&a);
        if s.nrows() > 0 && Cholesky::new(s.clone()).is_none() {
            return Err(Error::NotSpd);
        }
        Ok(Self(s))
    }

    pub fn identity(p: usize) -> Self {
        Self(Mat::identity(p, p))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_inner(self) -> Mat {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }
}

impl AsRef<Mat> for SpdMatrix {
    fn as_ref(&self) -> &Mat {
        &self.0
    }
}

/// `Q fn(Λ) Qᵀ` for `B = Q Λ Qᵀ`.
pub fn spd_apply_function(b: &SpdMatrix, f: impl Fn(f64) -> f64) -> Result<Mat> {
    sym_apply_function(b.as_mat(), f)
}

/// Orthonormal factor of the polar decomposition, `A (AᵀA)^{-1/2}`.
pub fn polar_orthonormal_factor(a: &Mat) -> Result<Mat> {
    let p = a.ncols();
    if p > a.nrows() {
        return Err(Error::Dimension(format!(
            "polar factor needs rows >= cols, got {}x{}",
            a.nrows(),
            p
        )));
    }
    if p == 0 {
        return Ok(a.clone());
    }
    let gram = a.transpose() * a;
    let eig = SymEigen::new(&gram)?;
    let lam_max = eig.values.max();
    let lam_min = eig.values.min();
    if !(lam_max > 0.0) || lam_min <= (tol::RANK * tol::RANK) * lam_max {
        return Err(Error::Singular(format!(
            "polar factor of rank-deficient matrix (sigma_min^2 = {lam_min:e}, sigma_max^2 = {lam_max:e})"
        )));
    }
    let inv_sqrt = eig.apply(|l| 1.0 / l.sqrt());
    Ok(a * inv_sqrt)
}

/// Solve `Ω B² + B² Ω = C` for skew `C`, given the eigendecomposition of `B`.
///
/// In the eigenbasis of `B` the equation decouples entrywise:
/// `Ω̃_ij = C̃_ij / (d_i² + d_j²)`.
pub fn solve_skew_lyapunov_eig(b_eig: &SymEigen, c: &Mat) -> Result<Mat> {
    let p = b_eig.values.len();
    if c.nrows() != p || c.ncols() != p {
        return Err(Error::Dimension(format!(
            "Lyapunov: B is {p}x{p} but C is {}x{}",
            c.nrows(),
            c.ncols()
        )));
    }
    if skew_defect(c) > tol::SYM * c.norm().max(1.0) {
        return Err(Error::Precondition(
            "Lyapunov right-hand side is not skew-symmetric".into(),
        ));
    }
    let q = &b_eig.vectors;
    let mut ct = q.transpose() * c * q;
    for j in 0..p {
        for i in 0..p {
            let di = b_eig.values[i];
            let dj = b_eig.values[j];
            ct[(i, j)] /= di * di + dj * dj;
        }
    }
    let omega = q * ct * q.transpose();
    Ok(skew_unchecked(&omega))
}

/// Solve `Ω B² + B² Ω = C` for skew `C` and SPD `B`.
pub fn solve_skew_lyapunov(b: &SpdMatrix, c: &Mat) -> Result<Mat> {
    solve_skew_lyapunov_eig(&SymEigen::new(b.as_mat())?, c)
}

/// A matrix accessed only through products with vectors.
pub trait LinearOperator {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn apply(&self, v: &Vector) -> Vector;
    fn apply_transpose(&self, u: &Vector) -> Vector;
}

impl LinearOperator for Mat {
    fn rows(&self) -> usize {
        self.nrows()
    }
    fn cols(&self) -> usize {
        self.ncols()
    }
    fn apply(&self, v: &Vector) -> Vector {
        self * v
    }
    fn apply_transpose(&self, u: &Vector) -> Vector {
        self.tr_mul(u)
    }
}

/// `(σ, u, v)` with `S v = σ u` and `Sᵀ u = σ v`.
#[derive(Debug, Clone)]
pub struct SingularTriplet {
    pub sigma: f64,
    pub u: Vector,
    pub v: Vector,
}

/// Default power-iteration budget, `10·max(rows, cols)`.
pub fn default_max_iter(rows: usize, cols: usize) -> usize {
    10 * rows.max(cols).max(1)
}

/// Dominant singular triplet by power iteration on `SᵀS`.
///
/// Stops once `‖Sᵀu − σv‖ ≤ tol·σ` (the other residual `‖Sv − σu‖` is zero by
/// construction). The start vector is drawn from a fixed seed so results are
/// reproducible.
pub fn dominant_singular_triplet(
    op: &dyn LinearOperator,
    tol: f64,
    max_iter: usize,
) -> Result<SingularTriplet> {
    let (rows, cols) = (op.rows(), op.cols());
    if rows == 0 || cols == 0 {
        return Err(Error::Dimension("empty operator".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut v = Vector::from_fn(cols, |_, _| StandardNormal.sample(&mut rng));
    v /= v.norm();

    let mut best: Option<(f64, SingularTriplet)> = None;
    for it in 0..max_iter.max(1) {
        let w = op.apply(&v);
        let sigma = w.norm();
        if sigma == 0.0 || !sigma.is_finite() {
            if sigma == 0.0 && it == 0 {
                // Either S = 0 or the start vector is in the null space; retry
                // once from a basis vector before declaring the operator zero.
                let mut e = Vector::zeros(cols);
                e[it % cols] = 1.0;
                if op.apply(&e).norm() == 0.0 && op.apply_transpose(&first_basis(rows)).norm() == 0.0 {
                    return Ok(SingularTriplet {
                        sigma: 0.0,
                        u: first_basis(rows),
                        v,
                    });
                }
                v = Vector::from_fn(cols, |i, _| 1.0 + i as f64);
                v /= v.norm();
                continue;
            }
            return Err(Error::Numerical(format!(
                "power iteration produced sigma = {sigma}"
            )));
        }
        let u = w / sigma;
        let z = op.apply_transpose(&u);
        let residual = (&z - &v * sigma).norm();
        let candidate = SingularTriplet {
            sigma,
            u,
            v: v.clone(),
        };
        if residual <= tol * sigma {
            return Ok(candidate);
        }
        let rel = residual / sigma;
        if best.as_ref().map_or(true, |(r, _)| rel < *r) {
            best = Some((rel, candidate));
        }
        let zn = z.norm();
        if zn == 0.0 {
            break;
        }
        v = z / zn;
    }
    let (residual, best) = best.expect("at least one iteration ran");
    Err(Error::Convergence {
        iterations: max_iter,
        residual,
        best: Box::new(best),
    })
}

/// Like [`dominant_singular_triplet`], but on non-convergence returns the best
/// iterate instead of an error. The returned flag is `true` when converged.
pub fn dominant_singular_triplet_or_best(
    op: &dyn LinearOperator,
    tol: f64,
    max_iter: usize,
) -> Result<(SingularTriplet, bool)> {
    match dominant_singular_triplet(op, tol, max_iter) {
        Ok(t) => Ok((t, true)),
        Err(Error::Convergence {
            best, residual, ..
        }) => {
            log::debug!("dominant triplet not converged, relative residual {residual:e}");
            Ok((*best, false))
        }
        Err(e) => Err(e),
    }
}

fn first_basis(n: usize) -> Vector {
    let mut e = Vector::zeros(n);
    e[0] = 1.0;
    e
}

/// SVD `K = P diag(σ) Qᵀ` with nonincreasing singular values.
#[derive(Debug, Clone)]
pub struct Svd {
    pub left: Mat,
    pub sigma: Vector,
    pub right: Mat,
}

impl Svd {
    pub fn reconstruct(&self) -> Mat {
        let mut ls = self.left.clone();
        for (j, mut col) in ls.column_iter_mut().enumerate() {
            col *= self.sigma[j];
        }
        ls * self.right.transpose()
    }
}

/// Thin SVD with singular values sorted in nonincreasing order and the sign of
/// each left singular vector fixed so its first nonzero entry is nonnegative.
pub fn svd_sorted(a: &Mat) -> Result<Svd> {
    let (n, m) = a.shape();
    let k = n.min(m);
    if k == 0 {
        return Ok(Svd {
            left: Mat::zeros(n, 0),
            sigma: Vector::zeros(0),
            right: Mat::zeros(m, 0),
        });
    }
    // nalgebra's bidiagonal SVD returns wrong factors for a few percent of
    // rank-deficient inputs; faer's does not.
    let fa = faer::Mat::<f64>::from_fn(n, m, |i, j| a[(i, j)]);
    let svd = fa
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("SVD failed to converge: {e:?}")))?;
    let (fu, fs, fv) = (svd.U(), svd.S().column_vector(), svd.V());
    let u = Mat::from_fn(n, k, |i, j| fu[(i, j)]);
    let vt = Mat::from_fn(k, m, |i, j| fv[(j, i)]);
    let singular_values = Vector::from_fn(k, |i, _| fs[i]);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| singular_values[j].total_cmp(&singular_values[i]));

    let mut left = Mat::zeros(n, k);
    let mut right = Mat::zeros(m, k);
    let mut sigma = Vector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        let mut lc = u.column(src).into_owned();
        let mut rc = vt.row(src).transpose();
        let lead = lc.iter().copied().find(|x| x.abs() > 1e-300).unwrap_or(0.0);
        if lead < 0.0 {
            lc.neg_mut();
            rc.neg_mut();
        }
        left.set_column(dst, &lc);
        right.set_column(dst, &rc);
        sigma[dst] = singular_values[src];
    }
    Ok(Svd { left, sigma, right })
}

/// SVD of the small `(p+1)×(p+1)` core matrix formed during a rank increment.
pub fn small_svd(k: &Mat) -> Result<Svd> {
    check_square(k, "small_svd")?;
    svd_sorted(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::*;

    mod approx_eq {
        pub fn close(a: f64, b: f64, tol: f64) -> bool {
            (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
        }
    }

    fn rand_mat(n: usize, m: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(n, m, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn sym_and_skew_examples() {
        let i3 = Mat::identity(3, 3);
        assert_eq!(sym(&i3).unwrap(), i3);
        let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(sym(&a).unwrap(), Mat::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0]));
        assert_eq!(skew(&a).unwrap(), Mat::from_row_slice(2, 2, &[0.0, 0.5, -0.5, 0.0]));
        assert_eq!(skew(&i3).unwrap(), Mat::zeros(3, 3));

        let r = rand_mat(4, 4, 1);
        assert!((sym(&r).unwrap() + skew(&r).unwrap() - &r).norm() < 1e-15);
        let s = skew(&r).unwrap();
        assert_eq!(skew(&s).unwrap(), s);
    }

    #[test]
    fn non_square_is_dimension_error() {
        let a = Mat::zeros(2, 3);
        assert!(matches!(sym(&a), Err(Error::Dimension(_))));
        assert!(matches!(skew(&a), Err(Error::Dimension(_))));
    }

    #[test]
    fn polar_factor_examples() {
        let q = svd_sorted(&rand_mat(5, 3, 2)).unwrap().left;
        assert!((polar_orthonormal_factor(&q).unwrap() - &q).norm() < 1e-12);

        let mut a = Mat::zeros(4, 3);
        for i in 0..3 {
            a[(i, i)] = 2.0;
        }
        let mut expect = Mat::zeros(4, 3);
        for i in 0..3 {
            expect[(i, i)] = 1.0;
        }
        assert!((polar_orthonormal_factor(&a).unwrap() - expect).norm() < 1e-14);

        // Against the SVD construction U Vᵀ.
        let a = rand_mat(6, 2, 3);
        let svd = svd_sorted(&a).unwrap();
        let oracle = &svd.left * svd.right.transpose();
        let q = polar_orthonormal_factor(&a).unwrap();
        assert!((q - oracle).norm() < 1e-12);
    }

    #[test]
    fn polar_factor_rejects_rank_deficient() {
        let mut a = rand_mat(5, 2, 4);
        let c0 = a.column(0).into_owned();
        a.set_column(1, &(c0 * 3.0));
        assert!(matches!(polar_orthonormal_factor(&a), Err(Error::Singular(_))));
    }

    #[test]
    fn spd_functions() {
        let z = SpdMatrix::identity(3);
        let e = spd_apply_function(&z, |x| (x - 1.0).exp()).unwrap();
        assert!((e - Mat::identity(3, 3)).norm() < 1e-15);
        let d = SpdMatrix::new(Mat::from_diagonal(&Vector::from_vec(vec![4.0, 9.0]))).unwrap();
        let r = spd_apply_function(&d, f64::sqrt).unwrap();
        assert!((r - Mat::from_diagonal(&Vector::from_vec(vec![2.0, 3.0]))).norm() < 1e-14);

        let exp0 = sym_apply_function(&Mat::zeros(3, 3), f64::exp).unwrap();
        assert!((exp0 - Mat::identity(3, 3)).norm() < 1e-15);
    }

    #[test]
    fn spd_rejects_indefinite_and_asymmetric() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(SpdMatrix::new(a), Err(Error::NotSpd)));
        let b = Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(SpdMatrix::new(b), Err(Error::Precondition(_))));
    }

    #[test]
    fn lyapunov_examples() {
        let b = SpdMatrix::identity(3);
        assert_eq!(solve_skew_lyapunov(&b, &Mat::zeros(3, 3)).unwrap(), Mat::zeros(3, 3));

        let c = skew_unchecked(&rand_mat(3, 3, 5));
        let om = solve_skew_lyapunov(&b, &c).unwrap();
        assert!((om - &c * 0.5).norm() < 1e-15);

        // B = diag(1,2): d1² + d2² = 5.
        let b = SpdMatrix::new(Mat::from_diagonal(&Vector::from_vec(vec![1.0, 2.0]))).unwrap();
        let c = Mat::from_row_slice(2, 2, &[0.0, 1.7, -1.7, 0.0]);
        let om = solve_skew_lyapunov(&b, &c).unwrap();
        let expect = Mat::from_row_slice(2, 2, &[0.0, 1.7 / 5.0, -1.7 / 5.0, 0.0]);
        assert!((om - expect).norm() < 1e-15);
    }

    #[test]
    fn lyapunov_rejects_non_skew() {
        let b = SpdMatrix::identity(2);
        assert!(matches!(
            solve_skew_lyapunov(&b, &Mat::identity(2, 2)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn dominant_triplet_examples() {
        let d = Mat::from_diagonal(&Vector::from_vec(vec![3.0, 1.0]));
        let t = dominant_singular_triplet(&d, 1e-12, 1000).unwrap();
        assert!(close(t.sigma, 3.0, 1e-12));
        assert!(close(t.u[0].abs(), 1.0, 1e-10) && close(t.v[0].abs(), 1.0, 1e-10));

        let a = Vector::from_vec(vec![1.0, 2.0, 2.0]);
        let b = Vector::from_vec(vec![3.0, 4.0]);
        let r1 = &a * b.transpose();
        let t = dominant_singular_triplet(&r1, 1e-12, 100).unwrap();
        assert!(close(t.sigma, 15.0, 1e-12));
        assert!((t.u.abs() - a.abs() / 3.0).norm() < 1e-10);
        assert!((t.v.abs() - b.abs() / 5.0).norm() < 1e-10);

        let m = rand_mat(5, 4, 6);
        let t = dominant_singular_triplet(&m, 1e-12, 10_000).unwrap();
        let s = svd_sorted(&m).unwrap();
        assert!((t.sigma - s.sigma[0]).abs() <= 1e-8 * s.sigma[0]);
        assert!((&m * &t.v - &t.u * t.sigma).norm() <= 1e-10 * t.sigma);
    }

    #[test]
    fn dominant_triplet_zero_operator() {
        let t = dominant_singular_triplet(&Mat::zeros(3, 2), 1e-10, 10).unwrap();
        assert_eq!(t.sigma, 0.0);
    }

    #[test]
    fn dominant_triplet_reports_best_iterate() {
        // Nearly degenerate top pair: converges slowly.
        let d = Mat::from_diagonal(&Vector::from_vec(vec![1.0, 0.999_999, 0.5]));
        match dominant_singular_triplet(&d, 1e-15, 3) {
            Err(Error::Convergence { best, .. }) => assert!(best.sigma > 0.9),
            other => panic!("expected convergence error, got {other:?}"),
        }
    }

    #[test]
    fn small_svd_examples() {
        let s = small_svd(&Mat::identity(3, 3)).unwrap();
        assert!((s.sigma.clone() - Vector::from_element(3, 1.0)).norm() < 1e-15);
        let s = small_svd(&Mat::from_diagonal(&Vector::from_vec(vec![1.0, 2.0]))).unwrap();
        assert_eq!(s.sigma.as_slice(), &[2.0, 1.0]);
        let k = rand_mat(4, 4, 7);
        let s = small_svd(&k).unwrap();
        assert!((s.reconstruct() - &k).norm() <= 1e-12 * k.norm());
        assert!(orthonormality_defect(&s.left) < 1e-12);
        assert!(orthonormality_defect(&s.right) < 1e-12);
        for w in s.sigma.as_slice().windows(2) {
            assert!(w[0] >= w[1]);
        }
        for j in 0..4 {
            let lead = s.left.column(j).iter().copied().find(|x| x.abs() > 1e-300).unwrap();
            assert!(lead >= 0.0);
        }
    }

    #[test]
    fn adjoint_consistency_dense() {
        let a = rand_mat(7, 5, 8);
        let norm = a.norm();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let u = Vector::from_fn(5, |_, _| StandardNormal.sample(&mut rng));
            let v = Vector::from_fn(7, |_, _| StandardNormal.sample(&mut rng));
            let lhs = a.apply(&u).dot(&v);
            let rhs = u.dot(&a.apply_transpose(&v));
            assert!((lhs - rhs).abs() <= 1e-10 * u.norm() * v.norm() * norm);
        }
    }
}
