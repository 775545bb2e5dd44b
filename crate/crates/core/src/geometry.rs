//! Geometry of the quotient `(St(p,n) × S++(p) × St(p,m)) / O(p)`.
//!
//! A point `(U, B, V)` represents `X = U B Vᵀ`. Tangent vectors live in the
//! total space; the horizontal space (metric complement of the `O(p)` orbit
//! directions) is the canonical representation of quotient tangent vectors.
//! No operation here forms an `n×m` matrix.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::linalg::{
    orthonormality_defect, polar_orthonormal_factor, solve_skew_lyapunov_eig, sym_unchecked,
    skew_unchecked, tol, Mat, SpdMatrix, SymEigen,
};

static NEXT_POINT_ID: AtomicU64 = AtomicU64::new(1);

/// Relative tolerance for accepting a triple as tangent.
const TANGENT_TOL: f64 = 1e-8;

/// `(U, B, V)` with orthonormal `U`, `V` and SPD `B`.
///
/// Spectral data of `B` (`B⁻¹`, `B^{±1/2}`) is computed once at construction.
/// The point is immutable; clones share the same identity.
#[derive(Debug, Clone)]
pub struct FixedRankPoint {
    u: Mat,
    b: SpdMatrix,
    v: Mat,
    b_eig: SymEigen,
    b_inv: Mat,
    b_sqrt: Mat,
    b_isqrt: Mat,
    id: u64,
}

impl FixedRankPoint {
    pub fn new(u: Mat, b: Mat, v: Mat) -> Result<Self> {
        let p = b.nrows();
        if u.ncols() != p || v.ncols() != p || b.ncols() != p {
            return Err(Error::Dimension(format!(
                "point factors disagree on rank: U {}x{}, B {}x{}, V {}x{}",
                u.nrows(),
                u.ncols(),
                b.nrows(),
                b.ncols(),
                v.nrows(),
                v.ncols()
            )));
        }
        if p > u.nrows() || p > v.nrows() {
            return Err(Error::Dimension(format!(
                "rank {p} exceeds matrix dimensions {}x{}",
                u.nrows(),
                v.nrows()
            )));
        }
        if orthonormality_defect(&u) > tol::ORTH {
            return Err(Error::Precondition("U is not orthonormal".into()));
        }
        if orthonormality_defect(&v) > tol::ORTH {
            return Err(Error::Precondition("V is not orthonormal".into()));
        }
        let b = SpdMatrix::new(b)?;
        Self::from_parts(u, b, v)
    }

    fn from_parts(u: Mat, b: SpdMatrix, v: Mat) -> Result<Self> {
        let b_eig = SymEigen::new(b.as_mat())?;
        if b_eig.values.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::NotSpd);
        }
        let b_inv = b_eig.apply(|l| 1.0 / l);
        let b_sqrt = b_eig.apply(f64::sqrt);
        let b_isqrt = b_eig.apply(|l| 1.0 / l.sqrt());
        Ok(Self {
            u,
            b,
            v,
            b_eig,
            b_inv,
            b_sqrt,
            b_isqrt,
            id: NEXT_POINT_ID.fetch_add(1, Ordering::Relaxed),
        })
    }

    /// The rank-0 point representing `X = 0`.
    pub fn zero(n: usize, m: usize) -> Self {
        Self::from_parts(Mat::zeros(n, 0), SpdMatrix::identity(0), Mat::zeros(m, 0))
            .expect("empty point is valid")
    }

    pub fn u(&self) -> &Mat {
        &self.u
    }
    pub fn b(&self) -> &Mat {
        self.b.as_mat()
    }
    pub fn b_spd(&self) -> &SpdMatrix {
        &self.b
    }
    pub fn v(&self) -> &Mat {
        &self.v
    }
    pub fn b_inv(&self) -> &Mat {
        &self.b_inv
    }
    pub fn b_sqrt(&self) -> &Mat {
        &self.b_sqrt
    }
    pub fn b_inv_sqrt(&self) -> &Mat {
        &self.b_isqrt
    }
    pub fn b_eigen(&self) -> &SymEigen {
        &self.b_eig
    }
    pub fn rank(&self) -> usize {
        self.b.dim()
    }
    pub fn rows(&self) -> usize {
        self.u.nrows()
    }
    pub fn cols(&self) -> usize {
        self.v.nrows()
    }
    pub fn id(&self) -> u64 {
        self.id
    }

    /// `‖X‖_* = Trace(B)`.
    pub fn trace_b(&self) -> f64 {
        self.b.trace()
    }

    /// Dense `U B Vᵀ`. Only for small problems and tests.
    pub fn to_dense(&self) -> Mat {
        &self.u * self.b.as_mat() * self.v.transpose()
    }

    /// Eigenvalues of `B`, which are the singular values of `X`.
    pub fn singular_values(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.b_eig.values.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    /// Number of singular values above `rel·σ_max`.
    pub fn numerical_rank(&self, rel: f64) -> usize {
        let s = self.singular_values();
        match s.first() {
            Some(&smax) if smax > 0.0 => s.iter().filter(|&&x| x > rel * smax).count(),
            _ => 0,
        }
    }

    /// `(U O, Oᵀ B O, V O)`, another representative of the same class.
    pub fn rotated(&self, o: &Mat) -> Result<Self> {
        let p = self.rank();
        if o.shape() != (p, p) || orthonormality_defect(o) > tol::ORTH {
            return Err(Error::Precondition("rotation must be a p×p orthogonal matrix".into()));
        }
        let b = sym_unchecked(&(o.transpose() * self.b.as_mat() * o));
        Self::from_parts(&self.u * o, SpdMatrix::new(b)?, &self.v * o)
    }
}

/// A triple `(Z_U, Z_B, Z_V)` in the ambient space of the total space.
#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    pub u: Mat,
    pub b: Mat,
    pub v: Mat,
}

impl Triple {
    pub fn zeros(n: usize, m: usize, p: usize) -> Self {
        Self {
            u: Mat::zeros(n, p),
            b: Mat::zeros(p, p),
            v: Mat::zeros(m, p),
        }
    }

    pub fn zeros_at(x: &FixedRankPoint) -> Self {
        Self::zeros(x.rows(), x.cols(), x.rank())
    }

    fn check_shape(&self, x: &FixedRankPoint) -> Result<()> {
        let p = x.rank();
        if self.u.shape() != (x.rows(), p) || self.b.shape() != (p, p) || self.v.shape() != (x.cols(), p) {
            return Err(Error::Dimension(format!(
                "triple of shapes {:?}/{:?}/{:?} does not match point ({}x{}, rank {p})",
                self.u.shape(),
                self.b.shape(),
                self.v.shape(),
                x.rows(),
                x.cols()
            )));
        }
        Ok(())
    }

    pub fn norm_euclidean(&self) -> f64 {
        (self.u.norm_squared() + self.b.norm_squared() + self.v.norm_squared()).sqrt()
    }
}

/// A tangent vector of the total space at a specific point.
#[derive(Debug, Clone)]
pub struct TangentVector {
    u: Mat,
    b: Mat,
    v: Mat,
    horizontal: bool,
    base: u64,
}

impl TangentVector {
    pub fn zero(x: &FixedRankPoint) -> Self {
        let t = Triple::zeros_at(x);
        Self {
            u: t.u,
            b: t.b,
            v: t.v,
            horizontal: true,
            base: x.id(),
        }
    }

    pub fn u(&self) -> &Mat {
        &self.u
    }
    pub fn b(&self) -> &Mat {
        &self.b
    }
    pub fn v(&self) -> &Mat {
        &self.v
    }
    pub fn is_horizontal(&self) -> bool {
        self.horizontal
    }
    pub fn base_id(&self) -> u64 {
        self.base
    }
    pub fn is_based_at(&self, x: &FixedRankPoint) -> bool {
        self.base == x.id()
    }

    pub fn to_triple(&self) -> Triple {
        Triple {
            u: self.u.clone(),
            b: self.b.clone(),
            v: self.v.clone(),
        }
    }

    fn same_base(&self, other: &Self) {
        debug_assert_eq!(self.base, other.base, "tangent vectors at different points");
    }

    pub fn scale(&self, a: f64) -> Self {
        Self {
            u: &self.u * a,
            b: &self.b * a,
            v: &self.v * a,
            horizontal: self.horizontal,
            base: self.base,
        }
    }

    /// `self += a·other`.
    pub fn axpy(&mut self, a: f64, other: &Self) {
        self.same_base(other);
        self.u += &other.u * a;
        self.b += &other.b * a;
        self.v += &other.v * a;
        self.horizontal &= other.horizontal;
    }

    /// `a·self + b·other`.
    pub fn lincomb(a: f64, x: &Self, b: f64, y: &Self) -> Self {
        let mut out = x.scale(a);
        out.axpy(b, y);
        out
    }

    /// Plain Euclidean norm of the stacked components.
    pub fn norm_euclidean(&self) -> f64 {
        (self.u.norm_squared() + self.b.norm_squared() + self.v.norm_squared()).sqrt()
    }
}

fn check_base(x: &FixedRankPoint, t: &TangentVector) -> Result<()> {
    if !t.is_based_at(x) {
        return Err(Error::Precondition("tangent vector is not based at this point".into()));
    }
    Ok(())
}

/// `Tr(ξ_Uᵀη_U) + Tr(B⁻¹ξ_B B⁻¹η_B) + Tr(ξ_Vᵀη_V)`.
pub fn metric_inner(x: &FixedRankPoint, xi: &TangentVector, eta: &TangentVector) -> Result<f64> {
    check_base(x, xi)?;
    check_base(x, eta)?;
    Ok(inner(x, xi, eta))
}

/// [`metric_inner`] without the base check, for inner loops.
pub(crate) fn inner(x: &FixedRankPoint, xi: &TangentVector, eta: &TangentVector) -> f64 {
    let binv = x.b_inv();
    let lhs = binv * &xi.b;
    let rhs = binv * &eta.b;
    xi.u.dot(&eta.u) + lhs.transpose().dot(&rhs) + xi.v.dot(&eta.v)
}

/// Norm induced by the metric.
pub fn metric_norm(x: &FixedRankPoint, xi: &TangentVector) -> f64 {
    inner(x, xi, xi).max(0.0).sqrt()
}

/// `Ψ(Z) = (Z_U − U Sym(UᵀZ_U), Sym(Z_B), Z_V − V Sym(VᵀZ_V))`.
pub fn project_to_tangent(x: &FixedRankPoint, z: &Triple) -> Result<TangentVector> {
    z.check_shape(x)?;
    Ok(project_unchecked(x, z))
}

fn stiefel_project(q: &Mat, z: &Mat) -> Mat {
    z - q * sym_unchecked(&q.tr_mul(z))
}

fn project_unchecked(x: &FixedRankPoint, z: &Triple) -> TangentVector {
    TangentVector {
        u: stiefel_project(x.u(), &z.u),
        b: sym_unchecked(&z.b),
        v: stiefel_project(x.v(), &z.v),
        horizontal: false,
        base: x.id(),
    }
}

/// Distance of a triple from the tangent space, relative to its size.
pub fn tangent_defect(x: &FixedRankPoint, z: &Triple) -> f64 {
    let a = sym_unchecked(&x.u().tr_mul(&z.u)).norm();
    let c = sym_unchecked(&x.v().tr_mul(&z.v)).norm();
    let d = skew_unchecked(&z.b).norm();
    (a + c + d) / z.norm_euclidean().max(1.0)
}

/// Right-hand side of the Lyapunov equation whose solution `Ω` gives the
/// vertical component of `η`.
fn lyapunov_rhs(x: &FixedRankPoint, eta: &TangentVector) -> Mat {
    let b = x.b();
    let inner = skew_unchecked(&x.u().tr_mul(&eta.u)) - skew_unchecked(&(x.b_inv() * &eta.b)) * 2.0
        + skew_unchecked(&x.v().tr_mul(&eta.v));
    skew_unchecked(&(b * inner * b))
}

/// `Ω` solving `ΩB² + B²Ω = B(Skew(Uᵀη_U) − 2Skew(B⁻¹η_B) + Skew(Vᵀη_V))B`.
pub fn vertical_component(x: &FixedRankPoint, eta: &TangentVector) -> Result<Mat> {
    let c = lyapunov_rhs(x, eta);
    solve_skew_lyapunov_eig(x.b_eigen(), &c)
}

/// `‖Ω‖_F` of the vertical component; zero for horizontal vectors.
pub fn horizontal_defect(x: &FixedRankPoint, eta: &TangentVector) -> f64 {
    vertical_component(x, eta).map(|o| o.norm()).unwrap_or(f64::INFINITY)
}

/// The vertical vector `(UΩ, BΩ − ΩB, VΩ)` for skew `Ω`.
pub fn vertical_vector(x: &FixedRankPoint, omega: &Mat) -> TangentVector {
    let b = x.b();
    TangentVector {
        u: x.u() * omega,
        b: b * omega - omega * b,
        v: x.v() * omega,
        horizontal: false,
        base: x.id(),
    }
}

/// `Π(η)`: removes the vertical component of a tangent vector.
pub fn project_to_horizontal(x: &FixedRankPoint, eta: &TangentVector) -> Result<TangentVector> {
    check_base(x, eta)?;
    if tangent_defect(x, &eta.to_triple()) > TANGENT_TOL {
        return Err(Error::Precondition("vector is not tangent at this point".into()));
    }
    Ok(horizontal_unchecked(x, eta))
}

fn horizontal_unchecked(x: &FixedRankPoint, eta: &TangentVector) -> TangentVector {
    if x.rank() == 0 {
        let mut out = eta.clone();
        out.horizontal = true;
        return out;
    }
    let omega = vertical_component(x, eta).expect("shapes checked by construction");
    let b = x.b();
    TangentVector {
        u: &eta.u - x.u() * &omega,
        b: &eta.b - (b * &omega - &omega * b),
        v: &eta.v - x.v() * &omega,
        horizontal: true,
        base: x.id(),
    }
}

/// Riemannian gradient from the Euclidean gradient triple.
///
/// Returns `(Ψ(G)_U, B Sym(G_B) B, Ψ(G)_V)`.
pub fn egrad_to_rgrad(x: &FixedRankPoint, g: &Triple) -> Result<TangentVector> {
    g.check_shape(x)?;
    let mut t = project_unchecked(x, g);
    let b = x.b();
    t.b = sym_unchecked(&(b * &t.b * b));
    Ok(t)
}

/// Horizontal Riemannian gradient `Π(egrad_to_rgrad(x, G))`.
pub fn riemannian_gradient(x: &FixedRankPoint, g: &Triple) -> Result<TangentVector> {
    let t = egrad_to_rgrad(x, g)?;
    Ok(horizontal_unchecked(x, &t))
}

/// Riemannian Hessian applied to a horizontal vector.
///
/// `g` is the Euclidean gradient triple at `x` and `g_dot` its Euclidean
/// directional derivative along `ξ`. The result is
/// `Π(Ψ(ġ) − Ψ(ξ_U Sym(Uᵀg_U), Sym(ξ_B B⁻¹ g_B), ξ_V Sym(Vᵀg_V)))` where `g`
/// also denotes the Riemannian gradient field and `ġ` its derivative.
pub fn apply_hessian(
    x: &FixedRankPoint,
    xi: &TangentVector,
    g: &Triple,
    g_dot: &Triple,
) -> Result<TangentVector> {
    check_base(x, xi)?;
    if !xi.horizontal {
        return Err(Error::Precondition("Hessian needs a horizontal direction".into()));
    }
    g.check_shape(x)?;
    g_dot.check_shape(x)?;
    debug_assert!(
        horizontal_defect(x, xi) <= 1e-8 * metric_norm(x, xi).max(1.0),
        "horizontal flag set on a non-horizontal vector"
    );
    Ok(hessian_unchecked(x, xi, g, g_dot))
}

pub(crate) fn hessian_unchecked(
    x: &FixedRankPoint,
    xi: &TangentVector,
    g: &Triple,
    g_dot: &Triple,
) -> TangentVector {
    let (u, b, v) = (x.u(), x.b(), x.v());

    // Riemannian gradient field at x.
    let sym_gb = sym_unchecked(&g.b);
    let rg_u = stiefel_project(u, &g.u);
    let rg_b = b * &sym_gb * b;
    let rg_v = stiefel_project(v, &g.v);

    // Euclidean derivative of the gradient field along ξ.
    let d_u = &g_dot.u
        - &xi.u * sym_unchecked(&u.tr_mul(&g.u))
        - u * sym_unchecked(&(xi.u.tr_mul(&g.u) + u.tr_mul(&g_dot.u)));
    let d_b = &xi.b * &sym_gb * b + b * sym_unchecked(&g_dot.b) * b + b * &sym_gb * &xi.b;
    let d_v = &g_dot.v
        - &xi.v * sym_unchecked(&v.tr_mul(&g.v))
        - v * sym_unchecked(&(xi.v.tr_mul(&g.v) + v.tr_mul(&g_dot.v)));

    let corr = Triple {
        u: d_u - &xi.u * sym_unchecked(&u.tr_mul(&rg_u)),
        b: d_b - sym_unchecked(&(&xi.b * x.b_inv() * &rg_b)),
        v: d_v - &xi.v * sym_unchecked(&v.tr_mul(&rg_v)),
    };
    let t = project_unchecked(x, &corr);
    horizontal_unchecked(x, &t)
}

/// `R_x(ξ) = (uf(U+ξ_U), B^{1/2} exp(B^{-1/2} ξ_B B^{-1/2}) B^{1/2}, uf(V+ξ_V))`.
pub fn retract(x: &FixedRankPoint, xi: &TangentVector) -> Result<FixedRankPoint> {
    check_base(x, xi)?;
    if x.rank() == 0 {
        return Ok(x.clone());
    }
    let u = polar_orthonormal_factor(&(x.u() + &xi.u))?;
    let v = polar_orthonormal_factor(&(x.v() + &xi.v))?;
    let inner = sym_unchecked(&(x.b_inv_sqrt() * &xi.b * x.b_inv_sqrt()));
    let e = SymEigen::new(&inner)?.apply(f64::exp);
    let b = sym_unchecked(&(x.b_sqrt() * e * x.b_sqrt()));
    let b = SpdMatrix::new(b)?;
    FixedRankPoint::from_parts(u, b, v)
}

/// Approximate inverse retraction at `x` of `y`, projected to the horizontal
/// space: `Π∘Ψ(U_y − U_x, B^{1/2} log(B^{-1/2} B_y B^{-1/2}) B^{1/2}, V_y − V_x)`.
pub fn inverse_retract_approx(x: &FixedRankPoint, y: &FixedRankPoint) -> Result<TangentVector> {
    if x.rank() != y.rank() || x.rows() != y.rows() || x.cols() != y.cols() {
        return Err(Error::Precondition(format!(
            "inverse retraction between incompatible points (rank {} vs {})",
            x.rank(),
            y.rank()
        )));
    }
    if x.rank() == 0 {
        return Ok(TangentVector::zero(x));
    }
    let inner = sym_unchecked(&(x.b_inv_sqrt() * y.b() * x.b_inv_sqrt()));
    let eig = SymEigen::new(&inner)?;
    if eig.values.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::NotSpd);
    }
    let l = eig.apply(f64::ln);
    let z = Triple {
        u: y.u() - x.u(),
        b: x.b_sqrt() * l * x.b_sqrt(),
        v: y.v() - x.v(),
    };
    let t = project_unchecked(x, &z);
    Ok(horizontal_unchecked(x, &t))
}
