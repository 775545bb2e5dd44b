//! Shared helpers for integration tests.
//!
//! The geometry property suite lives here so that the acceptance target and
//! the per-property integration tests run exactly the same checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tracenorm::geometry::{
    apply_hessian, metric_inner, metric_norm, project_to_horizontal, project_to_tangent, retract,
    riemannian_gradient, vertical_vector, FixedRankPoint, TangentVector, Triple,
};
use tracenorm::linalg::{solve_skew_lyapunov, svd_sorted, Mat, SpdMatrix};
use tracenorm::problems::{euclidean_gradient, hess_products_tangent};
use tracenorm::{MatrixCompletion, MultivariateRegression, ObservedEntries, ProblemModel, RegressionData};

/// Seeded random cases per property.
pub const CASES: u64 = 100;

pub const PROPERTIES: [&str; 8] = [
    "tangent projection idempotence",
    "horizontal-vertical orthogonality",
    "lyapunov residual",
    "retraction first order",
    "rotation invariance",
    "gradient finite difference",
    "hessian symmetry",
    "hessian second difference",
];

const TANGENT_TOL: f64 = 1e-12;
const ORTHOGONALITY_TOL: f64 = 1e-10;
const LYAPUNOV_TOL: f64 = 1e-12;
// A first-order retraction has a second-order defect, so shrinking t by 10
// divides the defect by about 100.
const RETRACTION_RATIO: f64 = 0.02;
const ROTATION_TOL: f64 = 1e-10;
const GRADIENT_TOL: f64 = 1e-5;
const SYMMETRY_TOL: f64 = 1e-8;
const SECOND_DIFF_TOL: f64 = 1e-4;

/// Worst measured value over all cases against its tolerance.
pub struct PropertyReport {
    pub name: &'static str,
    pub worst: f64,
    pub tol: f64,
    pub failures: Vec<String>,
}

impl PropertyReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn run_property(name: &'static str) -> PropertyReport {
    let (check, tol): (fn(&mut ChaCha8Rng) -> f64, f64) = match name {
        "tangent projection idempotence" => (tangent_idempotence, TANGENT_TOL),
        "horizontal-vertical orthogonality" => (orthogonality, ORTHOGONALITY_TOL),
        "lyapunov residual" => (lyapunov_residual, LYAPUNOV_TOL),
        "retraction first order" => (retraction_ratio, RETRACTION_RATIO),
        "rotation invariance" => (rotation_invariance, ROTATION_TOL),
        "gradient finite difference" => (gradient_fd, GRADIENT_TOL),
        "hessian symmetry" => (hessian_symmetry, SYMMETRY_TOL),
        "hessian second difference" => (hessian_second_difference, SECOND_DIFF_TOL),
        other => panic!("unknown property {other}"),
    };
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for case in 0..CASES {
        let mut rng = tracenorm::rng::stream(case, name);
        let v = check(&mut rng);
        worst = worst.max(v);
        if !(v <= tol) {
            failures.push(format!("case {case}: {v:.3e}"));
        }
    }
    PropertyReport {
        name,
        worst,
        tol,
        failures,
    }
}

fn gauss(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(n, m, |_, _| StandardNormal.sample(rng))
}

fn orthonormal(n: usize, p: usize, rng: &mut ChaCha8Rng) -> Mat {
    svd_sorted(&gauss(n, p, rng)).expect("svd").left
}

/// SPD matrix with eigenvalues in `[0.5, 5]`.
fn spd(p: usize, rng: &mut ChaCha8Rng) -> Mat {
    let q = orthonormal(p, p, rng);
    let d = Mat::from_fn(p, p, |i, j| if i == j { 0.5 * 10f64.powf(rng.random::<f64>()) } else { 0.0 });
    let b = &q * d * q.transpose();
    (&b + b.transpose()) * 0.5
}

fn skew(p: usize, rng: &mut ChaCha8Rng) -> Mat {
    let a = gauss(p, p, rng);
    (&a - a.transpose()) * 0.5
}

/// Random shape with `p ≤ min(n, m)`.
fn shape(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    let n = rng.random_range(2..=10);
    let m = rng.random_range(2..=10);
    let p = rng.random_range(1..=n.min(m).min(4));
    (n, m, p)
}

fn point(n: usize, m: usize, p: usize, rng: &mut ChaCha8Rng) -> FixedRankPoint {
    let u = orthonormal(n, p, rng);
    let v = orthonormal(m, p, rng);
    let b = spd(p, rng);
    FixedRankPoint::new(u, b, v).expect("point")
}

fn tangent(x: &FixedRankPoint, rng: &mut ChaCha8Rng) -> TangentVector {
    let z = Triple {
        u: gauss(x.rows(), x.rank(), rng),
        b: gauss(x.rank(), x.rank(), rng),
        v: gauss(x.cols(), x.rank(), rng),
    };
    let t = project_to_tangent(x, &z).expect("tangent");
    t.scale(1.0 / metric_norm(x, &t))
}

fn horizontal(x: &FixedRankPoint, rng: &mut ChaCha8Rng) -> TangentVector {
    let h = project_to_horizontal(x, &tangent(x, rng)).expect("horizontal");
    h.scale(1.0 / metric_norm(x, &h))
}

fn triple_distance(a: &TangentVector, b: &TangentVector) -> f64 {
    ((a.u() - b.u()).norm_squared() + (a.b() - b.b()).norm_squared() + (a.v() - b.v()).norm_squared()).sqrt()
}

/// A random completion or regression model on `n×m` matrices.
fn model(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Box<dyn ProblemModel> {
    if rng.random::<bool>() {
        let a = gauss(n, m, rng);
        let pos: Vec<_> = (0..n)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .filter(|_| rng.random::<f64>() < 0.6)
            .collect();
        let pos = if pos.is_empty() { vec![(0, 0)] } else { pos };
        Box::new(MatrixCompletion::new(ObservedEntries::from_dense(&a, &pos).expect("entries")))
    } else {
        let rows = rng.random_range(n..=3 * n);
        let data = RegressionData::new(gauss(rows, n, rng), gauss(rows, m, rng)).expect("data");
        Box::new(MultivariateRegression::new(data).expect("model"))
    }
}

fn objective(model: &dyn ProblemModel, x: &FixedRankPoint, lambda: f64) -> f64 {
    model.objective(x, lambda).expect("objective")
}

fn hessian(model: &dyn ProblemModel, x: &FixedRankPoint, lambda: f64, xi: &TangentVector) -> TangentVector {
    let e = model.evaluate(x).expect("evaluate");
    let g = euclidean_gradient(x, &e.s, lambda);
    let g_dot = hess_products_tangent(model, x, &e.s, xi).expect("hess products");
    apply_hessian(x, xi, &g, &g_dot).expect("hessian")
}

fn tangent_idempotence(rng: &mut ChaCha8Rng) -> f64 {
    let (n, m, p) = shape(rng);
    let x = point(n, m, p, rng);
    let z = Triple {
        u: gauss(n, p, rng),
        b: gauss(p, p, rng),
        v: gauss(m, p, rng),
    };
    let t = project_to_tangent(&x, &z).expect("tangent");
    let tt = project_to_tangent(&x, &t.to_triple()).expect("tangent");
    triple_distance(&t, &tt) / t.norm_euclidean().max(f64::MIN_POSITIVE)
}

fn orthogonality(rng: &mut ChaCha8Rng) -> f64 {
    let (n, m, p) = shape(rng);
    let x = point(n, m, p, rng);
    let h = horizontal(&x, rng);
    let vert = vertical_vector(&x, &skew(p, rng));
    let scale = metric_norm(&x, &h) * metric_norm(&x, &vert);
    if scale == 0.0 {
        // p = 1 has no vertical directions.
        return 0.0;
    }
    metric_inner(&x, &h, &vert).expect("inner").abs() / scale
}

fn lyapunov_residual(rng: &mut ChaCha8Rng) -> f64 {
    let p = rng.random_range(1..=8);
    let b = spd(p, rng);
    let c = skew(p, rng);
    let omega = solve_skew_lyapunov(&SpdMatrix::new(b.clone()).expect("spd"), &c).expect("lyapunov");
    let b2 = &b * &b;
    let r = &omega * &b2 + &b2 * &omega - &c;
    r.norm() / c.norm().max(f64::MIN_POSITIVE)
}

/// Ambient distance between `R_x(tξ)` and `x + tξ`.
fn retraction_defect(x: &FixedRankPoint, xi: &TangentVector, t: f64) -> f64 {
    let y = retract(x, &xi.scale(t)).expect("retract");
    let du = y.u() - (x.u() + xi.u() * t);
    let db = y.b() - (x.b() + xi.b() * t);
    let dv = y.v() - (x.v() + xi.v() * t);
    (du.norm_squared() + db.norm_squared() + dv.norm_squared()).sqrt()
}

fn retraction_ratio(rng: &mut ChaCha8Rng) -> f64 {
    let (n, m, p) = shape(rng);
    let x = point(n, m, p, rng);
    let xi = tangent(&x, rng);
    let t = 1e-2;
    let big = retraction_defect(&x, &xi, t);
    let small = retraction_defect(&x, &xi, t / 10.0);
    if big == 0.0 {
        return 0.0;
    }
    small / big
}

fn rotation_invariance(rng: &mut ChaCha8Rng) -> f64 {
    let (n, m, p) = shape(rng);
    let x = point(n, m, p, rng);
    let o = orthonormal(p, p, rng);
    let xo = x.rotated(&o).expect("rotate");
    let rotate = |t: &TangentVector| {
        let z = Triple {
            u: t.u() * &o,
            b: o.transpose() * t.b() * &o,
            v: t.v() * &o,
        };
        project_to_tangent(&xo, &z).expect("tangent")
    };
    let xi = tangent(&x, rng);
    let eta = tangent(&x, rng);
    let g = metric_inner(&x, &xi, &eta).expect("inner");
    let go = metric_inner(&xo, &rotate(&xi), &rotate(&eta)).expect("inner");
    let metric_err = (g - go).abs() / g.abs().max(1.0);

    let y = retract(&x, &xi).expect("retract");
    let yo = retract(&xo, &rotate(&xi)).expect("retract");
    let factor_err = (y.u() * &o - yo.u()).norm()
        + (o.transpose() * y.b() * &o - yo.b()).norm()
        + (y.v() * &o - yo.v()).norm();
    let dense = y.to_dense();
    let dense_err = (dense.clone() - yo.to_dense()).norm() / dense.norm().max(1.0);
    metric_err.max(factor_err / y.b().norm().max(1.0)).max(dense_err)
}

fn gradient_fd(rng: &mut ChaCha8Rng) -> f64 {
    let (n, m, p) = shape(rng);
    let x = point(n, m, p, rng);
    let model = model(n, m, rng);
    let lambda = rng.random::<f64>();
    let e = model.evaluate(&x).expect("evaluate");
    let grad = riemannian_gradient(&x, &euclidean_gradient(&x, &e.s, lambda)).expect("gradient");
    let xi = tangent(&x, rng);
    let t = 1e-5;
    let plus = objective(model.as_ref(), &retract(&x, &xi.scale(t)).expect("retract"), lambda);
    let minus = objective(model.as_ref(), &retract(&x, &xi.scale(-t)).expect("retract"), lambda);
    let fd = (plus - minus) / (2.0 * t);
    let exact = metric_inner(&x, &grad, &xi).expect("inner");
    (fd - exact).abs() / (metric_norm(&x, &grad) * metric_norm(&x, &xi)).max(1e-8)
}

fn hessian_symmetry(rng: &mut ChaCha8Rng) -> f64 {
    let (n, m, p) = shape(rng);
    let x = point(n, m, p, rng);
    let model = model(n, m, rng);
    let lambda = rng.random::<f64>();
    let xi = horizontal(&x, rng);
    let eta = horizontal(&x, rng);
    let h_xi = hessian(model.as_ref(), &x, lambda, &xi);
    let h_eta = hessian(model.as_ref(), &x, lambda, &eta);
    let a = metric_inner(&x, &h_xi, &eta).expect("inner");
    let b = metric_inner(&x, &xi, &h_eta).expect("inner");
    let scale = metric_norm(&x, &h_xi) * metric_norm(&x, &eta) + metric_norm(&x, &xi) * metric_norm(&x, &h_eta);
    (a - b).abs() / scale.max(1e-8)
}

/// Fully observed completion with `x` critical: `A = X + (λ/2)UVᵀ − ½P⊥NP⊥`
/// makes `S = 2(X − A) = −λUVᵀ + P⊥NP⊥`, so `SV = −λU` and `UᵀS = −λVᵀ`.
fn critical_completion(x: &FixedRankPoint, lambda: f64, rng: &mut ChaCha8Rng) -> MatrixCompletion {
    let (n, m) = (x.rows(), x.cols());
    let pu = Mat::identity(n, n) - x.u() * x.u().transpose();
    let pv = Mat::identity(m, m) - x.v() * x.v().transpose();
    let q = pu * gauss(n, m, rng) * pv;
    let a = x.to_dense() + x.u() * x.v().transpose() * (0.5 * lambda) - q * 0.5;
    let pos: Vec<_> = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
    MatrixCompletion::new(ObservedEntries::from_dense(&a, &pos).expect("entries"))
}

fn hessian_second_difference(rng: &mut ChaCha8Rng) -> f64 {
    let (n, m, p) = shape(rng);
    let x = point(n, m, p, rng);
    let lambda = 0.1 + rng.random::<f64>();
    let model = critical_completion(&x, lambda, rng);
    let xi = horizontal(&x, rng);
    let h = hessian(&model, &x, lambda, &xi);
    let exact = metric_inner(&x, &h, &xi).expect("inner");
    let t = 1e-3;
    let f0 = objective(&model, &x, lambda);
    let plus = objective(&model, &retract(&x, &xi.scale(t)).expect("retract"), lambda);
    let minus = objective(&model, &retract(&x, &xi.scale(-t)).expect("retract"), lambda);
    let fd = (plus - 2.0 * f0 + minus) / (t * t);
    (fd - exact).abs() / exact.abs().max(metric_norm(&x, &h)).max(1e-8)
}
