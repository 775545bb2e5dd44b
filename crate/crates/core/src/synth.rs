//! Synthetic problem instances with known low-rank ground truth.

use rand::seq::index;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::problems::ObservedEntries;
use crate::rng;

/// `|𝒲| = round(OS·(n + m − r)·r)`, checked against `n·m`.
pub fn observed_count(n: usize, m: usize, r: usize, oversampling: f64) -> Result<usize> {
    if r == 0 || r > n.min(m) {
        return Err(Error::Precondition(format!("rank {r} invalid for a {n}x{m} matrix")));
    }
    if !(oversampling > 0.0) {
        return Err(Error::Precondition("oversampling ratio must be positive".into()));
    }
    let dof = ((n + m - r) * r) as f64;
    let count = (oversampling * dof).round() as usize;
    if count > n * m {
        return Err(Error::Precondition(format!(
            "oversampling {oversampling} asks for {count} entries of a {n}x{m} matrix"
        )));
    }
    Ok(count)
}

/// Oversampling ratio that observes the given fraction of entries.
pub fn oversampling_for_fraction(n: usize, m: usize, r: usize, fraction: f64) -> f64 {
    fraction * (n * m) as f64 / ((n + m - r) * r) as f64
}

/// Rank-`r` Gaussian matrix `L Rᵀ` and a uniformly sampled set of its entries.
#[derive(Debug, Clone)]
pub struct CompletionInstance {
    pub truth: Mat,
    pub left: Mat,
    pub right: Mat,
    pub observed: ObservedEntries,
    pub noise_std: f64,
}

/// Draws `L` (`n×r`), `R` (`m×r`) with standard Gaussian entries and observes
/// `count` entries of `L Rᵀ` without replacement, optionally with additive
/// Gaussian noise.
pub fn completion_instance(
    n: usize,
    m: usize,
    r: usize,
    count: usize,
    noise_std: f64,
    seed: u64,
) -> Result<CompletionInstance> {
    if count > n * m {
        return Err(Error::Precondition(format!("cannot observe {count} of {} entries", n * m)));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::Precondition("noise level must be nonnegative".into()));
    }
    let mut data = rng::stream(seed, rng::DATA);
    let left = Mat::from_fn(n, r, |_, _| StandardNormal.sample(&mut data));
    let right = Mat::from_fn(m, r, |_, _| StandardNormal.sample(&mut data));
    let truth = &left * right.transpose();
    let mut picks: Vec<usize> = index::sample(&mut data, n * m, count).into_vec();
    picks.sort_unstable();
    let mut noise_rng = rng::stream(seed, rng::NOISE);
    let trip = picks
        .into_iter()
        .map(|k| {
            let (i, j) = (k / m, k % m);
            let e = if noise_std > 0.0 {
                let z: f64 = StandardNormal.sample(&mut noise_rng);
                noise_std * z
            } else {
                0.0
            };
            (i, j, truth[(i, j)] + e)
        })
        .collect();
    Ok(CompletionInstance {
        observed: ObservedEntries::new(n, m, trip)?,
        truth,
        left,
        right,
        noise_std,
    })
}

/// `‖X̃ − X‖_F / ‖X̃‖_F`.
pub fn relative_error(truth: &Mat, estimate: &Mat) -> f64 {
    (truth - estimate).norm() / truth.norm()
}

/// Regression data `Y = X W*` with a rank-`r` `W*`, split into train/test rows.
#[derive(Debug, Clone)]
pub struct RegressionInstance {
    pub x_train: Mat,
    pub y_train: Mat,
    pub x_test: Mat,
    pub y_test: Mat,
    pub w_star: Mat,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub noise_std: f64,
}

/// Noise added to the training responses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseLevel {
    None,
    /// Per-entry standard deviation `‖Y_train‖_F / (snr·√(n_train·k))`, so
    /// that `‖Y_train‖_F / ‖noise‖_F ≈ snr`.
    Snr(f64),
    /// Per-entry standard deviation.
    Std(f64),
}

/// Gaussian `X` (`n×q`), `W* = L Rᵀ` with Gaussian `L` (`q×r`), `R` (`k×r`).
///
/// Rows are split at random into `round(train_fraction·n)` training rows and
/// the rest. Noise, if any, touches only the training responses.
pub fn regression_instance(
    n: usize,
    q: usize,
    k: usize,
    r: usize,
    train_fraction: f64,
    noise: NoiseLevel,
    seed: u64,
) -> Result<RegressionInstance> {
    if r == 0 || r > q.min(k) {
        return Err(Error::Precondition(format!("rank {r} invalid for a {q}x{k} coefficient matrix")));
    }
    if !(0.0 < train_fraction && train_fraction < 1.0) {
        return Err(Error::Precondition("train fraction must lie in (0, 1)".into()));
    }
    match noise {
        NoiseLevel::Snr(s) if !(s > 0.0 && s.is_finite()) => {
            return Err(Error::Precondition("SNR must be positive and finite".into()))
        }
        NoiseLevel::Std(s) if !(s >= 0.0 && s.is_finite()) => {
            return Err(Error::Precondition("noise level must be nonnegative".into()))
        }
        _ => {}
    }
    let mut data = rng::stream(seed, rng::DATA);
    let x = Mat::from_fn(n, q, |_, _| StandardNormal.sample(&mut data));
    let left = Mat::from_fn(q, r, |_, _| StandardNormal.sample(&mut data));
    let right = Mat::from_fn(k, r, |_, _| StandardNormal.sample(&mut data));
    let w_star = &left * right.transpose();
    let y = &x * &w_star;

    let mut split = rng::stream(seed, rng::SPLIT);
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut perm: Vec<usize> = index::sample(&mut split, n, n).into_vec();
    let mut test_rows = perm.split_off(n_train);
    let mut train_rows = perm;
    train_rows.sort_unstable();
    test_rows.sort_unstable();

    let x_train = x.select_rows(&train_rows);
    let mut y_train = y.select_rows(&train_rows);
    let x_test = x.select_rows(&test_rows);
    let y_test = y.select_rows(&test_rows);

    let noise_std = match noise {
        NoiseLevel::None => 0.0,
        NoiseLevel::Snr(s) => y_train.norm() / (s * ((n_train * k) as f64).sqrt()),
        NoiseLevel::Std(s) => s,
    };
    if noise_std > 0.0 {
        let dist = Normal::new(0.0, noise_std).map_err(|e| Error::Numerical(e.to_string()))?;
        let mut noise_rng = rng::stream(seed, rng::NOISE);
        for v in y_train.iter_mut() {
            *v += dist.sample(&mut noise_rng);
        }
    }
    Ok(RegressionInstance {
        x_train,
        y_train,
        x_test,
        y_test,
        w_star,
        train_rows,
        test_rows,
        noise_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn observed_count_examples() {
        assert_eq!(observed_count(100, 100, 10, 4.2).unwrap(), 7980);
        let os = oversampling_for_fraction(200, 200, 5, 0.4);
        assert_eq!(observed_count(200, 200, 5, os).unwrap(), 16000);
        assert!(observed_count(10, 10, 5, 10.0).is_err());
    }

    #[test]
    fn completion_instance_is_reproducible() {
        let a = completion_instance(20, 15, 3, 120, 0.0, 42).unwrap();
        let b = completion_instance(20, 15, 3, 120, 0.0, 42).unwrap();
        assert_eq!(a.observed, b.observed);
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.observed.len(), 120);
        for (i, j, x) in a.observed.iter() {
            assert_eq!(x, a.truth[(i, j)]);
        }
        let c = completion_instance(20, 15, 3, 120, 0.0, 43).unwrap();
        assert_ne!(a.truth, c.truth);
    }

    #[test]
    fn regression_noise_matches_snr() {
        let inst = regression_instance(400, 12, 10, 2, 0.7, NoiseLevel::Snr(10.0), 3).unwrap();
        assert_eq!(inst.train_rows.len(), 280);
        assert_eq!(inst.test_rows.len(), 120);
        let clean = &inst.x_train * &inst.w_star;
        let ratio = clean.norm() / (&inst.y_train - &clean).norm();
        assert!((ratio - 10.0).abs() < 0.5, "ratio {ratio}");
    }
}
