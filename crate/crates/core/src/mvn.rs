//! Joint Gaussian machinery shared by the bootstrap calibration and the
//! coefficient resampler: covariance assembly over a subset of instruments and
//! a Cholesky factorization that repairs mild indefiniteness with diagonal
//! jitter.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::reduced_form::ReducedFormFit;

/// Stack the estimator covariance over the instruments in `subset` into the
/// `2m x 2m` joint matrix: outcome block top-left, treatment block
/// bottom-right, cross block off-diagonal.
pub(crate) fn joint_covariance(fit: &ReducedFormFit, subset: &[usize]) -> DMatrix<f64> {
    let m = subset.len();
    let mut cov = DMatrix::zeros(2 * m, 2 * m);
    for (a, &j) in subset.iter().enumerate() {
        for (b, &k) in subset.iter().enumerate() {
            cov[(a, b)] = fit.v_outcome[(j, k)];
            cov[(a, m + b)] = fit.cross_cov[(j, k)];
            cov[(m + a, b)] = fit.cross_cov[(k, j)];
            cov[(m + a, m + b)] = fit.v_treatment[(j, k)];
        }
    }
    cov
}

/// Lower Cholesky factor of a covariance matrix. An exactly zero matrix
/// factors to zero (degenerate but valid: all draws collapse onto the mean).
/// Otherwise failed factorizations are retried with diagonal jitter
/// `eps * mean(diag)` for `eps` in `1e-12, 1e-10, 1e-8` before giving up.
pub(crate) fn cholesky_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    if cov.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(n, n));
    }
    if let Some(chol) = cov.clone().cholesky() {
        return Ok(chol.l());
    }
    let mean_diag = cov.diagonal().sum() / n as f64;
    if !(mean_diag > 0.0) {
        return Err(Error::Covariance(
            "covariance is not positive semidefinite and has no positive diagonal mass".into(),
        ));
    }
    for eps in [1e-12, 1e-10, 1e-8] {
        let mut jittered = cov.clone();
        for i in 0..n {
            jittered[(i, i)] += eps * mean_diag;
        }
        if let Some(chol) = jittered.cholesky() {
            return Ok(chol.l());
        }
    }
    Err(Error::Covariance(
        "covariance could not be factorized even after diagonal jitter".into(),
    ))
}

/// One draw `mean + L u` with `u` standard normal.
pub(crate) fn draw(mean: &DVector<f64>, factor: &DMatrix<f64>, rng: &mut impl Rng) -> DVector<f64> {
    let u = DVector::from_fn(mean.len(), |_, _| rng.sample(StandardNormal));
    mean + factor * u
}
