//! Grid inversion of the thresholded sparsity statistic.
//!
//! For every candidate effect value `beta` on a grid, deviations
//! `Gamma_j - beta * gamma_j` are hard-thresholded at a calibrated level; the
//! number of surviving deviations measures how many instruments look invalid
//! at that `beta`. Values where fewer than half of the active instruments look
//! invalid are collected, and the confidence interval is the min/max hull of
//! that passing set. An empty passing set is reported as an empty interval,
//! which doubles as a diagnostic that the identification rule may be violated.

use nalgebra::DVector;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::mvn;
use crate::reduced_form::{ratio_variance, ReducedFormFit};

/// A uniform grid of candidate effect values.
#[derive(Debug, Clone, Serialize)]
pub struct GridSpec {
    pub lower: f64,
    pub upper: f64,
    /// Spacing between consecutive points.
    pub step: f64,
    /// Grid exponent `a` when the step came from `n^-a`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exponent: Option<f64>,
    pub points: Vec<f64>,
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// How the threshold was calibrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoMethod {
    Bootstrap,
    Bonferroni,
    SqrtLog,
}

/// A calibrated threshold.
#[derive(Debug, Clone, Serialize)]
pub struct ThresholdSpec {
    pub rho: f64,
    pub method: RhoMethod,
    pub alpha: f64,
    /// Bootstrap replicate count when applicable.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicates: Option<usize>,
}

/// Diagnostics attached to every interval.
#[derive(Debug, Clone, Serialize)]
pub struct IntervalDiagnostics {
    pub rho: f64,
    /// Shrink factor; present only for sampled intervals.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub grid_lower: f64,
    pub grid_upper: f64,
    pub grid_count: usize,
    /// Sparsity counts at the interval endpoints.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sparsity_at_lo: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sparsity_at_hi: Option<usize>,
    /// Number of grid points in the passing set.
    pub passing_count: usize,
    /// Grid points between lo and hi that fail (the passing set may be
    /// non-contiguous).
    pub interior_failures: usize,
    /// Active instrument set (0-based).
    pub valid_set: Vec<usize>,
}

/// A possibly-empty confidence interval over grid values.
#[derive(Debug, Clone, Serialize)]
pub struct Interval {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hi: Option<f64>,
    pub empty: bool,
    pub diagnostics: IntervalDiagnostics,
}

impl Interval {
    pub fn contains(&self, value: f64) -> bool {
        match (self.lo, self.hi) {
            (Some(lo), Some(hi)) => lo <= value && value <= hi,
            _ => false,
        }
    }

    pub fn width(&self) -> Option<f64> {
        match (self.lo, self.hi) {
            (Some(lo), Some(hi)) => Some(hi - lo),
            _ => None,
        }
    }
}

/// Initial search range: every active instrument proposes its ratio estimate
/// plus/minus `(log n)^{1/4}` standard deviations, and the range is the hull.
pub fn initial_range(fit: &ReducedFormFit, active: &[usize]) -> Result<(f64, f64)> {
    if active.is_empty() {
        return Err(Error::Parameter("active instrument set is empty".into()));
    }
    let mult = (fit.n as f64).ln().powf(0.25);
    let mut lower = f64::INFINITY;
    let mut upper = f64::NEG_INFINITY;
    for &j in active {
        let ratio = fit.instrument_ratio(j)?;
        let sd = ratio_variance(fit, j)?.sqrt();
        lower = lower.min(ratio - mult * sd);
        upper = upper.max(ratio + mult * sd);
    }
    Ok((lower, upper))
}

/// Pre-search on a `1/n`-spaced grid with the closed-form threshold
/// `sqrt(2.005 log |B0|)`; returns the hull of passing points, or `None` when
/// nothing passes (callers fall back to the unrefined range).
pub fn refine_range(
    fit: &ReducedFormFit,
    active: &[usize],
    lower: f64,
    upper: f64,
) -> Result<Option<(f64, f64)>> {
    if lower > upper {
        return Err(Error::Parameter(format!(
            "range is inverted: {lower} > {upper}"
        )));
    }
    let step = 1.0 / fit.n as f64;
    let grid = make_grid_with_step(lower, upper, step)?;
    let rho = (2.005 * (grid.len() as f64).ln()).sqrt();
    let mut found: Option<(f64, f64)> = None;
    for &beta in &grid.points {
        if passes(fit, active, beta, rho, 1.0)? {
            found = Some(match found {
                None => (beta, beta),
                Some((lo, hi)) => (lo.min(beta), hi.max(beta)),
            });
        }
    }
    Ok(found)
}

/// Uniform grid with spacing `n^-exponent`. Theory requires `exponent > 1/2`.
pub fn make_grid(lower: f64, upper: f64, n: usize, exponent: f64) -> Result<GridSpec> {
    if exponent <= 0.5 {
        return Err(Error::Parameter(format!(
            "grid exponent must exceed 0.5, got {exponent}"
        )));
    }
    if n < 2 {
        return Err(Error::Parameter("n must be at least 2".into()));
    }
    let step = (n as f64).powf(-exponent);
    let mut grid = make_grid_with_step(lower, upper, step)?;
    grid.exponent = Some(exponent);
    Ok(grid)
}

/// Uniform grid with an explicit step. Points are `lower + i * step`; the
/// upper endpoint is appended when the last regular point undershoots it by
/// half a step or more.
pub fn make_grid_with_step(lower: f64, upper: f64, step: f64) -> Result<GridSpec> {
    if lower > upper {
        return Err(Error::Parameter(format!(
            "range is inverted: {lower} > {upper}"
        )));
    }
    if !(step > 0.0) {
        return Err(Error::Parameter("grid step must be positive".into()));
    }
    let span = upper - lower;
    let steps_exact = span / step;
    let whole = (steps_exact + 1e-9).floor();
    let mut points: Vec<f64> = (0..=(whole as usize))
        .map(|i| lower + i as f64 * step)
        .collect();
    let frac = steps_exact - whole;
    if frac >= 0.5 - 1e-9 {
        points.push(upper);
    }
    Ok(GridSpec {
        lower,
        upper,
        step,
        exponent: None,
        points,
    })
}

/// Bootstrap calibration of the threshold: simulate the estimation error of
/// the deviations under the fitted joint Gaussian, take the max standardized
/// statistic over the grid and the active set, and return its upper-`alpha`
/// empirical quantile.
pub fn rho_bootstrap(
    fit: &ReducedFormFit,
    active: &[usize],
    grid: &GridSpec,
    alpha: f64,
    replicates: usize,
    seed: u64,
) -> Result<ThresholdSpec> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha must be in (0, 1), got {alpha}")));
    }
    if replicates < 100 {
        return Err(Error::Parameter(format!(
            "bootstrap needs at least 100 replicates, got {replicates}"
        )));
    }
    if active.is_empty() || grid.is_empty() {
        return Err(Error::Parameter("active set and grid must be non-empty".into()));
    }

    let cov = mvn::joint_covariance(fit, active);
    if cov.iter().all(|&v| v == 0.0) {
        return Err(Error::Covariance(
            "estimator covariance is identically zero; nothing to calibrate".into(),
        ));
    }
    let factor = mvn::cholesky_factor(&cov)?;
    let m = active.len();

    // Standardization denominators for every (grid point, instrument) pair.
    let mut denoms = Vec::with_capacity(grid.len());
    for &beta in &grid.points {
        let mut row = Vec::with_capacity(m);
        for &j in active {
            row.push(deviation_sd(fit, j, beta)?);
        }
        denoms.push(row);
    }

    // Draw sequentially for determinism, evaluate in parallel.
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let zero = DVector::zeros(2 * m);
    let draws: Vec<DVector<f64>> = (0..replicates)
        .map(|_| mvn::draw(&zero, &factor, &mut rng))
        .collect();

    let mut stats: Vec<f64> = draws
        .par_iter()
        .map(|z| {
            let mut t = 0.0f64;
            for (b, &beta) in grid.points.iter().enumerate() {
                for a in 0..m {
                    let num = (z[a] - beta * z[m + a]).abs();
                    let den = denoms[b][a];
                    let ratio = if den > 0.0 {
                        num / den
                    } else if num == 0.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    };
                    t = t.max(ratio);
                }
            }
            t
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let rank = ((1.0 - alpha) * replicates as f64).ceil() as usize;
    let rho = stats[rank.clamp(1, replicates) - 1];
    Ok(ThresholdSpec {
        rho,
        method: RhoMethod::Bootstrap,
        alpha,
        replicates: Some(replicates),
    })
}

/// Conservative closed form: normal quantile with Bonferroni correction over
/// grid points and instruments.
pub fn rho_bonferroni(alpha: f64, grid_size: usize, p_z: usize) -> Result<ThresholdSpec> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha must be in (0, 1), got {alpha}")));
    }
    if grid_size == 0 || p_z == 0 {
        return Err(Error::Parameter(
            "grid size and instrument count must be positive".into(),
        ));
    }
    let arg = 1.0 - alpha / (grid_size as f64 * p_z as f64);
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(ThresholdSpec {
        rho: normal.inverse_cdf(arg),
        method: RhoMethod::Bonferroni,
        alpha,
        replicates: None,
    })
}

/// Closed-form `sqrt(2.005 log |B|)` threshold.
pub fn rho_sqrt_log(alpha: f64, grid_size: usize) -> Result<ThresholdSpec> {
    if grid_size == 0 {
        return Err(Error::Parameter("grid size must be positive".into()));
    }
    Ok(ThresholdSpec {
        rho: (2.005 * (grid_size as f64).ln()).sqrt(),
        method: RhoMethod::SqrtLog,
        alpha,
        replicates: None,
    })
}

/// Standard deviation of the deviation statistic at `beta` for instrument
/// `j`. The covariance blocks already carry the estimator scale, so no
/// division by `n` happens here.
fn deviation_sd(fit: &ReducedFormFit, j: usize, beta: f64) -> Result<f64> {
    let rad = fit.v_outcome[(j, j)] + beta * beta * fit.v_treatment[(j, j)]
        - 2.0 * beta * fit.cross_cov[(j, j)];
    if rad < -1e-12 {
        return Err(Error::Covariance(format!(
            "negative variance {rad:e} for instrument {j} at beta = {beta}"
        )));
    }
    Ok(rad.max(0.0).sqrt())
}

/// Per-instrument threshold at `beta`: `1.01 * rho * sd`.
pub fn rho_j(fit: &ReducedFormFit, j: usize, beta: f64, rho: f64) -> Result<f64> {
    Ok(1.01 * rho * deviation_sd(fit, j, beta)?)
}

/// Number of active instruments whose thresholded deviation at `beta` is
/// nonzero. `lambda` shrinks the thresholds (1 = plain searching).
pub fn sparsity(
    fit: &ReducedFormFit,
    active: &[usize],
    beta: f64,
    rho: f64,
    lambda: f64,
) -> Result<usize> {
    let mut count = 0;
    for &j in active {
        let dev = fit.outcome_coef[j] - beta * fit.treatment_coef[j];
        let threshold = lambda * rho_j(fit, j, beta, rho)?;
        if dev != 0.0 && dev.abs() >= threshold {
            count += 1;
        }
    }
    Ok(count)
}

/// Majority check at one grid point: strictly fewer than half of the active
/// instruments look invalid.
fn passes(
    fit: &ReducedFormFit,
    active: &[usize],
    beta: f64,
    rho: f64,
    lambda: f64,
) -> Result<bool> {
    Ok(2 * sparsity(fit, active, beta, rho, lambda)? < active.len())
}

/// Invert the sparsity condition over the grid into a confidence interval.
pub fn searching_ci(
    fit: &ReducedFormFit,
    active: &[usize],
    grid: &GridSpec,
    rho: &ThresholdSpec,
) -> Result<Interval> {
    if grid.is_empty() {
        return Err(Error::Parameter("grid is empty".into()));
    }
    if active.is_empty() {
        return Err(Error::Parameter("active instrument set is empty".into()));
    }
    let mut passing_idx = Vec::new();
    for (i, &beta) in grid.points.iter().enumerate() {
        if passes(fit, active, beta, rho.rho, 1.0)? {
            passing_idx.push(i);
        }
    }

    let mut diagnostics = IntervalDiagnostics {
        rho: rho.rho,
        lambda: None,
        grid_lower: grid.lower,
        grid_upper: grid.upper,
        grid_count: grid.len(),
        sparsity_at_lo: None,
        sparsity_at_hi: None,
        passing_count: passing_idx.len(),
        interior_failures: 0,
        valid_set: active.to_vec(),
    };

    if passing_idx.is_empty() {
        return Ok(Interval {
            lo: None,
            hi: None,
            empty: true,
            diagnostics,
        });
    }

    let first = *passing_idx.first().expect("non-empty");
    let last = *passing_idx.last().expect("non-empty");
    let lo = grid.points[first];
    let hi = grid.points[last];
    diagnostics.interior_failures = (last - first + 1) - passing_idx.len();
    diagnostics.sparsity_at_lo = Some(sparsity(fit, active, lo, rho.rho, 1.0)?);
    diagnostics.sparsity_at_hi = Some(sparsity(fit, active, hi, rho.rho, 1.0)?);
    Ok(Interval {
        lo: Some(lo),
        hi: Some(hi),
        empty: false,
        diagnostics,
    })
}
