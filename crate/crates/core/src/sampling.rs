//! Resampled searching: draw coefficient vectors around the fitted values,
//! run the grid inversion on each draw with thresholds shrunk by a factor
//! `lambda`, and aggregate the per-draw intervals into one hull.
//!
//! Most draws produce an empty interval by design; the shrink factor is tuned
//! upward from a small start until slightly more than the target fraction of
//! draws survive. The hull of the surviving intervals is typically much
//! shorter than the plain searching interval.

use nalgebra::DVector;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mvn;
use crate::reduced_form::ReducedFormFit;
use crate::searching::{rho_j, GridSpec, Interval, IntervalDiagnostics, ThresholdSpec};

/// Per-draw interval: `None` marks an empty one.
pub type DrawInterval = Option<(f64, f64)>;

/// Shrink-factor policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaRule {
    /// Tune upward from the default start until enough draws survive.
    Auto,
    /// Use the given value as-is.
    Fixed(f64),
}

/// Configuration of the resampling stage.
#[derive(Debug, Clone, Serialize)]
pub struct SamplingConfig {
    /// Number of coefficient draws.
    pub m: usize,
    pub lambda: LambdaRule,
    /// Multiplier on the closed-form start value of lambda.
    pub lambda_init_scale: f64,
    /// Geometric growth per tuning step.
    pub lambda_growth: f64,
    /// Tuning stops at the first lambda with strictly more than this fraction
    /// of non-empty intervals.
    pub min_nonempty_frac: f64,
    pub seed: u64,
    pub max_tune_steps: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            m: 1000,
            lambda: LambdaRule::Auto,
            lambda_init_scale: 1.0 / 6.0,
            lambda_growth: 1.25,
            min_nonempty_frac: 0.05,
            seed: 0,
            max_tune_steps: 30,
        }
    }
}

impl SamplingConfig {
    fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Parameter("sample count must be at least 1".into()));
        }
        if let LambdaRule::Fixed(l) = self.lambda {
            if !(l > 0.0) {
                return Err(Error::Parameter("fixed lambda must be positive".into()));
            }
        }
        if !(self.min_nonempty_frac > 0.0 && self.min_nonempty_frac < 1.0) {
            return Err(Error::Parameter(
                "min_nonempty_frac must lie strictly between 0 and 1".into(),
            ));
        }
        if !(self.lambda_growth > 1.0) || !(self.lambda_init_scale > 0.0) {
            return Err(Error::Parameter("lambda schedule is degenerate".into()));
        }
        Ok(())
    }
}

/// Result of the resampling stage.
#[derive(Debug, Clone)]
pub struct SamplingReport {
    pub lambda_used: f64,
    /// One entry per draw; `None` marks an empty interval.
    pub intervals: Vec<DrawInterval>,
    /// Indices of the non-empty draws.
    pub nonempty: Vec<usize>,
    /// Hull of the non-empty intervals.
    pub ci: Interval,
}

/// Draw `m` coefficient vectors from the Gaussian centered at the fitted
/// coefficients with the estimated joint covariance. Draws are sequential
/// from a dedicated stream, so a seed pins the entire sequence.
pub fn sample_coefficients(
    fit: &ReducedFormFit,
    m: usize,
    seed: u64,
) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    if m == 0 {
        return Err(Error::Parameter("sample count must be at least 1".into()));
    }
    let all: Vec<usize> = (0..fit.p_z).collect();
    let cov = mvn::joint_covariance(fit, &all);
    let asym = (&cov - cov.transpose()).amax();
    if asym > 1e-8 * cov.amax().max(1.0) {
        return Err(Error::Covariance(format!(
            "joint covariance is asymmetric (max residual {asym:e})"
        )));
    }
    let factor = mvn::cholesky_factor(&cov)?;

    let mut mean = DVector::zeros(2 * fit.p_z);
    mean.rows_mut(0, fit.p_z).copy_from(&fit.outcome_coef);
    mean.rows_mut(fit.p_z, fit.p_z).copy_from(&fit.treatment_coef);

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    Ok((0..m)
        .map(|_| {
            let v = mvn::draw(&mean, &factor, &mut rng);
            (
                v.rows(0, fit.p_z).clone_owned(),
                v.rows(fit.p_z, fit.p_z).clone_owned(),
            )
        })
        .collect())
}

/// Per-instrument thresholds for every grid point, computed once from the
/// original fit and shared across draws and tuning steps.
fn threshold_table(
    fit: &ReducedFormFit,
    active: &[usize],
    grid: &GridSpec,
    rho: f64,
) -> Result<Vec<Vec<f64>>> {
    grid.points
        .iter()
        .map(|&beta| active.iter().map(|&j| rho_j(fit, j, beta, rho)).collect())
        .collect()
}

fn sample_passes(
    sample: (&DVector<f64>, &DVector<f64>),
    active: &[usize],
    beta: f64,
    thresholds: &[f64],
    lambda: f64,
) -> bool {
    let (outcome, treatment) = sample;
    let mut count = 0;
    for (a, &j) in active.iter().enumerate() {
        let dev = outcome[j] - beta * treatment[j];
        if dev != 0.0 && dev.abs() >= lambda * thresholds[a] {
            count += 1;
        }
    }
    2 * count < active.len()
}

fn scan_sample(
    sample: (&DVector<f64>, &DVector<f64>),
    active: &[usize],
    grid: &GridSpec,
    table: &[Vec<f64>],
    lambda: f64,
) -> DrawInterval {
    let lo_idx = (0..grid.len())
        .find(|&b| sample_passes(sample, active, grid.points[b], &table[b], lambda))?;
    let hi_idx = (lo_idx..grid.len())
        .rev()
        .find(|&b| sample_passes(sample, active, grid.points[b], &table[b], lambda))
        .expect("lo_idx passes");
    Some((grid.points[lo_idx], grid.points[hi_idx]))
}

/// Grid inversion for a single draw: thresholds come from the original fit,
/// shrunk by `lambda`; deviations come from the sampled coefficients.
pub fn sampled_interval(
    fit: &ReducedFormFit,
    active: &[usize],
    grid: &GridSpec,
    rho: &ThresholdSpec,
    lambda: f64,
    sample: (&DVector<f64>, &DVector<f64>),
) -> Result<DrawInterval> {
    if active.is_empty() || grid.is_empty() {
        return Err(Error::Parameter("active set and grid must be non-empty".into()));
    }
    let table = threshold_table(fit, active, grid, rho.rho)?;
    Ok(scan_sample(sample, active, grid, &table, lambda))
}

fn intervals_at_lambda(
    samples: &[(DVector<f64>, DVector<f64>)],
    active: &[usize],
    grid: &GridSpec,
    table: &[Vec<f64>],
    lambda: f64,
) -> Vec<DrawInterval> {
    samples
        .par_iter()
        .map(|(o, t)| scan_sample((o, t), active, grid, table, lambda))
        .collect()
}

/// Closed-form start value for the shrink factor.
fn lambda_start(fit: &ReducedFormFit, config: &SamplingConfig) -> f64 {
    let base = ((fit.n as f64).ln() / config.m as f64).powf(1.0 / (2.0 * fit.p_z as f64));
    config.lambda_init_scale * base
}

fn tune_on_samples(
    samples: &[(DVector<f64>, DVector<f64>)],
    active: &[usize],
    grid: &GridSpec,
    table: &[Vec<f64>],
    config: &SamplingConfig,
    lambda0: f64,
) -> Result<(f64, Vec<DrawInterval>)> {
    let m = samples.len() as f64;
    let mut fractions = Vec::with_capacity(config.max_tune_steps);
    for t in 0..config.max_tune_steps {
        let lambda = lambda0 * config.lambda_growth.powi(t as i32);
        let intervals = intervals_at_lambda(samples, active, grid, table, lambda);
        let nonempty = intervals.iter().filter(|i| i.is_some()).count();
        let frac = nonempty as f64 / m;
        fractions.push(frac);
        if nonempty as f64 > config.min_nonempty_frac * m {
            return Ok((lambda, intervals));
        }
    }
    Err(Error::Tuning {
        steps: config.max_tune_steps,
        fractions,
    })
}

/// Smallest shrink factor on the growth schedule for which strictly more than
/// `min_nonempty_frac` of the draws produce a non-empty interval. The same
/// draws are reused across steps, so the search is monotone.
pub fn tune_lambda(
    fit: &ReducedFormFit,
    active: &[usize],
    grid: &GridSpec,
    rho: &ThresholdSpec,
    config: &SamplingConfig,
) -> Result<f64> {
    config.validate()?;
    let samples = sample_coefficients(fit, config.m, config.seed)?;
    let table = threshold_table(fit, active, grid, rho.rho)?;
    let lambda0 = lambda_start(fit, config);
    tune_on_samples(&samples, active, grid, &table, config, lambda0).map(|(l, _)| l)
}

/// Hull of the non-empty per-draw intervals.
fn hull(intervals: &[DrawInterval]) -> (DrawInterval, Vec<usize>) {
    let mut nonempty = Vec::new();
    let mut bounds: DrawInterval = None;
    for (i, entry) in intervals.iter().enumerate() {
        if let Some((lo, hi)) = entry {
            nonempty.push(i);
            bounds = Some(match bounds {
                None => (*lo, *hi),
                Some((a, b)) => (a.min(*lo), b.max(*hi)),
            });
        }
    }
    (bounds, nonempty)
}

/// Full resampling stage: draw, resolve lambda, scan every draw, report the
/// hull with per-draw detail.
pub fn sampling_ci(
    fit: &ReducedFormFit,
    active: &[usize],
    grid: &GridSpec,
    rho: &ThresholdSpec,
    config: &SamplingConfig,
) -> Result<SamplingReport> {
    config.validate()?;
    if active.is_empty() || grid.is_empty() {
        return Err(Error::Parameter("active set and grid must be non-empty".into()));
    }
    let samples = sample_coefficients(fit, config.m, config.seed)?;
    let table = threshold_table(fit, active, grid, rho.rho)?;

    let (lambda_used, intervals) = match config.lambda {
        LambdaRule::Fixed(l) => (l, intervals_at_lambda(&samples, active, grid, &table, l)),
        LambdaRule::Auto => {
            let lambda0 = lambda_start(fit, config);
            tune_on_samples(&samples, active, grid, &table, config, lambda0)?
        }
    };

    let (bounds, nonempty) = hull(&intervals);
    let diagnostics = IntervalDiagnostics {
        rho: rho.rho,
        lambda: Some(lambda_used),
        grid_lower: grid.lower,
        grid_upper: grid.upper,
        grid_count: grid.len(),
        sparsity_at_lo: None,
        sparsity_at_hi: None,
        passing_count: nonempty.len(),
        interior_failures: 0,
        valid_set: active.to_vec(),
    };
    let ci = match bounds {
        Some((lo, hi)) => Interval {
            lo: Some(lo),
            hi: Some(hi),
            empty: false,
            diagnostics,
        },
        None => Interval {
            lo: None,
            hi: None,
            empty: true,
            diagnostics,
        },
    };
    Ok(SamplingReport {
        lambda_used,
        intervals,
        nonempty,
        ci,
    })
}
