//! End-to-end analysis: fit, select, build the grid, calibrate the threshold,
//! and construct both confidence intervals; plus the two-stage least squares
//! baselines the simulation harness compares against.

use nalgebra::DMatrix;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data_io::{Dataset, SummaryStats};
use crate::error::{Error, Result};
use crate::iv_select::{external_valid_set, select_relevant, select_tsht, SelectionResult};
use crate::reduced_form::{fit_from_summary, fit_ols, ReducedFormFit};
use crate::sampling::{sampling_ci, LambdaRule, SamplingConfig, SamplingReport};
use crate::searching::{
    initial_range, make_grid, refine_range, rho_bonferroni, rho_bootstrap, rho_sqrt_log,
    searching_ci, GridSpec, Interval, RhoMethod, ThresholdSpec,
};
use crate::seed;

/// Identification rule governing which set the grid search runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Search over the relevant set; assumes most relevant instruments are valid.
    Majority,
    /// Search over the voted valid set; assumes valid instruments form the
    /// largest same-ratio group.
    Plurality,
}

/// Substream indices off the master seed.
const BOOTSTRAP_STREAM: u64 = 1;
const SAMPLING_STREAM: u64 = 2;

/// Analysis configuration; defaults mirror the procedure's stated defaults.
#[derive(Debug, Clone)]
pub struct AnalysisConfig {
    pub alpha: f64,
    pub mode: Mode,
    /// Number of coefficient draws for the sampling interval.
    pub m: usize,
    /// Bootstrap replicates for threshold calibration.
    pub bootstrap_k: usize,
    pub rho_method: RhoMethod,
    /// Grid spacing exponent: step = n^-a.
    pub grid_exponent: f64,
    pub seed: u64,
    /// Caller-supplied valid set (0-based instrument indices).
    pub valid_set: Option<Vec<usize>>,
    pub lambda: LambdaRule,
    /// Use heteroscedasticity-robust covariance blocks (raw data only).
    pub robust: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            mode: Mode::Plurality,
            m: 1000,
            bootstrap_k: 1000,
            rho_method: RhoMethod::Bootstrap,
            grid_exponent: 0.6,
            seed: 0,
            valid_set: None,
            lambda: LambdaRule::Auto,
            robust: false,
        }
    }
}

/// Raw data or summary statistics.
#[derive(Debug, Clone, Copy)]
pub enum AnalysisInput<'a> {
    Data(&'a Dataset),
    Summary(&'a SummaryStats),
}

/// Compact fit echo for reports.
#[derive(Debug, Clone, Serialize)]
pub struct FitSummary {
    pub n: usize,
    pub p_z: usize,
    pub p_x: usize,
    pub outcome_coef: Vec<f64>,
    pub treatment_coef: Vec<f64>,
    pub outcome_noise_var: f64,
    pub treatment_noise_var: f64,
    pub noise_cov: f64,
    pub robust: bool,
}

/// Everything one analysis produces.
#[derive(Debug, Clone)]
pub struct AnalysisResult {
    pub searching: Interval,
    pub sampling: SamplingReport,
    pub selection: SelectionResult,
    pub fit: FitSummary,
    pub mode: Mode,
    pub alpha: f64,
    pub seed: u64,
    pub rho: ThresholdSpec,
    pub grid: GridSpec,
    /// Range before and after the pre-search refinement.
    pub range: (f64, f64),
    pub refined_range: (f64, f64),
    pub warnings: Vec<String>,
}

/// Run the full procedure on raw data or summary statistics.
pub fn analyze(input: AnalysisInput<'_>, config: &AnalysisConfig) -> Result<AnalysisResult> {
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::Parameter(format!(
            "alpha must be in (0, 1), got {}",
            config.alpha
        )));
    }
    let fit = match input {
        AnalysisInput::Data(data) => {
            let fit = fit_ols(data)?;
            if config.robust {
                fit.with_robust_covariance(data)?
            } else {
                fit
            }
        }
        AnalysisInput::Summary(stats) => {
            if config.robust {
                return Err(Error::Unsupported(
                    "robust covariance needs raw data, not summary statistics".into(),
                ));
            }
            fit_from_summary(stats)?
        }
    };
    analyze_fit(&fit, config)
}

/// Same pipeline, starting from an already computed fit.
pub fn analyze_fit(fit: &ReducedFormFit, config: &AnalysisConfig) -> Result<AnalysisResult> {
    let s_hat = select_relevant(fit)?;

    let selection = match (&config.valid_set, config.mode) {
        (Some(v_user), _) => external_valid_set(&s_hat, v_user)?,
        (None, Mode::Majority) => external_valid_set(&s_hat, &s_hat)?,
        (None, Mode::Plurality) => select_tsht(fit)?,
    };
    let active = selection.v_hat.clone();

    let range = initial_range(fit, &active)?;
    let refined_range = refine_range(fit, &active, range.0, range.1)?.unwrap_or(range);
    let grid = make_grid(refined_range.0, refined_range.1, fit.n, config.grid_exponent)?;

    let rho = match config.rho_method {
        RhoMethod::Bootstrap => rho_bootstrap(
            fit,
            &active,
            &grid,
            config.alpha,
            config.bootstrap_k,
            seed::derive_seed(config.seed, BOOTSTRAP_STREAM),
        )?,
        RhoMethod::Bonferroni => rho_bonferroni(config.alpha, grid.len(), fit.p_z)?,
        RhoMethod::SqrtLog => rho_sqrt_log(config.alpha, grid.len())?,
    };

    let searching = searching_ci(fit, &active, &grid, &rho)?;

    let sampling_config = SamplingConfig {
        m: config.m,
        lambda: config.lambda,
        seed: seed::derive_seed(config.seed, SAMPLING_STREAM),
        ..SamplingConfig::default()
    };
    let sampling = sampling_ci(fit, &active, &grid, &rho, &sampling_config)?;

    let rule = match config.mode {
        Mode::Majority => "majority",
        Mode::Plurality => "plurality",
    };
    let mut warnings = Vec::new();
    if searching.empty {
        warnings.push(format!("searching CI is empty: {rule} rule may be violated"));
    }
    if sampling.ci.empty {
        warnings.push(format!("sampling CI is empty: {rule} rule may be violated"));
    }

    Ok(AnalysisResult {
        searching,
        sampling,
        fit: FitSummary {
            n: fit.n,
            p_z: fit.p_z,
            p_x: fit.p_x,
            outcome_coef: fit.outcome_coef.iter().copied().collect(),
            treatment_coef: fit.treatment_coef.iter().copied().collect(),
            outcome_noise_var: fit.outcome_noise_var,
            treatment_noise_var: fit.treatment_noise_var,
            noise_cov: fit.noise_cov,
            robust: fit.robust,
        },
        selection,
        mode: config.mode,
        alpha: config.alpha,
        seed: config.seed,
        rho,
        grid,
        range,
        refined_range,
        warnings,
    })
}

/// Point estimate and Wald interval from two-stage least squares.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TslsEstimate {
    pub beta_hat: f64,
    pub std_err: f64,
    pub lo: f64,
    pub hi: f64,
}

impl TslsEstimate {
    pub fn contains(&self, value: f64) -> bool {
        self.lo <= value && value <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Two-stage least squares of the outcome on the treatment, instrumented by
/// `instruments`, with `control_instruments` and all baseline covariates
/// entering as included exogenous regressors. Homoscedastic asymptotic
/// variance; normal critical value.
fn tsls(
    data: &Dataset,
    instruments: &[usize],
    control_instruments: &[usize],
    alpha: f64,
) -> Result<TslsEstimate> {
    if instruments.is_empty() {
        return Err(Error::UnderIdentified(
            "no instruments supplied for the treatment".into(),
        ));
    }
    let n = data.n();
    let z = data.instruments();
    let n_controls = control_instruments.len() + data.p_x();

    // Included exogenous columns: controls from Z, then X.
    let mut exog = DMatrix::zeros(n, n_controls);
    for (c, &j) in control_instruments.iter().enumerate() {
        exog.column_mut(c).copy_from(&z.column(j));
    }
    if data.p_x() > 0 {
        exog.view_mut((0, control_instruments.len()), (n, data.p_x()))
            .copy_from(data.covariates());
    }

    // First stage: project the treatment on (Z_instruments, exog).
    let mut first = DMatrix::zeros(n, instruments.len() + n_controls);
    for (c, &j) in instruments.iter().enumerate() {
        first.column_mut(c).copy_from(&z.column(j));
    }
    first
        .view_mut((0, instruments.len()), (n, n_controls))
        .copy_from(&exog);
    let ftf = first.transpose() * &first;
    let chol = ftf
        .cholesky()
        .ok_or_else(|| Error::SingularDesign("first-stage design is rank deficient".into()))?;
    let coef_first = chol.solve(&(first.transpose() * data.treatment()));
    let d_hat = &first * coef_first;

    // Second stage: outcome on (d_hat, exog).
    let k = 1 + n_controls;
    if n <= k {
        return Err(Error::Dimension(format!(
            "n = {n} leaves no residual degrees of freedom for {k} second-stage coefficients"
        )));
    }
    let mut second = DMatrix::zeros(n, k);
    second.column_mut(0).copy_from(&d_hat);
    if n_controls > 0 {
        second.view_mut((0, 1), (n, n_controls)).copy_from(&exog);
    }
    let sts = second.transpose() * &second;
    let chol = sts
        .cholesky()
        .ok_or_else(|| Error::SingularDesign("second-stage design is rank deficient".into()))?;
    let coef = chol.solve(&(second.transpose() * data.outcome()));
    let beta_hat = coef[0];

    // Structural residuals use the original treatment, not its projection.
    let mut structural = DMatrix::zeros(n, k);
    structural.column_mut(0).copy_from(data.treatment());
    if n_controls > 0 {
        structural.view_mut((0, 1), (n, n_controls)).copy_from(&exog);
    }
    let residual = data.outcome() - structural * &coef;
    let sigma_sq = residual.norm_squared() / (n - k) as f64;
    let var_beta = sigma_sq * chol.inverse()[(0, 0)];
    let std_err = var_beta.max(0.0).sqrt();

    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let crit = normal.inverse_cdf(1.0 - alpha / 2.0);
    Ok(TslsEstimate {
        beta_hat,
        std_err,
        lo: beta_hat - crit * std_err,
        hi: beta_hat + crit * std_err,
    })
}

/// TSLS with the true valid set (simulation benchmark): instruments outside
/// the valid set enter as included exogenous regressors.
pub fn oracle_tsls(data: &Dataset, true_valid: &[usize], alpha: f64) -> Result<TslsEstimate> {
    if true_valid.is_empty() {
        return Err(Error::UnderIdentified("valid set is empty".into()));
    }
    let controls: Vec<usize> = (0..data.p_z()).filter(|j| !true_valid.contains(j)).collect();
    tsls(data, true_valid, &controls, alpha)
}

/// TSLS with the estimated valid set: instruments remaining in the relevant
/// set but voted invalid enter as controls, the rest of the candidates are
/// dropped. This is the post-selection baseline whose under-coverage the
/// harness demonstrates.
pub fn post_selection_tsls(
    data: &Dataset,
    selection: &SelectionResult,
    alpha: f64,
) -> Result<TslsEstimate> {
    if selection.v_hat.is_empty() {
        return Err(Error::UnderIdentified("estimated valid set is empty".into()));
    }
    let controls: Vec<usize> = selection
        .s_hat
        .iter()
        .copied()
        .filter(|j| !selection.v_hat.contains(j))
        .collect();
    tsls(data, &selection.v_hat, &controls, alpha)
}

/// Hull of two intervals (used to combine results from two different valid-set
/// estimates). Empty inputs drop out; two empties stay empty.
pub fn interval_union(a: &Interval, b: &Interval) -> Interval {
    let mut merged = a.clone();
    match ((a.lo, a.hi), (b.lo, b.hi)) {
        ((Some(alo), Some(ahi)), (Some(blo), Some(bhi))) => {
            merged.lo = Some(alo.min(blo));
            merged.hi = Some(ahi.max(bhi));
            merged.empty = false;
        }
        ((None, _), (Some(_), Some(_))) => {
            merged = b.clone();
        }
        _ => {}
    }
    merged
}
