//! Reduced-form OLS fit and its variance/covariance estimates.
//!
//! Both regressions share the design `W = (Z, X)`: the outcome regression
//! `Y ~ W` with instrument coefficients `Gamma` and the treatment regression
//! `D ~ W` with instrument coefficients `gamma`. Everything downstream
//! (relevance selection, voting, grid search) consumes this fit.
//!
//! Covariance convention: the stored blocks `v_outcome`, `v_treatment` and
//! `cross_cov` estimate the covariance of the coefficient estimators
//! themselves, e.g. `v_outcome = sigma_eps_sq * (W'W)^-1` restricted to the
//! instrument block. They already carry the `1/n` scale, so no formula in this
//! crate divides them by `n` again.

use nalgebra::{DMatrix, DVector};

use crate::data_io::{Dataset, SummaryStats};
use crate::error::{Error, Result};

/// Relative eigenvalue floor below which the design is declared singular
/// (smallest singular value of `W` under 1e-10 of the largest).
const RANK_TOL: f64 = 1e-20;

/// Output of the two reduced-form regressions.
#[derive(Debug, Clone)]
pub struct ReducedFormFit {
    /// Instrument coefficients of the outcome regression (`Gamma`).
    pub outcome_coef: DVector<f64>,
    /// Instrument coefficients of the treatment regression (`gamma`).
    pub treatment_coef: DVector<f64>,
    /// Covariate coefficients of the outcome regression (`Psi`).
    pub outcome_cov_coef: DVector<f64>,
    /// Covariate coefficients of the treatment regression (`psi`).
    pub treatment_cov_coef: DVector<f64>,
    /// Instrument block of `(W'W / n)^-1`.
    pub omega: DMatrix<f64>,
    /// Outcome noise variance estimate, `(n - 1)` denominator.
    pub outcome_noise_var: f64,
    /// Treatment noise variance estimate, `(n - 1)` denominator.
    pub treatment_noise_var: f64,
    /// Noise covariance estimate, `(n - 1)` denominator.
    pub noise_cov: f64,
    /// Covariance of the outcome instrument coefficients.
    pub v_outcome: DMatrix<f64>,
    /// Covariance of the treatment instrument coefficients.
    pub v_treatment: DMatrix<f64>,
    /// Cross-covariance between the two coefficient vectors.
    pub cross_cov: DMatrix<f64>,
    pub n: usize,
    pub p_z: usize,
    pub p_x: usize,
    /// Whether the covariance blocks are the heteroscedasticity-robust ones.
    pub robust: bool,
}

fn solve_normal_equations(
    wtw: &DMatrix<f64>,
    wty: &DVector<f64>,
    wtd: &DVector<f64>,
    n: usize,
) -> Result<(DVector<f64>, DVector<f64>, DMatrix<f64>)> {
    let p = wtw.nrows();
    if n <= p {
        return Err(Error::Dimension(format!(
            "n = {n} observations cannot identify p = {p} coefficients"
        )));
    }
    let eigen = wtw.clone().symmetric_eigen();
    let max_eig = eigen.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v));
    let min_eig = eigen.eigenvalues.iter().fold(f64::MAX, |a, &v| a.min(v));
    if !(max_eig > 0.0) || min_eig <= RANK_TOL * max_eig {
        return Err(Error::SingularDesign(format!(
            "W'W eigenvalue ratio {:e} below tolerance",
            min_eig / max_eig
        )));
    }
    let chol = wtw
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularDesign("W'W failed Cholesky factorization".into()))?;
    let coef_y = chol.solve(wty);
    let coef_d = chol.solve(wtd);
    let gram_inv = chol.inverse();
    Ok((coef_y, coef_d, gram_inv))
}

fn assemble_fit(
    coef_y: DVector<f64>,
    coef_d: DVector<f64>,
    gram_inv: &DMatrix<f64>,
    noise: (f64, f64, f64),
    n: usize,
    p_z: usize,
) -> ReducedFormFit {
    let p = coef_y.len();
    let p_x = p - p_z;
    let nf = n as f64;
    let omega = gram_inv.view((0, 0), (p_z, p_z)).map(|v| v * nf);
    let (s_eps, s_delta, s_cross) = noise;
    let v_outcome = omega.map(|o| s_eps * o / nf);
    let v_treatment = omega.map(|o| s_delta * o / nf);
    let cross_cov = omega.map(|o| s_cross * o / nf);
    ReducedFormFit {
        outcome_coef: coef_y.rows(0, p_z).clone_owned(),
        treatment_coef: coef_d.rows(0, p_z).clone_owned(),
        outcome_cov_coef: coef_y.rows(p_z, p_x).clone_owned(),
        treatment_cov_coef: coef_d.rows(p_z, p_x).clone_owned(),
        omega,
        outcome_noise_var: s_eps,
        treatment_noise_var: s_delta,
        noise_cov: s_cross,
        v_outcome,
        v_treatment,
        cross_cov,
        n,
        p_z,
        p_x,
        robust: false,
    }
}

/// Fit both reduced-form regressions by OLS on raw data.
pub fn fit_ols(data: &Dataset) -> Result<ReducedFormFit> {
    let w = data.design();
    let wtw = w.transpose() * &w;
    let wty = w.transpose() * data.outcome();
    let wtd = w.transpose() * data.treatment();
    let n = data.n();
    let (coef_y, coef_d, gram_inv) = solve_normal_equations(&wtw, &wty, &wtd, n)?;

    let res_y = data.outcome() - &w * &coef_y;
    let res_d = data.treatment() - &w * &coef_d;
    let denom = (n - 1) as f64;
    let noise = (
        res_y.norm_squared() / denom,
        res_d.norm_squared() / denom,
        res_y.dot(&res_d) / denom,
    );
    Ok(assemble_fit(coef_y, coef_d, &gram_inv, noise, n, data.p_z()))
}

/// Fit from summary statistics. Identical formulas to [`fit_ols`] with
/// `W'W`, `W'Y`, `W'D` and the noise estimates taken from the document.
pub fn fit_from_summary(stats: &SummaryStats) -> Result<ReducedFormFit> {
    let p = stats.p();
    if stats.wty.len() != p || stats.wtd.len() != p {
        return Err(Error::Dimension(
            "WtY and WtD must match the dimension of WtW".into(),
        ));
    }
    let (coef_y, coef_d, gram_inv) =
        solve_normal_equations(&stats.wtw, &stats.wty, &stats.wtd, stats.n)?;
    let noise = (
        stats.sigma_eps_sq,
        stats.sigma_delta_sq,
        stats.sigma_eps_delta,
    );
    Ok(assemble_fit(coef_y, coef_d, &gram_inv, noise, stats.n, stats.p_z))
}

/// Reduce a raw dataset to the summary statistics that [`fit_from_summary`]
/// consumes. Fitting the summary reproduces the direct fit.
pub fn summarize(data: &Dataset) -> Result<SummaryStats> {
    let fit = fit_ols(data)?;
    let w = data.design();
    Ok(SummaryStats {
        n: data.n(),
        p_z: data.p_z(),
        wtw: w.transpose() * &w,
        wty: w.transpose() * data.outcome(),
        wtd: w.transpose() * data.treatment(),
        sigma_eps_sq: fit.outcome_noise_var,
        sigma_delta_sq: fit.treatment_noise_var,
        sigma_eps_delta: fit.noise_cov,
    })
}

/// Heteroscedasticity-robust covariance blocks: the sandwich
/// `(W'W)^-1 (sum_i u_i^2 W_i W_i') (W'W)^-1` restricted to the instrument
/// block, with outcome residuals, treatment residuals, and their cross
/// products as the three middle terms.
pub fn robust_covariance(
    data: &Dataset,
    fit: &ReducedFormFit,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let w = data.design();
    let n = data.n();
    let p = w.ncols();
    let p_z = data.p_z();

    let wtw = w.transpose() * &w;
    let chol = wtw
        .cholesky()
        .ok_or_else(|| Error::SingularDesign("W'W failed Cholesky factorization".into()))?;
    let gram_inv = chol.inverse();

    let mut coef_y = DVector::zeros(p);
    coef_y.rows_mut(0, p_z).copy_from(&fit.outcome_coef);
    coef_y.rows_mut(p_z, p - p_z).copy_from(&fit.outcome_cov_coef);
    let mut coef_d = DVector::zeros(p);
    coef_d.rows_mut(0, p_z).copy_from(&fit.treatment_coef);
    coef_d.rows_mut(p_z, p - p_z).copy_from(&fit.treatment_cov_coef);

    let res_y = data.outcome() - &w * &coef_y;
    let res_d = data.treatment() - &w * &coef_d;

    // Rows of W scaled by the residuals; the meat is then a plain Gram product.
    let scale_rows = |res: &DVector<f64>| -> DMatrix<f64> {
        let mut scaled = w.clone();
        for i in 0..n {
            let r = res[i];
            scaled.row_mut(i).scale_mut(r);
        }
        scaled
    };
    let wy = scale_rows(&res_y);
    let wd = scale_rows(&res_d);

    let sandwich = |meat: DMatrix<f64>| -> DMatrix<f64> {
        let full = &gram_inv * meat * &gram_inv;
        // Symmetrize the floating-point dust away.
        let sym = (&full + full.transpose()).map(|v| 0.5 * v);
        sym.view((0, 0), (p_z, p_z)).clone_owned()
    };

    let v_outcome = sandwich(wy.transpose() * &wy);
    let v_treatment = sandwich(wd.transpose() * &wd);
    let cross = sandwich(wy.transpose() * &wd);
    Ok((v_outcome, v_treatment, cross))
}

impl ReducedFormFit {
    /// Replace the homoscedastic covariance blocks with the robust ones.
    /// Requires raw data; a summary-only fit cannot be made robust.
    pub fn with_robust_covariance(mut self, data: &Dataset) -> Result<Self> {
        if data.n() != self.n || data.p_z() != self.p_z || data.p_x() != self.p_x {
            return Err(Error::Dimension(
                "dataset does not match the fitted dimensions".into(),
            ));
        }
        let (v_outcome, v_treatment, cross) = robust_covariance(data, &self)?;
        self.v_outcome = v_outcome;
        self.v_treatment = v_treatment;
        self.cross_cov = cross;
        self.robust = true;
        Ok(self)
    }

    /// `[(W'W)^-1]_{jj}` for instrument `j`, recovered from the stored
    /// `omega = n * [(W'W)^-1]` block.
    pub fn gram_inv_diag(&self, j: usize) -> f64 {
        self.omega[(j, j)] / self.n as f64
    }

    /// The per-instrument effect estimate `outcome_coef[j] / treatment_coef[j]`.
    pub fn instrument_ratio(&self, j: usize) -> Result<f64> {
        let g = self.treatment_coef[j];
        if g == 0.0 {
            return Err(Error::Division(format!(
                "treatment coefficient of instrument {j} is zero"
            )));
        }
        Ok(self.outcome_coef[j] / g)
    }
}

/// Variance of the ratio estimate `outcome_coef[j] / treatment_coef[j]` by the
/// delta method. Small negative values from floating-point cancellation are
/// clamped to zero.
pub fn ratio_variance(fit: &ReducedFormFit, j: usize) -> Result<f64> {
    let beta = fit.instrument_ratio(j)?;
    let g = fit.treatment_coef[j];
    let rad =
        fit.v_outcome[(j, j)] + beta * beta * fit.v_treatment[(j, j)] - 2.0 * beta * fit.cross_cov[(j, j)];
    Ok((rad / (g * g)).max(0.0))
}

/// Builds a fit directly from its fields with homoscedastic blocks derived
/// from `omega` and the noise triple; test support for threshold and interval
/// modules.
#[cfg(test)]
pub(crate) fn synthetic_fit(
    outcome_coef: &[f64],
    treatment_coef: &[f64],
    noise: (f64, f64, f64),
    omega: DMatrix<f64>,
    n: usize,
) -> ReducedFormFit {
    let p_z = outcome_coef.len();
    let nf = n as f64;
    let (s_eps, s_delta, s_cross) = noise;
    let v_outcome = omega.map(|o| s_eps * o / nf);
    let v_treatment = omega.map(|o| s_delta * o / nf);
    let cross_cov = omega.map(|o| s_cross * o / nf);
    ReducedFormFit {
        outcome_coef: DVector::from_row_slice(outcome_coef),
        treatment_coef: DVector::from_row_slice(treatment_coef),
        outcome_cov_coef: DVector::zeros(0),
        treatment_cov_coef: DVector::zeros(0),
        omega,
        outcome_noise_var: s_eps,
        treatment_noise_var: s_delta,
        noise_cov: s_cross,
        v_outcome,
        v_treatment,
        cross_cov,
        n,
        p_z,
        p_x: 0,
        robust: false,
    }
}
