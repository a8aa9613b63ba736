//! Monte Carlo harness: parameterized data-generating processes, replicated
//! analyses, and table-shaped coverage/length summaries.
//!
//! The named settings vary instrument strength `gamma0`, invalidity level
//! `tau` and sample size; covariates and instruments are jointly Gaussian with
//! an AR-style correlation structure, and the two model errors are bivariate
//! normal with correlation 0.8.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use std::time::Instant;

use crate::data_io::Dataset;
use crate::error::{Error, Result};
use crate::pipeline::{
    analyze, oracle_tsls, post_selection_tsls, AnalysisConfig, AnalysisInput,
};
use crate::seed::derive_seed;

/// Substream index for data generation (analysis substreams are 1 and 2).
const DATA_STREAM: u64 = 0;

/// A fully parameterized data-generating process.
#[derive(Debug, Clone)]
pub struct SimSetting {
    pub name: String,
    pub beta_star: f64,
    pub gamma0: f64,
    pub tau: f64,
    pub n: usize,
    pub p_z: usize,
    pub p_x: usize,
    /// Instrument strengths.
    pub gamma_star: DVector<f64>,
    /// Direct instrument effects on the outcome (zero = valid).
    pub pi_star: DVector<f64>,
    /// Covariate effects on the treatment.
    pub psi_star: DVector<f64>,
    /// Covariate effects on the outcome.
    pub outcome_cov_effect: DVector<f64>,
    /// Correlation of the two model errors.
    pub err_corr: f64,
    /// Error scale multiplier (1 = unit variances).
    pub err_scale: f64,
    /// Covariance of the joint regressor vector, `0.5^{|j-l|}`.
    pub sigma: DMatrix<f64>,
    sigma_chol: DMatrix<f64>,
}

fn ar_covariance(p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |j, l| 0.5f64.powi((j as i32 - l as i32).abs()))
}

fn arithmetic(start: f64, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |k, _| start + 0.1 * k as f64)
}

impl SimSetting {
    /// Assemble a setting from its vectors; covariate effect vectors follow
    /// the standard arithmetic progressions for the given `p_x`.
    pub fn assemble(
        name: impl Into<String>,
        beta_star: f64,
        gamma0: f64,
        tau: f64,
        n: usize,
        gamma_star: DVector<f64>,
        pi_star: DVector<f64>,
        p_x: usize,
    ) -> Result<Self> {
        if gamma_star.len() != pi_star.len() {
            return Err(Error::Dimension(
                "gamma_star and pi_star must have the same length".into(),
            ));
        }
        let p_z = gamma_star.len();
        let p = p_z + p_x;
        let sigma = ar_covariance(p);
        let sigma_chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Covariance("regressor covariance is not PD".into()))?
            .l();
        Ok(Self {
            name: name.into(),
            beta_star,
            gamma0,
            tau,
            n,
            p_z,
            p_x,
            gamma_star,
            pi_star,
            psi_star: arithmetic(0.6, p_x),
            outcome_cov_effect: arithmetic(1.1, p_x),
            err_corr: 0.8,
            err_scale: 1.0,
            sigma,
            sigma_chol,
        })
    }

    pub fn with_err_scale(mut self, scale: f64) -> Self {
        self.err_scale = scale;
        self
    }

    /// Instruments with no direct effect.
    pub fn true_valid_set(&self) -> Vec<usize> {
        (0..self.p_z).filter(|&j| self.pi_star[j] == 0.0).collect()
    }
}

/// Build one of the named settings.
///
/// `S1`-`S3` use ten instruments of strength `gamma0` and ten covariates;
/// `S4`/`S5` use six instruments; `CIIV1`/`CIIV2` use twenty-one instruments
/// of fixed strength 0.4 and no covariates.
pub fn build_setting(name: &str, gamma0: f64, tau: f64, n: usize) -> Result<SimSetting> {
    let ones = |len: usize, v: f64| DVector::from_element(len, v);
    let pi = |head_zeros: usize, tail: &[f64]| {
        let mut v = DVector::zeros(head_zeros + tail.len());
        for (i, &t) in tail.iter().enumerate() {
            v[head_zeros + i] = t;
        }
        v
    };
    let key = name.to_ascii_uppercase().replace(['-', '_'], "");
    match key.as_str() {
        "S1" => SimSetting::assemble(
            "S1",
            1.0,
            gamma0,
            tau,
            n,
            ones(10, gamma0),
            pi(6, &[tau * gamma0, tau * gamma0, -0.5, -1.0]),
            10,
        ),
        "S2" => SimSetting::assemble(
            "S2",
            1.0,
            gamma0,
            tau,
            n,
            ones(10, gamma0),
            pi(
                4,
                &[
                    tau * gamma0,
                    tau * gamma0,
                    -1.0 / 3.0,
                    -2.0 / 3.0,
                    -1.0,
                    -4.0 / 3.0,
                ],
            ),
            10,
        ),
        "S3" => SimSetting::assemble(
            "S3",
            1.0,
            gamma0,
            tau,
            n,
            ones(10, gamma0),
            pi(
                4,
                &[
                    tau * gamma0,
                    tau * gamma0,
                    -1.0 / 6.0,
                    -1.0 / 3.0,
                    -1.0 / 2.0,
                    -2.0 / 3.0,
                ],
            ),
            10,
        ),
        "S4" => SimSetting::assemble(
            "S4",
            1.0,
            gamma0,
            tau,
            n,
            ones(6, gamma0),
            pi(2, &[-0.8, -0.4, tau * gamma0, 0.6]),
            10,
        ),
        "S5" => SimSetting::assemble(
            "S5",
            1.0,
            gamma0,
            tau,
            n,
            ones(6, gamma0),
            pi(2, &[-0.8, -0.4, tau * gamma0, tau * gamma0 + 0.1]),
            10,
        ),
        "CIIV1" => {
            let mut tail = vec![tau; 6];
            tail.extend(vec![tau / 2.0; 6]);
            SimSetting::assemble("CIIV1", 1.0, 0.4, tau, n, ones(21, 0.4), pi(9, &tail), 0)
        }
        "CIIV2" => {
            let mut tail = vec![tau; 3];
            tail.extend(vec![-tau; 3]);
            tail.extend(vec![tau / 2.0; 3]);
            tail.extend(vec![-tau / 2.0; 3]);
            SimSetting::assemble("CIIV2", 1.0, 0.4, tau, n, ones(21, 0.4), pi(9, &tail), 0)
        }
        other => Err(Error::Parameter(format!("unknown setting '{other}'"))),
    }
}

/// Draw one dataset from the setting. A seed pins the dataset exactly.
pub fn generate(setting: &SimSetting, seed: u64) -> Dataset {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = setting.n;
    let p = setting.p_z + setting.p_x;
    let corr = setting.err_corr;
    let mix = (1.0 - corr * corr).sqrt();

    let mut w = DMatrix::zeros(n, p);
    let mut d = DVector::zeros(n);
    let mut y = DVector::zeros(n);
    let mut u = DVector::zeros(p);
    for i in 0..n {
        for k in 0..p {
            u[k] = rng.sample(StandardNormal);
        }
        let row = &setting.sigma_chol * &u;
        let e: f64 = rng.sample::<f64, _>(StandardNormal) * setting.err_scale;
        let v: f64 = rng.sample::<f64, _>(StandardNormal) * setting.err_scale;
        let delta = corr * e + mix * v;

        let mut zg = 0.0;
        let mut zpi = 0.0;
        for j in 0..setting.p_z {
            zg += setting.gamma_star[j] * row[j];
            zpi += setting.pi_star[j] * row[j];
        }
        let mut xpsi = 0.0;
        let mut xbig = 0.0;
        for k in 0..setting.p_x {
            xpsi += setting.psi_star[k] * row[setting.p_z + k];
            xbig += setting.outcome_cov_effect[k] * row[setting.p_z + k];
        }
        d[i] = zg + xpsi + delta;
        y[i] = setting.beta_star * d[i] + zpi + xbig + e;
        w.row_mut(i).copy_from(&row.transpose());
    }
    let z = w.view((0, 0), (n, setting.p_z)).clone_owned();
    let x = w.view((0, setting.p_z), (n, setting.p_x)).clone_owned();
    Dataset::new(y, d, z, x).expect("generated data is well formed")
}

/// Confidence-interval methods the harness can compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Searching,
    Sampling,
    Oracle,
    /// Post-selection TSLS with the voted valid set.
    Naive,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Searching => "searching",
            Method::Sampling => "sampling",
            Method::Oracle => "oracle",
            Method::Naive => "naive",
        }
    }

    pub fn parse(text: &str) -> Result<Method> {
        match text.to_ascii_lowercase().as_str() {
            "searching" => Ok(Method::Searching),
            "sampling" => Ok(Method::Sampling),
            "oracle" => Ok(Method::Oracle),
            "naive" | "post-selection" | "post_selection" => Ok(Method::Naive),
            other => Err(Error::Parameter(format!("unknown method '{other}'"))),
        }
    }
}

/// One method's result on one replication. `length` is `None` for an empty
/// interval (which never covers).
#[derive(Debug, Clone, Copy)]
pub struct MethodOutcome {
    pub contains: bool,
    pub length: Option<f64>,
}

/// Aggregated statistics for one method.
#[derive(Debug, Clone, Serialize)]
pub struct MethodStats {
    pub method: String,
    /// Fraction of replications whose interval covers the true effect.
    pub coverage: f64,
    /// Mean width over non-empty intervals (0 when all were empty).
    pub avg_length: f64,
    pub empty_count: usize,
}

/// Aggregated report for one (setting, tau, n) cell.
#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub setting: String,
    pub gamma0: f64,
    pub tau: f64,
    pub n: usize,
    pub reps: usize,
    pub stats: Vec<MethodStats>,
    pub runtime_secs: f64,
}

/// Run the requested methods on one generated dataset. `rep_seed` drives both
/// the data draw and the analysis substreams, so a (master seed, replication)
/// pair can be recomputed in isolation.
pub fn run_single(
    setting: &SimSetting,
    methods: &[Method],
    rep_seed: u64,
    analysis: &AnalysisConfig,
) -> Result<Vec<MethodOutcome>> {
    let data = generate(setting, derive_seed(rep_seed, DATA_STREAM));
    let beta = setting.beta_star;

    let needs_analysis = methods
        .iter()
        .any(|m| matches!(m, Method::Searching | Method::Sampling | Method::Naive));
    let analysis_result = if needs_analysis {
        let config = AnalysisConfig {
            seed: rep_seed,
            ..analysis.clone()
        };
        Some(analyze(AnalysisInput::Data(&data), &config)?)
    } else {
        None
    };

    methods
        .iter()
        .map(|method| -> Result<MethodOutcome> {
            match method {
                Method::Searching => {
                    let ci = &analysis_result.as_ref().expect("analysis ran").searching;
                    Ok(MethodOutcome {
                        contains: ci.contains(beta),
                        length: ci.width(),
                    })
                }
                Method::Sampling => {
                    let ci = &analysis_result.as_ref().expect("analysis ran").sampling.ci;
                    Ok(MethodOutcome {
                        contains: ci.contains(beta),
                        length: ci.width(),
                    })
                }
                Method::Oracle => {
                    let est = oracle_tsls(&data, &setting.true_valid_set(), analysis.alpha)?;
                    Ok(MethodOutcome {
                        contains: est.contains(beta),
                        length: Some(est.width()),
                    })
                }
                Method::Naive => {
                    let selection = &analysis_result.as_ref().expect("analysis ran").selection;
                    let est = post_selection_tsls(&data, selection, analysis.alpha)?;
                    Ok(MethodOutcome {
                        contains: est.contains(beta),
                        length: Some(est.width()),
                    })
                }
            }
        })
        .collect()
}

/// Replicated run with a custom per-replication runner; replications execute
/// in parallel but aggregation respects replication order, so results do not
/// depend on thread scheduling.
pub fn run_replications_with<F>(
    setting: &SimSetting,
    labels: &[String],
    reps: usize,
    master_seed: u64,
    runner: F,
) -> Result<SimReport>
where
    F: Fn(u64) -> Result<Vec<MethodOutcome>> + Sync,
{
    if reps == 0 {
        return Err(Error::Parameter("replication count must be at least 1".into()));
    }
    let start = Instant::now();
    let outcomes: Vec<Vec<MethodOutcome>> = (0..reps)
        .into_par_iter()
        .map(|r| runner(derive_seed(master_seed, r as u64)))
        .collect::<Result<_>>()?;

    let stats = labels
        .iter()
        .enumerate()
        .map(|(k, label)| {
            let mut covered = 0usize;
            let mut nonempty = 0usize;
            let mut total_len = 0.0f64;
            let mut empty = 0usize;
            for rep in &outcomes {
                let o = rep[k];
                if o.contains {
                    covered += 1;
                }
                match o.length {
                    Some(len) => {
                        nonempty += 1;
                        total_len += len;
                    }
                    None => empty += 1,
                }
            }
            MethodStats {
                method: label.clone(),
                coverage: covered as f64 / reps as f64,
                avg_length: if nonempty > 0 {
                    total_len / nonempty as f64
                } else {
                    0.0
                },
                empty_count: empty,
            }
        })
        .collect();

    Ok(SimReport {
        setting: setting.name.clone(),
        gamma0: setting.gamma0,
        tau: setting.tau,
        n: setting.n,
        reps,
        stats,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// Replicated run of the standard methods.
pub fn run_replications(
    setting: &SimSetting,
    methods: &[Method],
    reps: usize,
    master_seed: u64,
    analysis: &AnalysisConfig,
) -> Result<SimReport> {
    let labels: Vec<String> = methods.iter().map(|m| m.label().to_string()).collect();
    run_replications_with(setting, &labels, reps, master_seed, |rep_seed| {
        run_single(setting, methods, rep_seed, analysis)
    })
}

/// Output shape for [`emit_table`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Text,
}

/// Render reports as one row per (setting, tau, n) cell, sorted, with one
/// coverage/length/empty column triple per method. Numbers keep full
/// round-trip precision so CSV output re-parses exactly.
pub fn emit_table(reports: &[SimReport], format: TableFormat) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Parameter("no reports to tabulate".into()));
    }
    let labels: Vec<String> = reports[0].stats.iter().map(|s| s.method.clone()).collect();
    for report in reports {
        let these: Vec<String> = report.stats.iter().map(|s| s.method.clone()).collect();
        if these != labels {
            return Err(Error::Parameter(
                "reports carry different method sets; cannot tabulate together".into(),
            ));
        }
    }
    let mut sorted: Vec<&SimReport> = reports.iter().collect();
    sorted.sort_by(|a, b| {
        (a.setting.as_str(), a.tau, a.n)
            .partial_cmp(&(b.setting.as_str(), b.tau, b.n))
            .expect("finite keys")
    });

    let mut header = vec![
        "setting".to_string(),
        "gamma0".to_string(),
        "tau".to_string(),
        "n".to_string(),
        "reps".to_string(),
    ];
    for label in &labels {
        header.push(format!("{label}_coverage"));
        header.push(format!("{label}_length"));
        header.push(format!("{label}_empty"));
    }
    let rows: Vec<Vec<String>> = sorted
        .iter()
        .map(|r| {
            let mut row = vec![
                r.setting.clone(),
                r.gamma0.to_string(),
                r.tau.to_string(),
                r.n.to_string(),
                r.reps.to_string(),
            ];
            for s in &r.stats {
                row.push(s.coverage.to_string());
                row.push(s.avg_length.to_string());
                row.push(s.empty_count.to_string());
            }
            row
        })
        .collect();

    match format {
        TableFormat::Csv => {
            let mut out = Vec::new();
            {
                let mut writer = csv::Writer::from_writer(&mut out);
                writer.write_record(&header)?;
                for row in &rows {
                    writer.write_record(row)?;
                }
                writer.flush()?;
            }
            Ok(String::from_utf8(out).expect("csv is utf8"))
        }
        TableFormat::Text => {
            let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
            for row in &rows {
                for (i, cell) in row.iter().enumerate() {
                    widths[i] = widths[i].max(cell.len());
                }
            }
            let render = |cells: &[String]| -> String {
                cells
                    .iter()
                    .enumerate()
                    .map(|(i, c)| format!("{:>width$}", c, width = widths[i]))
                    .collect::<Vec<_>>()
                    .join("  ")
            };
            let mut out = render(&header);
            out.push('\n');
            for row in &rows {
                out.push_str(&render(row));
                out.push('\n');
            }
            Ok(out)
        }
    }
}
