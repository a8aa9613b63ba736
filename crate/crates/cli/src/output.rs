//! JSON records emitted on stdout. Instrument indices are 1-based in every
//! user-facing document (matching the order of `--instruments`).

use riv_core::iv_select::{SelectionResult, SelectionSource};
use riv_core::pipeline::{AnalysisResult, FitSummary, Mode};
use riv_core::sampling::SamplingReport;
use riv_core::searching::Interval;
use serde::Serialize;

fn one_based(indices: &[usize]) -> Vec<usize> {
    indices.iter().map(|&i| i + 1).collect()
}

#[derive(Serialize)]
pub struct GridRecord {
    #[serde(rename = "L")]
    pub lower: f64,
    #[serde(rename = "U")]
    pub upper: f64,
    #[serde(rename = "a", skip_serializing_if = "Option::is_none")]
    pub exponent: Option<f64>,
    pub count: usize,
}

#[derive(Serialize)]
pub struct SearchingRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hi: Option<f64>,
    pub empty: bool,
    pub method: &'static str,
    pub alpha: f64,
    pub rho: f64,
    pub grid: GridRecord,
    pub valid_set: Vec<usize>,
}

#[derive(Serialize)]
pub struct BoundsRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hi: Option<f64>,
    pub empty: bool,
}

#[derive(Serialize)]
pub struct SamplingRecord {
    pub lambda: f64,
    #[serde(rename = "M")]
    pub samples: usize,
    pub nonempty_count: usize,
    pub ci: BoundsRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<Vec<BoundsRecord>>,
}

#[derive(Serialize)]
pub struct SelectionRecord {
    pub s_hat: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vote_counts: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_hat: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_tilde: Option<Vec<usize>>,
    pub v_hat: Vec<usize>,
    pub source: SelectionSource,
    /// Voting matrix rows; present only with --emit-selection.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pi: Option<Vec<Vec<u8>>>,
}

#[derive(Serialize)]
pub struct CiReport {
    pub searching: SearchingRecord,
    pub sampling: SamplingRecord,
    pub selection: SelectionRecord,
    pub fit: FitSummary,
    pub mode: Mode,
    pub alpha: f64,
    pub seed: u64,
    pub warnings: Vec<String>,
}

pub fn searching_record(
    interval: &Interval,
    alpha: f64,
    exponent: Option<f64>,
) -> SearchingRecord {
    SearchingRecord {
        lo: interval.lo,
        hi: interval.hi,
        empty: interval.empty,
        method: "searching",
        alpha,
        rho: interval.diagnostics.rho,
        grid: GridRecord {
            lower: interval.diagnostics.grid_lower,
            upper: interval.diagnostics.grid_upper,
            exponent,
            count: interval.diagnostics.grid_count,
        },
        valid_set: one_based(&interval.diagnostics.valid_set),
    }
}

pub fn sampling_record(report: &SamplingReport, emit_samples: bool) -> SamplingRecord {
    SamplingRecord {
        lambda: report.lambda_used,
        samples: report.intervals.len(),
        nonempty_count: report.nonempty.len(),
        ci: BoundsRecord {
            lo: report.ci.lo,
            hi: report.ci.hi,
            empty: report.ci.empty,
        },
        per_sample: emit_samples.then(|| {
            report
                .intervals
                .iter()
                .map(|entry| match entry {
                    Some((lo, hi)) => BoundsRecord {
                        lo: Some(*lo),
                        hi: Some(*hi),
                        empty: false,
                    },
                    None => BoundsRecord {
                        lo: None,
                        hi: None,
                        empty: true,
                    },
                })
                .collect()
        }),
    }
}

pub fn selection_record(selection: &SelectionResult, emit_matrix: bool) -> SelectionRecord {
    SelectionRecord {
        s_hat: one_based(&selection.s_hat),
        vote_counts: selection.vote_counts.clone(),
        w_hat: selection.w_hat.as_deref().map(one_based),
        v_tilde: selection.v_tilde.as_deref().map(one_based),
        v_hat: one_based(&selection.v_hat),
        source: selection.source,
        pi: match (&selection.pi_matrix, emit_matrix) {
            (Some(pi), true) => Some(
                (0..pi.nrows())
                    .map(|a| pi.row(a).iter().copied().collect())
                    .collect(),
            ),
            _ => None,
        },
    }
}

pub fn ci_report(result: &AnalysisResult, emit_selection: bool, emit_samples: bool) -> CiReport {
    CiReport {
        searching: searching_record(&result.searching, result.alpha, result.grid.exponent),
        sampling: sampling_record(&result.sampling, emit_samples),
        selection: selection_record(&result.selection, emit_selection),
        fit: result.fit.clone(),
        mode: result.mode,
        alpha: result.alpha,
        seed: result.seed,
        warnings: result.warnings.clone(),
    }
}

#[derive(Serialize)]
pub struct ErrorRecord<'a> {
    pub error: ErrorBody<'a>,
}

#[derive(Serialize)]
pub struct ErrorBody<'a> {
    pub kind: &'a str,
    pub message: String,
}

pub fn error_kind(err: &riv_core::Error) -> &'static str {
    use riv_core::Error as E;
    match err {
        E::Schema(_) => "schema",
        E::Parse { .. } => "parse",
        E::Dimension(_) => "dimension",
        E::Validation(_) => "validation",
        E::Matrix(_) => "matrix",
        E::SingularDesign(_) => "singular_design",
        E::NoRelevantInstruments { .. } => "no_relevant_instruments",
        E::Covariance(_) => "covariance",
        E::Division(_) => "division",
        E::Containment(_) => "containment",
        E::Parameter(_) => "parameter",
        E::Unsupported(_) => "unsupported",
        E::Tuning { .. } => "tuning",
        E::UnderIdentified(_) => "under_identified",
        E::Io(_) => "io",
        E::Csv(_) => "csv",
        E::Json(_) => "json",
    }
}
