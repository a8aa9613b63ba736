//! Uniformly valid confidence intervals for a scalar treatment effect when
//! some candidate instrumental variables may be invalid.
//!
//! The pipeline fits the reduced-form regressions of outcome and treatment on
//! all candidate instruments and covariates, screens instruments for
//! relevance, estimates an initial valid set by pairwise voting, and then
//! inverts a thresholded sparsity statistic over a grid of effect values into
//! a confidence interval. A resampling variant shrinks the thresholds and
//! aggregates per-draw intervals into a typically shorter interval. Both
//! constructions stay valid when the voted set absorbs instruments whose
//! invalidity is too small to detect, which is exactly where plain
//! post-selection inference breaks down.
//!
//! Entry points:
//! - [`pipeline::analyze`] runs everything on a dataset or summary statistics;
//! - [`sim::run_replications`] measures coverage and length over replicated
//!   draws from parameterized data-generating processes;
//! - the `riv` binary exposes both on the command line.

// Negated comparisons like `!(x > 0.0)` are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::too_many_arguments)]

pub mod data_io;
pub mod error;
pub mod iv_select;
mod mvn;
pub mod pipeline;
pub mod reduced_form;
pub mod sampling;
pub mod searching;
pub mod seed;
pub mod sim;

pub use data_io::{load_csv, load_summary, ColumnSchema, Dataset, SummaryStats};
pub use error::{Error, Result};
pub use pipeline::{analyze, AnalysisConfig, AnalysisInput, AnalysisResult, Mode};
pub use searching::{Interval, RhoMethod};
