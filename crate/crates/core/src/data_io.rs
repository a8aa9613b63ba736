//! Ingestion of raw observational data and of summary statistics.
//!
//! Raw data arrive as a headered CSV file with one outcome column, one
//! treatment column, one or more candidate-instrument columns and optional
//! baseline-covariate columns. Summary statistics arrive as a JSON document
//! carrying the cross-product matrices `W'W`, `W'Y`, `W'D` and noise-level
//! estimates, which is the common exchange format when raw data cannot be
//! shared (e.g. Mendelian randomization studies).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Maps file columns onto model roles. Instruments and covariates are named
/// explicitly; nothing is inferred from column order or prefixes.
#[derive(Debug, Clone)]
pub struct ColumnSchema {
    pub outcome: String,
    pub treatment: String,
    pub instruments: Vec<String>,
    pub covariates: Vec<String>,
}

impl ColumnSchema {
    pub fn new(
        outcome: impl Into<String>,
        treatment: impl Into<String>,
        instruments: Vec<String>,
        covariates: Vec<String>,
    ) -> Self {
        Self {
            outcome: outcome.into(),
            treatment: treatment.into(),
            instruments,
            covariates,
        }
    }
}

/// Canonical in-memory representation of raw observations.
///
/// Invariants (enforced on construction): all row counts agree, every entry is
/// finite, and `n >= p_z + p_x + 2` so the two reduced-form regressions retain
/// residual degrees of freedom.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    d: DVector<f64>,
    z: DMatrix<f64>,
    x: DMatrix<f64>,
}

impl Dataset {
    pub fn new(y: DVector<f64>, d: DVector<f64>, z: DMatrix<f64>, x: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        if d.len() != n || z.nrows() != n || (x.ncols() > 0 && x.nrows() != n) {
            return Err(Error::Dimension(format!(
                "row counts disagree: y has {}, d has {}, z has {}, x has {}",
                n,
                d.len(),
                z.nrows(),
                x.nrows()
            )));
        }
        if z.ncols() == 0 {
            return Err(Error::Schema("at least one instrument column is required".into()));
        }
        let p = z.ncols() + x.ncols();
        if n < p + 2 {
            return Err(Error::Dimension(format!(
                "n = {} rows but p_z + p_x + 2 = {} are required for OLS with residual degrees of freedom",
                n,
                p + 2
            )));
        }
        let finite = y.iter().all(|v| v.is_finite())
            && d.iter().all(|v| v.is_finite())
            && z.iter().all(|v| v.is_finite())
            && x.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Validation("dataset contains non-finite entries".into()));
        }
        // Normalize a 0-column x to have n rows so later concatenation is uniform.
        let x = if x.ncols() == 0 { DMatrix::zeros(n, 0) } else { x };
        Ok(Self { y, d, z, x })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p_z(&self) -> usize {
        self.z.ncols()
    }

    pub fn p_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn outcome(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn treatment(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn instruments(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// The combined design `W = (Z, X)`.
    pub fn design(&self) -> DMatrix<f64> {
        let n = self.n();
        let p = self.p_z() + self.p_x();
        let mut w = DMatrix::zeros(n, p);
        w.view_mut((0, 0), (n, self.p_z())).copy_from(&self.z);
        if self.p_x() > 0 {
            w.view_mut((0, self.p_z()), (n, self.p_x())).copy_from(&self.x);
        }
        w
    }

    /// Mean-center and unit-scale the instrument and covariate columns
    /// (sample standard deviation, `n - 1` denominator). Outcome and
    /// treatment are left untouched.
    pub fn standardized(&self) -> Result<Dataset> {
        let mut z = self.z.clone();
        let mut x = self.x.clone();
        for m in [&mut z, &mut x] {
            for mut col in m.column_iter_mut() {
                let n = col.len() as f64;
                let mean = col.sum() / n;
                col.add_scalar_mut(-mean);
                let sd = (col.norm_squared() / (n - 1.0)).sqrt();
                if sd == 0.0 {
                    return Err(Error::Validation(
                        "cannot standardize a constant column".into(),
                    ));
                }
                col /= sd;
            }
        }
        Dataset::new(self.y.clone(), self.d.clone(), z, x)
    }
}

/// Summary statistics sufficient to reproduce the reduced-form fit.
///
/// `p_z` records how many leading columns of `W` are instruments; when the
/// JSON document omits it, all columns are treated as instruments (`p_x = 0`).
#[derive(Debug, Clone)]
pub struct SummaryStats {
    pub n: usize,
    pub p_z: usize,
    pub wtw: DMatrix<f64>,
    pub wty: DVector<f64>,
    pub wtd: DVector<f64>,
    pub sigma_eps_sq: f64,
    pub sigma_delta_sq: f64,
    pub sigma_eps_delta: f64,
}

/// JSON wire format: matrices as row-major nested arrays.
#[derive(Debug, Serialize, Deserialize)]
struct SummaryStatsDoc {
    n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    p_z: Option<usize>,
    #[serde(rename = "WtW")]
    wtw: Vec<Vec<f64>>,
    #[serde(rename = "WtY")]
    wty: Vec<f64>,
    #[serde(rename = "WtD")]
    wtd: Vec<f64>,
    sigma_eps_sq: f64,
    sigma_delta_sq: f64,
    sigma_eps_delta: f64,
}

impl SummaryStats {
    /// Validate the structural invariants: `W'W` symmetric positive definite,
    /// positive noise variances, and the Cauchy-Schwarz bound on the noise
    /// covariance.
    pub fn validate(&self) -> Result<()> {
        let p = self.wtw.nrows();
        if self.wtw.ncols() != p {
            return Err(Error::Matrix("WtW must be square".into()));
        }
        if self.wty.len() != p || self.wtd.len() != p {
            return Err(Error::Dimension(format!(
                "WtY and WtD must have length {p} to match WtW"
            )));
        }
        if self.p_z == 0 || self.p_z > p {
            return Err(Error::Dimension(format!(
                "p_z = {} must lie in 1..={}",
                self.p_z, p
            )));
        }
        let scale = self.wtw.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
        let asym = (&self.wtw - self.wtw.transpose())
            .iter()
            .fold(0.0f64, |a, &v| a.max(v.abs()));
        if asym > 1e-10 * scale {
            return Err(Error::Matrix(format!(
                "WtW is not symmetric (max asymmetry {asym:e})"
            )));
        }
        if self.wtw.clone().cholesky().is_none() {
            return Err(Error::Matrix("WtW is not positive definite".into()));
        }
        if !(self.sigma_eps_sq > 0.0) || !(self.sigma_delta_sq > 0.0) {
            return Err(Error::Validation(
                "noise variances must be strictly positive".into(),
            ));
        }
        let bound = self.sigma_eps_sq * self.sigma_delta_sq;
        if self.sigma_eps_delta.powi(2) > bound * (1.0 + 1e-12) {
            return Err(Error::Validation(format!(
                "noise covariance {} violates the Cauchy-Schwarz bound sqrt({})",
                self.sigma_eps_delta,
                bound
            )));
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.wtw.nrows()
    }

    pub fn p_x(&self) -> usize {
        self.p() - self.p_z
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = SummaryStatsDoc {
            n: self.n,
            p_z: Some(self.p_z),
            wtw: (0..self.wtw.nrows())
                .map(|i| self.wtw.row(i).iter().copied().collect())
                .collect(),
            wty: self.wty.iter().copied().collect(),
            wtd: self.wtd.iter().copied().collect(),
            sigma_eps_sq: self.sigma_eps_sq,
            sigma_delta_sq: self.sigma_delta_sq,
            sigma_eps_delta: self.sigma_eps_delta,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SummaryStatsDoc = serde_json::from_str(text)?;
        let p = doc.wtw.len();
        if doc.wtw.iter().any(|row| row.len() != p) {
            return Err(Error::Matrix("WtW rows have unequal lengths".into()));
        }
        let wtw = DMatrix::from_fn(p, p, |i, j| doc.wtw[i][j]);
        let stats = SummaryStats {
            n: doc.n,
            p_z: doc.p_z.unwrap_or(p),
            wtw,
            wty: DVector::from_vec(doc.wty),
            wtd: DVector::from_vec(doc.wtd),
            sigma_eps_sq: doc.sigma_eps_sq,
            sigma_delta_sq: doc.sigma_delta_sq,
            sigma_eps_delta: doc.sigma_eps_delta,
        };
        stats.validate()?;
        Ok(stats)
    }
}

/// Load a headered CSV file according to `schema`.
///
/// Rows are kept in file order. Errors cite the 1-based data row and the
/// offending column. Missing cells are rejected, not imputed.
pub fn load_csv(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;

    let headers = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column '{name}' not found in header")))
    };

    if schema.instruments.is_empty() {
        return Err(Error::Schema("schema names no instrument columns".into()));
    }
    let y_idx = find(&schema.outcome)?;
    let d_idx = find(&schema.treatment)?;
    let z_idx: Vec<usize> = schema
        .instruments
        .iter()
        .map(|c| find(c))
        .collect::<Result<_>>()?;
    let x_idx: Vec<usize> = schema
        .covariates
        .iter()
        .map(|c| find(c))
        .collect::<Result<_>>()?;

    let mut y = Vec::new();
    let mut d = Vec::new();
    let mut z_rows: Vec<f64> = Vec::new();
    let mut x_rows: Vec<f64> = Vec::new();

    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let row = row_idx + 1;
        let cell = |idx: usize, column: &str| -> Result<f64> {
            let raw = record.get(idx).unwrap_or("");
            if raw.is_empty() {
                return Err(Error::Parse {
                    row,
                    column: column.to_string(),
                    message: "empty cell".into(),
                });
            }
            let value: f64 = raw.parse().map_err(|_| Error::Parse {
                row,
                column: column.to_string(),
                message: format!("'{raw}' is not a number"),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: column.to_string(),
                    message: format!("'{raw}' is not finite"),
                });
            }
            Ok(value)
        };

        y.push(cell(y_idx, &schema.outcome)?);
        d.push(cell(d_idx, &schema.treatment)?);
        for (k, &idx) in z_idx.iter().enumerate() {
            z_rows.push(cell(idx, &schema.instruments[k])?);
        }
        for (k, &idx) in x_idx.iter().enumerate() {
            x_rows.push(cell(idx, &schema.covariates[k])?);
        }
    }

    let n = y.len();
    let z = DMatrix::from_row_slice(n, z_idx.len(), &z_rows);
    let x = DMatrix::from_row_slice(n, x_idx.len(), &x_rows);
    Dataset::new(DVector::from_vec(y), DVector::from_vec(d), z, x)
}

/// Write a dataset back to CSV with the given column names. Numbers use the
/// shortest representation that round-trips, so reloading reproduces the
/// matrices bit for bit.
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<()> {
    if schema.instruments.len() != data.p_z() || schema.covariates.len() != data.p_x() {
        return Err(Error::Schema(format!(
            "schema names {} instruments and {} covariates but the dataset has {} and {}",
            schema.instruments.len(),
            schema.covariates.len(),
            data.p_z(),
            data.p_x()
        )));
    }
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec![schema.outcome.clone(), schema.treatment.clone()];
    header.extend(schema.instruments.iter().cloned());
    header.extend(schema.covariates.iter().cloned());
    writer.write_record(&header)?;
    for i in 0..data.n() {
        let mut record = vec![data.y[i].to_string(), data.d[i].to_string()];
        record.extend(data.z.row(i).iter().map(|v| v.to_string()));
        record.extend(data.x.row(i).iter().map(|v| v.to_string()));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Load and validate a summary-statistics JSON document.
pub fn load_summary(path: impl AsRef<Path>) -> Result<SummaryStats> {
    let text = std::fs::read_to_string(path.as_ref())?;
    SummaryStats::from_json(&text)
}

/// Write a summary-statistics JSON document.
pub fn save_summary(stats: &SummaryStats, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path.as_ref(), stats.to_json()?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn schema_yz() -> ColumnSchema {
        ColumnSchema::new("y", "d", vec!["z1".into()], vec![])
    }

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_csv_maps_columns() {
        let f = write_temp("y,d,z1\n1,2,3\n4,5,6\n7,8,9\n10,11,12\n");
        let data = load_csv(f.path(), &schema_yz()).unwrap();
        assert_eq!(data.n(), 4);
        assert_eq!(data.p_z(), 1);
        assert_eq!(data.p_x(), 0);
        assert_eq!(data.outcome()[0], 1.0);
        assert_eq!(data.treatment()[3], 11.0);
        assert_eq!(data.instruments()[(2, 0)], 9.0);
    }

    #[test]
    fn load_csv_blank_cell_cites_row() {
        let mut body = String::from("y,d,z1\n");
        for i in 1..=10 {
            if i == 7 {
                body.push_str("1,,3\n");
            } else {
                body.push_str("1,2,3\n");
            }
        }
        let f = write_temp(&body);
        let err = load_csv(f.path(), &schema_yz()).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 7);
                assert_eq!(column, "d");
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn load_csv_too_few_rows_is_dimension_error() {
        // n = p_z + p_x + 1 = 2 rows: one short of well-posed.
        let f = write_temp("y,d,z1\n1,2,3\n4,5,6\n");
        assert!(matches!(
            load_csv(f.path(), &schema_yz()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn load_csv_missing_column_is_schema_error() {
        let f = write_temp("y,d,z1\n1,2,3\n");
        let schema = ColumnSchema::new("y", "d", vec!["z9".into()], vec![]);
        assert!(matches!(load_csv(f.path(), &schema), Err(Error::Schema(_))));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let f = write_temp("y,d,z1\n1.25,-2.5,3.125\n0.1,0.2,0.3\n7,8,9\n-1e-3,2e8,0.625\n");
        let schema = schema_yz();
        let data = load_csv(f.path(), &schema).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_csv(&data, out.path(), &schema).unwrap();
        let reloaded = load_csv(out.path(), &schema).unwrap();
        assert_eq!(data, reloaded);
    }

    #[test]
    fn summary_identity_accepted() {
        let text = r#"{
            "n": 100,
            "WtW": [[1.0, 0.0], [0.0, 1.0]],
            "WtY": [1.0, 0.0],
            "WtD": [0.0, 1.0],
            "sigma_eps_sq": 1.0,
            "sigma_delta_sq": 1.0,
            "sigma_eps_delta": 0.0
        }"#;
        let stats = SummaryStats::from_json(text).unwrap();
        assert_eq!(stats.n, 100);
        assert_eq!(stats.p_z, 2, "p_z defaults to p when omitted");
    }

    #[test]
    fn summary_cauchy_schwarz_violation_rejected() {
        let text = r#"{
            "n": 100,
            "WtW": [[1.0, 0.0], [0.0, 1.0]],
            "WtY": [1.0, 0.0],
            "WtD": [0.0, 1.0],
            "sigma_eps_sq": 1.0,
            "sigma_delta_sq": 1.0,
            "sigma_eps_delta": 2.0
        }"#;
        assert!(matches!(
            SummaryStats::from_json(text),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn summary_indefinite_wtw_rejected() {
        // [[0.9, 1.0], [1.0, 0.9]] has eigenvalues 0.9 +- 1.0 = {1.9, -0.1}
        // by the characteristic polynomial (0.9 - l)^2 = 1.
        let text = r#"{
            "n": 100,
            "WtW": [[0.9, 1.0], [1.0, 0.9]],
            "WtY": [1.0, 0.0],
            "WtD": [0.0, 1.0],
            "sigma_eps_sq": 1.0,
            "sigma_delta_sq": 1.0,
            "sigma_eps_delta": 0.0
        }"#;
        assert!(matches!(
            SummaryStats::from_json(text),
            Err(Error::Matrix(_))
        ));
    }

    #[test]
    fn summary_asymmetric_wtw_rejected() {
        let text = r#"{
            "n": 100,
            "WtW": [[1.0, 0.5], [0.0, 1.0]],
            "WtY": [1.0, 0.0],
            "WtD": [0.0, 1.0],
            "sigma_eps_sq": 1.0,
            "sigma_delta_sq": 1.0,
            "sigma_eps_delta": 0.0
        }"#;
        assert!(matches!(
            SummaryStats::from_json(text),
            Err(Error::Matrix(_))
        ));
    }

    #[test]
    fn summary_json_round_trip() {
        let stats = SummaryStats {
            n: 50,
            p_z: 1,
            wtw: DMatrix::from_row_slice(2, 2, &[2.0, 0.25, 0.25, 3.0]),
            wty: DVector::from_vec(vec![1.5, -0.5]),
            wtd: DVector::from_vec(vec![0.25, 1.0]),
            sigma_eps_sq: 1.0,
            sigma_delta_sq: 2.0,
            sigma_eps_delta: 0.5,
        };
        let text = stats.to_json().unwrap();
        let back = SummaryStats::from_json(&text).unwrap();
        assert_eq!(back.p_z, 1);
        assert_eq!(back.wtw, stats.wtw);
        assert_eq!(back.wty, stats.wty);
    }

    #[test]
    fn standardize_centers_and_scales_instruments_only() {
        let f = write_temp("y,d,z1\n1,2,10\n4,5,20\n7,8,30\n10,11,40\n");
        let data = load_csv(f.path(), &schema_yz()).unwrap().standardized().unwrap();
        let z = data.instruments().column(0).clone_owned();
        let mean = z.sum() / 4.0;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
        // Outcome untouched.
        assert_eq!(data.outcome()[0], 1.0);
    }

    #[test]
    fn non_finite_rejected() {
        let y = DVector::from_vec(vec![1.0, f64::NAN, 3.0, 4.0]);
        let d = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let z = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(
            Dataset::new(y, d, z, DMatrix::zeros(4, 0)),
            Err(Error::Validation(_))
        ));
    }
}
