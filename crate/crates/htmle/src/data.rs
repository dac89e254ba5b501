//! Dataset representation, two-part decomposition, outcome scaling, and CSV
//! ingestion.
//!
//! The central type is [`TwoPartDataset`]: covariates `X`, treatment `T`,
//! and a non-negative outcome `Y` stored together with its derived
//! decomposition `Δ = 1(Y > 0)` and `S = Y` on `{Δ = 1}`. Datasets are
//! immutable after construction, so they can be shared freely across
//! concurrent replicate workers.

use nalgebra::DMatrix;
use std::fmt;
use std::path::Path;
use thiserror::Error;

/// Errors from dataset construction, scaling, and CSV ingestion.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("outcome[{index}] = {value} is negative; outcomes must be non-negative")]
    NegativeOutcome { index: usize, value: f64 },
    #[error("outcome[{index}] is not finite")]
    NonFiniteOutcome { index: usize },
    #[error("non-finite value in {what} at row {index}")]
    NonFiniteInput { what: &'static str, index: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("length mismatch: x has {x_rows} rows, t has {t_len}, y has {y_len}")]
    LengthMismatch {
        x_rows: usize,
        t_len: usize,
        y_len: usize,
    },
    #[error("no positive outcomes; the intensity model cannot be fit")]
    NoPositiveOutcomes,
    #[error("scaler pad must be positive and finite, got {0}")]
    InvalidPad(f64),
    #[error("failed to read CSV {path}: {source}")]
    CsvRead {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("failed to write CSV {path}: {source}")]
    CsvWrite {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("CSV file {path} has no data rows")]
    CsvEmpty { path: String },
    #[error("column '{column}' not found; available: {available}")]
    MissingColumn { column: String, available: String },
    #[error("cell at data row {row}, column '{column}' is not numeric: '{value}'")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("CSV rows have inconsistent field counts at data row {row}")]
    RaggedRow { row: usize },
}

/// Observations of `(X, T, Y)` with the derived two-part decomposition.
///
/// Invariants established at construction: all `y[i] ≥ 0` and finite,
/// `delta[i] = 1` exactly when `y[i] > 0`, `s[i] = y[i]` on `{delta = 1}`
/// and `NaN` (undefined marker) elsewhere, and all lengths agree.
#[derive(Debug, Clone)]
pub struct TwoPartDataset {
    x: DMatrix<f64>,
    t: Vec<f64>,
    y: Vec<f64>,
    delta: Vec<u8>,
    s: Vec<f64>,
}

impl TwoPartDataset {
    /// Build a dataset from a covariate matrix, treatment vector, and
    /// non-negative outcome vector, deriving `delta` and `s`.
    pub fn new(x: DMatrix<f64>, t: Vec<f64>, y: Vec<f64>) -> Result<Self, DataError> {
        if y.is_empty() {
            return Err(DataError::Empty);
        }
        if x.nrows() != y.len() || t.len() != y.len() {
            return Err(DataError::LengthMismatch {
                x_rows: x.nrows(),
                t_len: t.len(),
                y_len: y.len(),
            });
        }
        for (i, v) in t.iter().enumerate() {
            if !v.is_finite() {
                return Err(DataError::NonFiniteInput {
                    what: "treatment",
                    index: i,
                });
            }
        }
        for (i, row) in x.row_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFiniteInput {
                    what: "covariates",
                    index: i,
                });
            }
        }
        let (delta, s) = decompose(&y)?;
        Ok(Self { x, t, y, delta, s })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Indicator `1(Y > 0)` per observation.
    pub fn delta(&self) -> &[u8] {
        &self.delta
    }

    /// Value of `Y` where positive; `NaN` marks undefined entries.
    pub fn s(&self) -> &[f64] {
        &self.s
    }

    /// Indices of observations with a positive outcome.
    pub fn positive_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.delta[i] == 1).collect()
    }
}

/// Split a non-negative outcome into its zero indicator and positive part.
///
/// `delta[i] = 1` iff `y[i] > 0`; `s[i] = y[i]` there and `NaN` elsewhere.
/// Rejects negative or non-finite entries, reporting the offending index.
pub fn decompose(y: &[f64]) -> Result<(Vec<u8>, Vec<f64>), DataError> {
    let mut delta = Vec::with_capacity(y.len());
    let mut s = Vec::with_capacity(y.len());
    for (i, &v) in y.iter().enumerate() {
        if !v.is_finite() {
            return Err(DataError::NonFiniteOutcome { index: i });
        }
        if v < 0.0 {
            return Err(DataError::NegativeOutcome { index: i, value: v });
        }
        if v > 0.0 {
            delta.push(1);
            s.push(v);
        } else {
            delta.push(0);
            s.push(f64::NAN);
        }
    }
    Ok((delta, s))
}

/// Affine map taking the outcome onto `(0, 1)` for logistic tilting.
///
/// The lower bound is fixed at the natural zero of the outcome, so scaling
/// is purely multiplicative (`y_s = y / upper`) and the positive part stays
/// strictly inside `(0, 1)` thanks to the pad on the upper bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeScaler {
    upper: f64,
    pad: f64,
}

/// Default pad fraction applied to the sample maximum.
pub const DEFAULT_PAD: f64 = 0.001;

impl OutcomeScaler {
    /// Fit the scaler: `upper = max(y) · (1 + pad)`.
    ///
    /// Errors if there is no positive outcome to anchor the bound.
    pub fn fit(y: &[f64], delta: &[u8], pad: f64) -> Result<Self, DataError> {
        if !(pad.is_finite() && pad > 0.0) {
            return Err(DataError::InvalidPad(pad));
        }
        let mut max = f64::NEG_INFINITY;
        let mut any_positive = false;
        for (v, d) in y.iter().zip(delta) {
            if *d == 1 {
                any_positive = true;
                if *v > max {
                    max = *v;
                }
            }
        }
        if !any_positive {
            return Err(DataError::NoPositiveOutcomes);
        }
        Ok(Self {
            upper: max * (1.0 + pad),
            pad,
        })
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    /// Map one outcome value to the scaled scale, clamping values above the
    /// fitted bound to 1 (callers that resample from the original data never
    /// trigger the clamp because the scaler is fit before any resampling).
    pub fn scale_value(&self, y: f64) -> f64 {
        (y / self.upper).min(1.0)
    }

    /// Map a scaled value back to outcome units.
    pub fn unscale_value(&self, y_s: f64) -> f64 {
        y_s * self.upper
    }

    /// Scale a whole vector; the second element counts clamped entries so
    /// callers can surface a warning when inputs exceed the fitted bound.
    pub fn scale_all(&self, y: &[f64]) -> (Vec<f64>, usize) {
        let mut clamped = 0;
        let values = y
            .iter()
            .map(|&v| {
                if v > self.upper {
                    clamped += 1;
                }
                self.scale_value(v)
            })
            .collect();
        (values, clamped)
    }
}

/// A loaded CSV file: header names plus numeric columns.
///
/// Kept as a separate step from [`TwoPartDataset`] so callers can pull
/// auxiliary columns (for example a per-observation shift cap) out of the
/// same file.
#[derive(Debug, Clone)]
pub struct CsvFile {
    headers: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl CsvFile {
    /// Read a headered CSV of numeric cells. Decimal point '.', no
    /// thousands separators; any missing or non-numeric cell is an error
    /// locating the data row (1-based) and column.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let display = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|source| DataError::CsvRead {
                path: display.clone(),
                source,
            })?;
        let headers: Vec<String> = reader
            .headers()
            .map_err(|source| DataError::CsvRead {
                path: display.clone(),
                source,
            })?
            .iter()
            .map(|h| h.to_string())
            .collect();
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
        for (row_idx, record) in reader.records().enumerate() {
            let record = record.map_err(|source| DataError::CsvRead {
                path: display.clone(),
                source,
            })?;
            if record.len() != headers.len() {
                return Err(DataError::RaggedRow { row: row_idx + 1 });
            }
            for (col_idx, cell) in record.iter().enumerate() {
                let parsed: f64 = cell.parse().map_err(|_| DataError::NonNumericCell {
                    row: row_idx + 1,
                    column: headers[col_idx].clone(),
                    value: cell.to_string(),
                })?;
                if !parsed.is_finite() {
                    return Err(DataError::NonNumericCell {
                        row: row_idx + 1,
                        column: headers[col_idx].clone(),
                        value: cell.to_string(),
                    });
                }
                columns[col_idx].push(parsed);
            }
        }
        if columns.first().is_none_or(|c| c.is_empty()) {
            return Err(DataError::CsvEmpty { path: display });
        }
        Ok(Self { headers, columns })
    }

    pub fn headers(&self) -> &[String] {
        &self.headers
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    /// Look up a column by name.
    pub fn column(&self, name: &str) -> Result<&[f64], DataError> {
        let idx = self
            .headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn {
                column: name.to_string(),
                available: self.headers.join(", "),
            })?;
        Ok(&self.columns[idx])
    }

    /// Assemble a dataset from named outcome, treatment, and covariate
    /// columns.
    pub fn to_dataset(
        &self,
        outcome: &str,
        treatment: &str,
        covariates: &[String],
    ) -> Result<TwoPartDataset, DataError> {
        let y = self.column(outcome)?.to_vec();
        let t = self.column(treatment)?.to_vec();
        let n = self.n_rows();
        let mut x = DMatrix::zeros(n, covariates.len());
        for (j, name) in covariates.iter().enumerate() {
            let col = self.column(name)?;
            for (i, &v) in col.iter().enumerate() {
                x[(i, j)] = v;
            }
        }
        TwoPartDataset::new(x, t, y)
    }
}

/// Read a headered CSV straight into a dataset.
pub fn read_csv(
    path: &Path,
    outcome: &str,
    treatment: &str,
    covariates: &[String],
) -> Result<TwoPartDataset, DataError> {
    CsvFile::load(path)?.to_dataset(outcome, treatment, covariates)
}

/// Write a dataset as CSV with columns `y`, `t`, `x1..xp`; round-trips
/// through [`read_csv`].
pub fn write_csv(dataset: &TwoPartDataset, path: &Path) -> Result<(), DataError> {
    let display = path.display().to_string();
    let wrap = |source| DataError::CsvWrite {
        path: display.clone(),
        source,
    };
    let mut writer = csv::Writer::from_path(path).map_err(|source| DataError::CsvWrite {
        path: display.clone(),
        source,
    })?;
    let mut header = vec!["y".to_string(), "t".to_string()];
    header.extend((1..=dataset.n_covariates()).map(|j| format!("x{j}")));
    writer.write_record(&header).map_err(wrap)?;
    for i in 0..dataset.n() {
        let mut record = vec![
            format_cell(dataset.y()[i]),
            format_cell(dataset.t()[i]),
        ];
        for j in 0..dataset.n_covariates() {
            record.push(format_cell(dataset.x()[(i, j)]));
        }
        writer.write_record(&record).map_err(wrap)?;
    }
    writer.flush().map_err(|e| DataError::CsvWrite {
        path: display.clone(),
        source: csv::Error::from(e),
    })
}

fn format_cell(v: f64) -> String {
    // Shortest representation that parses back to the same f64.
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

/// Covariate column names used when a dataset has no CSV provenance.
pub fn default_covariate_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("x{j}")).collect()
}

impl fmt::Display for TwoPartDataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let positives = self.delta.iter().filter(|&&d| d == 1).count();
        write!(
            f,
            "TwoPartDataset(n={}, p={}, positive={})",
            self.n(),
            self.n_covariates(),
            positives
        )
    }
}
