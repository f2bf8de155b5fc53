//! Loading and validating variables × samples expression matrices.
//!
//! The canonical on-disk layout is a UTF-8 CSV whose first row is
//! `id,<sample_1>,...,<sample_n>` followed by one row per variable. Every
//! sample carries an *expression index*: the sum of all variable values in
//! that sample, used downstream as a pseudo-time axis.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest shape the modeling stages accept (variables, samples).
pub const MIN_MODEL_VARIABLES: usize = 2;
pub const MIN_MODEL_SAMPLES: usize = 3;

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Accept negative cells instead of rejecting the file.
    pub allow_negative: bool,
}

/// Dense m × n matrix, row-major, one row per variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionMatrix {
    variable_ids: Vec<String>,
    sample_ids: Vec<String>,
    values: Vec<f64>,
    index: Vec<f64>,
}

impl ExpressionMatrix {
    /// Builds a matrix from per-variable rows, computing the expression index.
    ///
    /// Only structural checks happen here (non-empty, rectangular, finite,
    /// unique ids, sign policy). Minimum sizes for modeling are enforced by
    /// [`ExpressionMatrix::require_model_shape`].
    pub fn new(
        variable_ids: Vec<String>,
        sample_ids: Vec<String>,
        rows: Vec<Vec<f64>>,
        opts: LoadOptions,
    ) -> Result<Self> {
        let m = variable_ids.len();
        let n = sample_ids.len();
        if m == 0 || n == 0 {
            return Err(Error::Validation("expression matrix is empty".into()));
        }
        if rows.len() != m {
            return Err(Error::Validation(format!(
                "{} variable ids but {} rows",
                m,
                rows.len()
            )));
        }
        check_unique("variable", &variable_ids)?;
        check_unique("sample", &sample_ids)?;

        let mut values = Vec::with_capacity(m * n);
        for (j, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Validation(format!(
                    "row {} ('{}') has {} values, expected {n}",
                    j + 1,
                    variable_ids[j],
                    row.len()
                )));
            }
            for (i, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row: j + 1,
                        column: i + 1,
                        message: format!("non-finite value {v}"),
                    });
                }
                if v < 0.0 && !opts.allow_negative {
                    return Err(Error::Parse {
                        row: j + 1,
                        column: i + 1,
                        message: format!("negative value {v} (pass allow_negative to accept)"),
                    });
                }
            }
            values.extend_from_slice(row);
        }
        let index = column_sums(&values, m, n);
        Ok(Self {
            variable_ids,
            sample_ids,
            values,
            index,
        })
    }

    /// Fails unless the matrix has at least 2 variables and 3 samples.
    pub fn require_model_shape(&self) -> Result<()> {
        if self.n_variables() < MIN_MODEL_VARIABLES || self.n_samples() < MIN_MODEL_SAMPLES {
            return Err(Error::Validation(format!(
                "modeling needs at least {MIN_MODEL_VARIABLES} variables and {MIN_MODEL_SAMPLES} samples, got {}x{}",
                self.n_variables(),
                self.n_samples()
            )));
        }
        Ok(())
    }

    pub fn n_variables(&self) -> usize {
        self.variable_ids.len()
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn variable_ids(&self) -> &[String] {
        &self.variable_ids
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    /// Per-sample expression index (column sums).
    pub fn index(&self) -> &[f64] {
        &self.index
    }

    pub fn row(&self, j: usize) -> &[f64] {
        let n = self.n_samples();
        &self.values[j * n..(j + 1) * n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n_samples())
    }

    pub fn get(&self, variable: usize, sample: usize) -> f64 {
        self.values[variable * self.n_samples() + sample]
    }

    pub fn variable_position(&self, id: &str) -> Option<usize> {
        self.variable_ids.iter().position(|v| v == id)
    }

    pub fn sample_position(&self, id: &str) -> Option<usize> {
        self.sample_ids.iter().position(|v| v == id)
    }

    /// Matrix restricted to the given variable rows (in the given order).
    /// The index of the result is recomputed from the retained rows.
    pub fn select_variables(&self, variables: &[usize]) -> Result<Self> {
        let rows = variables.iter().map(|&j| self.row(j).to_vec()).collect();
        let ids = variables
            .iter()
            .map(|&j| self.variable_ids[j].clone())
            .collect();
        Self::new(
            ids,
            self.sample_ids.clone(),
            rows,
            LoadOptions {
                allow_negative: true,
            },
        )
    }

    /// Serializes to the canonical CSV layout. Values use the shortest
    /// representation that parses back to the same `f64`.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("id");
        for s in &self.sample_ids {
            out.push(',');
            out.push_str(&csv_field(s));
        }
        out.push('\n');
        for (j, id) in self.variable_ids.iter().enumerate() {
            out.push_str(&csv_field(id));
            for v in self.row(j) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn check_unique(kind: &str, ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::Validation(format!("duplicate {kind} identifier '{id}'")));
        }
    }
    Ok(())
}

fn column_sums(values: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut sums = vec![0.0; n];
    for j in 0..m {
        for (i, s) in sums.iter_mut().enumerate() {
            *s += values[j * n + i];
        }
    }
    sums
}

/// Reads an expression matrix in the variables-in-rows CSV layout.
pub fn load_expression_matrix(path: impl AsRef<Path>, opts: LoadOptions) -> Result<ExpressionMatrix> {
    let file = std::fs::File::open(path.as_ref())?;
    read_expression_matrix(file, opts)
}

/// Parses the CSV layout from any reader. Parse errors report 1-based
/// coordinates within the numeric body (row = variable, column = sample).
pub fn read_expression_matrix<R: Read>(reader: R, opts: LoadOptions) -> Result<ExpressionMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(rec) => rec?,
        None => return Err(Error::Validation("expression matrix is empty".into())),
    };
    if header.len() < 2 {
        return Err(Error::Validation(
            "header must be `id,<sample_1>,...,<sample_n>` with at least one sample".into(),
        ));
    }
    let sample_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let n = sample_ids.len();

    let mut variable_ids = Vec::new();
    let mut rows = Vec::new();
    for (r, rec) in records.enumerate() {
        let rec = rec?;
        let row_no = r + 1;
        if rec.len() == 1 && rec.get(0).is_some_and(str::is_empty) {
            continue;
        }
        if rec.len() != n + 1 {
            return Err(Error::Validation(format!(
                "row {row_no} has {} value cells, header declares {n} samples",
                rec.len().saturating_sub(1)
            )));
        }
        variable_ids.push(rec[0].to_string());
        let mut row = Vec::with_capacity(n);
        for (c, cell) in rec.iter().skip(1).enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: row_no,
                column: c + 1,
                message: format!("'{cell}' is not a number"),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    ExpressionMatrix::new(variable_ids, sample_ids, rows, opts)
}

/// Sum of all variables per sample.
pub fn expression_index(matrix: &ExpressionMatrix) -> Vec<f64> {
    matrix.index.clone()
}

/// The expression index affinely mapped onto [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledIndex {
    pub raw: Vec<f64>,
    pub scaled: Vec<f64>,
    /// Sample positions sorted by ascending raw index (stable).
    pub order: Vec<usize>,
}

impl ScaledIndex {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.raw[self.order[0]]
    }

    pub fn max(&self) -> f64 {
        self.raw[*self.order.last().expect("non-empty")]
    }

    /// Maps a raw index value onto the scaled axis.
    pub fn to_scaled(&self, e: f64) -> f64 {
        let (lo, hi) = (self.min(), self.max());
        2.0 * (e - lo) / (hi - lo) - 1.0
    }
}

/// Rescales `e` so that min ↦ -1 and max ↦ +1.
pub fn scale_index(e: &[f64]) -> Result<ScaledIndex> {
    if e.len() < 2 {
        return Err(Error::Degenerate(format!(
            "need at least 2 index values, got {}",
            e.len()
        )));
    }
    if let Some(bad) = e.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite index value {bad}")));
    }
    let mut order: Vec<usize> = (0..e.len()).collect();
    order.sort_by(|&a, &b| e[a].total_cmp(&e[b]));
    let lo = e[order[0]];
    let hi = e[*order.last().unwrap()];
    if hi <= lo {
        return Err(Error::Degenerate(format!(
            "expression index is constant ({lo})"
        )));
    }
    let width = hi - lo;
    let scaled = e
        .iter()
        .map(|&v| {
            if v == lo {
                -1.0
            } else if v == hi {
                1.0
            } else {
                (2.0 * (v - lo) / width - 1.0).clamp(-1.0, 1.0)
            }
        })
        .collect();
    Ok(ScaledIndex {
        raw: e.to_vec(),
        scaled,
        order,
    })
}
