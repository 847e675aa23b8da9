//! Multivariate observations, ranks and CSV ingestion.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row transform applied after column selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    None,
    /// Consecutive prices `(p_i, p_{i+1})` become `-log(p_{i+1} / p_i)`.
    NegativeLogReturn,
}

/// `n × d` matrix of finite observations, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    values: Vec<f64>,
    n: usize,
    d: usize,
    labels: Vec<String>,
}

impl DataMatrix {
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<String>) -> Result<Self> {
        let d = labels.len();
        if d == 0 {
            return Err(Error::invalid("data needs at least one column"));
        }
        if rows.len() < 2 {
            return Err(Error::invalid(format!(
                "data needs at least two rows, got {}",
                rows.len()
            )));
        }
        let mut values = Vec::with_capacity(rows.len() * d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: row.len(),
                });
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("row {i} contains {v}")));
            }
            values.extend_from_slice(row);
        }
        Ok(Self {
            values,
            n: rows.len(),
            d,
            labels,
        })
    }

    /// Builds a matrix from columns of equal length with generated labels `X1..Xd`.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let d = columns.len();
        let n = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != n) {
            return Err(Error::invalid("columns have different lengths"));
        }
        let rows: Vec<Vec<f64>> = (0..n).map(|i| columns.iter().map(|c| c[i]).collect()).collect();
        Self::from_rows(&rows, (1..=d).map(|j| format!("X{j}")).collect())
    }

    pub(crate) fn from_flat_unchecked(values: Vec<f64>, n: usize, d: usize) -> Self {
        debug_assert_eq!(values.len(), n * d);
        Self {
            values,
            n,
            d,
            labels: (1..=d).map(|j| format!("X{j}")).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.d + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, j)).collect()
    }

    pub fn column_index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownColumn(label.to_string()))
    }

    /// Rows selected by index, in the given order (used for bootstrap resamples).
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut values = Vec::with_capacity(rows.len() * self.d);
        for &i in rows {
            values.extend_from_slice(self.row(i));
        }
        Self {
            values,
            n: rows.len(),
            d: self.d,
            labels: self.labels.clone(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.labels)?;
        for i in 0..self.n {
            w.write_record(self.row(i).iter().map(|v| format!("{v:.17e}")))?;
        }
        w.flush().map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(())
    }
}

/// Columnwise ranks `R_ij = #{t : X_tj <= X_ij}`, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankMatrix {
    ranks: Vec<u32>,
    n: usize,
    d: usize,
}

impl RankMatrix {
    /// Wraps precomputed ranks; every entry must lie in `1..=n`.
    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if n == 0 || d == 0 {
            return Err(Error::invalid("rank matrix must be nonempty"));
        }
        let mut ranks = Vec::with_capacity(n * d);
        for row in rows {
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: row.len(),
                });
            }
            if row.iter().any(|&r| r == 0 || r as usize > n) {
                return Err(Error::invalid(format!("ranks must lie in 1..={n}")));
            }
            ranks.extend_from_slice(row);
        }
        Ok(Self { ranks, n, d })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.ranks[i * self.d..(i + 1) * self.d]
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.ranks[i * self.d + j]
    }

    pub fn column(&self, j: usize) -> Vec<u32> {
        (0..self.n).map(|i| self.get(i, j)).collect()
    }

    /// Restriction to a subset of columns.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let mut ranks = Vec::with_capacity(self.n * cols.len());
        for i in 0..self.n {
            ranks.extend(cols.iter().map(|&j| self.get(i, j)));
        }
        Self {
            ranks,
            n: self.n,
            d: cols.len(),
        }
    }
}

/// Ranks by the counting definition; tied values share the maximal rank of their block.
pub fn ranks(data: &DataMatrix) -> RankMatrix {
    let (n, d) = (data.n(), data.d());
    let mut out = vec![0u32; n * d];
    let mut order: Vec<usize> = (0..n).collect();
    for j in 0..d {
        order.sort_unstable_by(|&a, &b| data.get(a, j).total_cmp(&data.get(b, j)));
        let mut start = 0;
        while start < n {
            let v = data.get(order[start], j);
            let mut end = start + 1;
            while end < n && data.get(order[end], j) == v {
                end += 1;
            }
            for &i in &order[start..end] {
                out[i * d + j] = end as u32;
            }
            start = end;
        }
    }
    RankMatrix { ranks: out, n, d }
}

/// Options for [`ingest_csv`].
#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub delimiter: u8,
    pub transform: Transform,
    /// Multiplier applied after the transform (100 gives percent returns).
    pub scale: f64,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            delimiter: b',',
            transform: Transform::None,
            scale: 1.0,
        }
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(
        cell.trim().to_ascii_lowercase().as_str(),
        "" | "na" | "nan" | "null" | "." | "n/a"
    )
}

/// Reads the named columns of a headed CSV file.
///
/// Rows with a missing cell in any selected column are dropped before the
/// transform is applied.
pub fn ingest_csv(path: &Path, value_columns: &[&str], options: &CsvOptions) -> Result<DataMatrix> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .has_headers(true)
        .from_reader(file);
    let headers = reader.headers()?.clone();
    let idx = value_columns
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h.trim() == *c)
                .ok_or_else(|| Error::UnknownColumn(c.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    if idx.is_empty() {
        return Err(Error::invalid("no value columns selected"));
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(idx.len());
        let mut missing = false;
        for (&c, name) in idx.iter().zip(value_columns) {
            let cell = record.get(c).unwrap_or("");
            if is_missing(cell) {
                missing = true;
                break;
            }
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row: line + 1,
                column: name.to_string(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                missing = true;
                break;
            }
            row.push(v);
        }
        if !missing {
            rows.push(row);
        }
    }

    let rows = match options.transform {
        Transform::None => rows,
        Transform::NegativeLogReturn => {
            for (i, row) in rows.iter().enumerate() {
                if let Some((j, &v)) = row.iter().enumerate().find(|(_, &v)| v <= 0.0) {
                    return Err(Error::NonPositivePrice {
                        row: i + 1,
                        column: value_columns[j].to_string(),
                        value: v,
                    });
                }
            }
            negative_log_returns(&rows)
        }
    };
    let rows: Vec<Vec<f64>> = if options.scale == 1.0 {
        rows
    } else {
        rows.into_iter()
            .map(|r| r.into_iter().map(|v| v * options.scale).collect())
            .collect()
    };
    DataMatrix::from_rows(&rows, value_columns.iter().map(|s| s.to_string()).collect())
}

/// `-log(p_{i+1} / p_i)` for consecutive rows; the output has one row fewer.
pub fn negative_log_returns(prices: &[Vec<f64>]) -> Vec<Vec<f64>> {
    prices
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(p0, p1)| -(p1 / p0).ln()).collect())
        .collect()
}
