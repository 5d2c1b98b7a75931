use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive `[lo, hi]` bounds of a column, in data units.
pub type Bounds = (f64, f64);

/// In-memory columnar dataset of `n` rows by `d` real attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataTable {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    domain: Vec<Bounds>,
}

impl DataTable {
    /// Builds a table and derives each column's domain from its min/max.
    /// Empty columns get the degenerate domain `[0, 0]`.
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::Dimensionality(format!(
                "{} column names for {} columns",
                names.len(),
                columns.len()
            )));
        }
        let n = columns.first().map_or(0, Vec::len);
        for (name, col) in names.iter().zip(&columns) {
            if col.len() != n {
                return Err(Error::Dimensionality(format!(
                    "column `{name}` has {} rows, expected {n}",
                    col.len()
                )));
            }
            if let Some(bad) = col.iter().find(|v| !v.is_finite()) {
                return Err(Error::InvalidQuery(format!(
                    "column `{name}` holds non-finite value {bad}"
                )));
            }
        }
        let domain = columns
            .iter()
            .map(|col| {
                if col.is_empty() {
                    (0.0, 0.0)
                } else {
                    col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                        (lo.min(v), hi.max(v))
                    })
                }
            })
            .collect();
        Ok(Self { names, columns, domain })
    }

    /// Builds a table with default column names `c0, c1, ...`.
    pub fn from_columns(columns: Vec<Vec<f64>>) -> Result<Self> {
        let names = (0..columns.len()).map(|i| format!("c{i}")).collect();
        Self::new(names, columns)
    }

    /// Replaces the derived domain with explicit bounds, which must cover
    /// every stored value.
    pub fn with_domain(mut self, domain: Vec<Bounds>) -> Result<Self> {
        if domain.len() != self.columns.len() {
            return Err(Error::Dimensionality(format!(
                "{} domain bounds for {} columns",
                domain.len(),
                self.columns.len()
            )));
        }
        for (i, (&(lo, hi), derived)) in domain.iter().zip(&self.domain).enumerate() {
            if !(lo <= hi) {
                return Err(Error::Config(format!("column {i}: domain lo {lo} > hi {hi}")));
            }
            if !self.columns[i].is_empty() && (derived.0 < lo || derived.1 > hi) {
                return Err(Error::Config(format!(
                    "column {i}: domain [{lo}, {hi}] does not cover stored range [{}, {}]",
                    derived.0, derived.1
                )));
            }
        }
        self.domain = domain;
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, i: usize) -> &[f64] {
        &self.columns[i]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn domain(&self) -> &[Bounds] {
        &self.domain
    }

    /// Row `r` as a freshly allocated vector.
    pub fn row(&self, r: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[r]).collect()
    }

    /// Reads a CSV whose first row is a header and whose cells are all finite reals.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let names: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
        let mut columns = vec![Vec::new(); names.len()];
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            if record.len() != names.len() {
                return Err(Error::Parse(format!(
                    "row {}: {} cells for {} columns",
                    line + 1,
                    record.len(),
                    names.len()
                )));
            }
            for (col, cell) in columns.iter_mut().zip(record.iter()) {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("row {}: `{cell}` is not a real number", line + 1)))?;
                if !v.is_finite() {
                    return Err(Error::Parse(format!("row {}: non-finite cell `{cell}`", line + 1)));
                }
                col.push(v);
            }
        }
        Self::new(names, columns)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(&self.names)?;
        let mut record = Vec::with_capacity(self.n_cols());
        for r in 0..self.n_rows() {
            record.clear();
            record.extend(self.columns.iter().map(|c| c[r].to_string()));
            wtr.write_record(&record)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(File::open(path)?)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(File::create(path)?))
    }
}
