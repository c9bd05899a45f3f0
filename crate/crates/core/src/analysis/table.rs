use std::path::Path;

use crate::error::{Error, Result};

/// Numeric table with named columns, one row per subject.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureTable {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl FeatureTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_column(mut self, name: &str, values: Vec<f64>) -> Result<Self> {
        self.push_column(name, values)?;
        Ok(self)
    }

    pub fn push_column(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if let Some(first) = self.columns.first() {
            if first.len() != values.len() {
                return Err(Error::LengthMismatch(first.len(), values.len()));
            }
        }
        if self.names.iter().any(|n| n == name) {
            return Err(Error::Config(format!("duplicate column {name:?}")));
        }
        self.names.push(name.to_string());
        self.columns.push(values);
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Values of a column, rejecting missing (NaN) entries.
    pub fn column(&self, name: &str) -> Result<&[f64]> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("unknown column {name:?}")))?;
        let col = &self.columns[i];
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("column {name:?} has missing or non-finite values")));
        }
        Ok(col)
    }

    /// Integer group labels from a numeric column.
    pub fn groups(&self, name: &str) -> Result<Vec<usize>> {
        self.column(name)?
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Domain(format!("column {name:?} holds non-integer group {v}")))
                }
            })
            .collect()
    }

    /// Reads a CSV with a header row; every cell must be numeric or empty
    /// (empty cells become NaN and are rejected when the column is used).
    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let names: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let mut columns = vec![Vec::new(); names.len()];
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            for (c, cell) in rec.iter().enumerate() {
                let cell = cell.trim();
                let v = if cell.is_empty() {
                    f64::NAN
                } else {
                    cell.parse::<f64>()
                        .map_err(|_| Error::format(path, format!("row {}: {:?} is not numeric", line + 2, cell)))?
                };
                columns[c].push(v);
            }
        }
        let mut t = Self::new();
        for (n, c) in names.iter().zip(columns) {
            t.push_column(n, c)?;
        }
        Ok(t)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.names)?;
        for r in 0..self.n_rows() {
            w.write_record(self.columns.iter().map(|c| c[r].to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}
