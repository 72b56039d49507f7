//! Column-oriented result tables persisted as CSV.

use std::io::Write;

use crate::{Error, Result};

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultTable {
    pub name: String,
    /// Name of an optional leading text column.
    label_column: Option<String>,
    labels: Vec<String>,
    columns: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl ResultTable {
    pub fn new<S: Into<String>>(name: S, columns: &[&str]) -> Self {
        Self {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            ..Default::default()
        }
    }

    /// Table whose rows start with a text label in column `label`.
    pub fn labeled<S: Into<String>>(name: S, label: &str, columns: &[&str]) -> Self {
        Self {
            label_column: Some(label.to_string()),
            ..Self::new(name, columns)
        }
    }

    pub fn with_columns<S: Into<String>>(name: S, columns: Vec<String>) -> Self {
        Self {
            name: name.into(),
            columns,
            ..Default::default()
        }
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn push(&mut self, row: Vec<f64>) -> Result<()> {
        if self.label_column.is_some() {
            return Err(Error::Domain(format!("table {} needs a row label", self.name)));
        }
        self.push_row(row)
    }

    pub fn push_labeled(&mut self, label: &str, row: Vec<f64>) -> Result<()> {
        if self.label_column.is_none() {
            return Err(Error::Domain(format!("table {} has no label column", self.name)));
        }
        self.push_row(row)?;
        self.labels.push(label.to_string());
        Ok(())
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::Domain(format!(
                "table {} has {} columns, row has {}",
                self.name,
                self.columns.len(),
                row.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|r| r[c]).collect())
    }

    /// Value of `column` in the rows labelled `label`.
    pub fn select(&self, label: &str, column: &str) -> Vec<f64> {
        let Some(c) = self.columns.iter().position(|n| n == column) else {
            return Vec::new();
        };
        self.labels
            .iter()
            .zip(&self.rows)
            .filter(|(l, _)| *l == label)
            .map(|(_, r)| r[c])
            .collect()
    }

    /// Writes an optional `# key=value` comment line, the header, then rows.
    pub fn write_csv<W: Write>(&self, mut w: W, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            writeln!(w, "# {c}")?;
        }
        match &self.label_column {
            Some(l) => writeln!(w, "{l},{}", self.columns.join(","))?,
            None => writeln!(w, "{}", self.columns.join(","))?,
        }
        for (i, r) in self.rows.iter().enumerate() {
            let line: Vec<String> = r.iter().map(|v| fmt_f64(*v)).collect();
            match self.labels.get(i) {
                Some(l) => writeln!(w, "{l},{}", line.join(","))?,
                None => writeln!(w, "{}", line.join(","))?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_precision() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 123456789.123456789, f64::MIN_POSITIVE] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
        }
    }

    #[test]
    fn rectangular() {
        let mut t = ResultTable::new("x", &["a", "b"]);
        t.push(vec![1.0, 2.0]).unwrap();
        assert!(t.push(vec![1.0]).is_err());
        let mut out = Vec::new();
        t.write_csv(&mut out, Some("config_hash=abc")).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert_eq!(s.lines().next().unwrap(), "# config_hash=abc");
        assert_eq!(s.lines().nth(1).unwrap(), "a,b");
        assert_eq!(t.column("b").unwrap(), vec![2.0]);

        let mut t = ResultTable::labeled("y", "variant", &["mse"]);
        assert!(t.push(vec![1.0]).is_err());
        t.push_labeled("rsf", vec![0.5]).unwrap();
        let mut out = Vec::new();
        t.write_csv(&mut out, None).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "variant,mse\nrsf,5.0000000000000000e-1\n");
        assert_eq!(t.select("rsf", "mse"), vec![0.5]);
    }
}
