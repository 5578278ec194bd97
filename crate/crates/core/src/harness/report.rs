use std::io::Write;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Real(f64),
    Text(String),
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Int(v) => Some(*v as f64),
            Cell::Real(v) => Some(*v),
            Cell::Text(_) => None,
        }
    }

    pub fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Real(v) => format_sig6(*v),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Real(v)
    }
}

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::Int(v)
    }
}

impl From<u32> for Cell {
    fn from(v: u32) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

/// Ordered key/value pairs forming one CSV line.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportRow {
    pub cells: Vec<(String, Cell)>,
}

impl ReportRow {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: impl Into<Cell>) -> Self {
        self.cells.push((key.to_string(), value.into()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&Cell> {
        self.cells.iter().find(|(k, _)| k == key).map(|(_, c)| c)
    }

    pub fn real(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(Cell::as_f64)
    }

    pub fn keys(&self) -> Vec<&str> {
        self.cells.iter().map(|(k, _)| k.as_str()).collect()
    }
}

/// Rows sharing one key set, plus free-form summary lines written as trailing comments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub summary: Vec<(String, String)>,
}

impl Report {
    pub fn push(&mut self, row: ReportRow) -> Result<()> {
        if let Some(first) = self.rows.first() {
            if first.keys() != row.keys() {
                return Err(Error::invalid(format!(
                    "report row keys {:?} differ from {:?}",
                    row.keys(),
                    first.keys()
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column(&self, key: &str) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.real(key)).collect()
    }

    /// Writes `#`-prefixed config lines, one timestamp line, the CSV body and the summary.
    pub fn write_csv<W: Write>(&self, out: W, config: &[(String, String)], timestamp: bool) -> Result<()> {
        let mut out = out;
        for (k, v) in config {
            writeln!(out, "# {k} = {v}")?;
        }
        if timestamp {
            let secs = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            writeln!(out, "# generated_unix = {secs}")?;
        }
        {
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(&mut out);
            if let Some(first) = self.rows.first() {
                w.write_record(first.keys())?;
            }
            for row in &self.rows {
                w.write_record(row.cells.iter().map(|(_, c)| c.render()))?;
            }
            w.flush()?;
        }
        for (k, v) in &self.summary {
            writeln!(out, "# {k} = {v}")?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self, config: &[(String, String)]) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, config, false)?;
        String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Decimal rendering with six significant digits; scientific notation outside
/// `[1e-4, 1e6)`.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let mag = v.abs().log10().floor() as i32;
    if !(-4..6).contains(&mag) {
        return format!("{v:.5e}");
    }
    let decimals = (5 - mag).max(0) as usize;
    let s = format!("{v:.decimals$}");
    // A rounding carry (9.999995 → 10.00000) adds one digit; re-render at the new magnitude.
    let digits = s.chars().filter(char::is_ascii_digit).count() - leading_zeros(&s);
    if digits > 6 && decimals > 0 {
        let d = decimals - 1;
        return format!("{v:.d$}");
    }
    s
}

fn leading_zeros(s: &str) -> usize {
    s.chars()
        .filter(|c| c.is_ascii_digit())
        .take_while(|&c| c == '0')
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(format_sig6(0.123456789), "0.123457");
        assert_eq!(format_sig6(1.0), "1.00000");
        assert_eq!(format_sig6(123456.7), "123457");
        assert_eq!(format_sig6(-2.5e-7), "-2.50000e-7");
        assert_eq!(format_sig6(9.9999996), "10.0000");
        assert_eq!(format_sig6(0.0), "0");
    }

    #[test]
    fn csv_layout() {
        let mut r = Report::default();
        r.push(ReportRow::new().with("bits", 4u32).with("acc", 0.5)).unwrap();
        r.push(ReportRow::new().with("bits", 5u32).with("acc", 0.75)).unwrap();
        assert!(r.push(ReportRow::new().with("acc", 1.0)).is_err());
        r.summary.push(("auc".into(), "0.3".into()));
        let s = r.to_csv_string(&[("seed".into(), "1".into())]).unwrap();
        assert_eq!(s, "# seed = 1\nbits,acc\n4,0.500000\n5,0.750000\n# auc = 0.3\n");
    }
}
