//! Training traces: a fixed column layout, one row per logged step, written
//! as CSV with 17 significant digits so that values round-trip exactly.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

/// Default trailing window of the empirical average reward.
pub const J_WINDOW: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTrace {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// `t, J_hat, mu_1..mu_K, omega_{k}_{d}…, theta_{i}_{d}…` (1-based labels).
pub fn standard_columns(k: usize, feature_dim: usize, thetas: &[usize]) -> Vec<String> {
    let mut cols = vec!["t".to_string(), "J_hat".to_string()];
    cols.extend((1..=k).map(|c| format!("mu_{c}")));
    cols.extend(block_columns("omega", k, feature_dim));
    for (i, &dim) in thetas.iter().enumerate() {
        cols.extend((1..=dim).map(|d| format!("theta_{}_{d}", i + 1)));
    }
    cols
}

/// `{prefix}_{k}_{d}` for `k ∈ 1..=count`, `d ∈ 1..=dim`.
pub fn block_columns(prefix: &str, count: usize, dim: usize) -> Vec<String> {
    (1..=count).flat_map(|k| (1..=dim).map(move |d| format!("{prefix}_{k}_{d}"))).collect()
}

/// Float text with 17 significant digits; `t` is written as an integer.
pub fn format_value(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else {
        format!("{x:.16e}")
    }
}

impl TrainingTrace {
    pub fn new(columns: Vec<String>) -> Self {
        Self { columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }

    /// Columns whose names start with `prefix`.
    pub fn columns_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.columns.iter().filter(|c| c.starts_with(prefix)).cloned().collect()
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        let idx = self.column_index(name)?;
        self.rows.last().map(|r| r[idx])
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.columns.join(","))?;
        let t_is_first = self.columns.first().is_some_and(|c| c == "t");
        let mut line = String::new();
        for row in &self.rows {
            line.clear();
            for (j, x) in row.iter().enumerate() {
                if j > 0 {
                    line.push(',');
                }
                if j == 0 && t_is_first {
                    line.push_str(&format!("{}", *x as u64));
                } else {
                    line.push_str(&format_value(*x));
                }
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::InvalidArgument("empty trace file".into()))?;
        let columns: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        let mut trace = Self::new(columns);
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::InvalidArgument(format!("trace line {}: {e}", n + 2)))?;
            if row.len() != trace.columns.len() {
                return Err(Error::Shape(format!("trace line {} has {} fields", n + 2, row.len())));
            }
            trace.rows.push(row);
        }
        Ok(trace)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Running mean over the last `window` pushed values.
#[derive(Clone, Debug)]
pub struct TrailingMean {
    window: usize,
    values: VecDeque<f64>,
}

impl TrailingMean {
    pub fn new(window: usize) -> Self {
        Self { window: window.max(1), values: VecDeque::with_capacity(window.max(1)) }
    }

    pub fn push(&mut self, x: f64) {
        if self.values.len() == self.window {
            self.values.pop_front();
        }
        self.values.push_back(x);
    }

    /// NaN before the first value.
    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return f64::NAN;
        }
        // Summed in order so the value does not depend on history beyond the window.
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Whether iteration `iter` (0-based) ends on a logged step.
pub fn should_log(iter: u64, stride: u64, total: u64) -> bool {
    let t = iter + 1;
    t == total || (stride > 0 && t % stride == 0)
}
