//! Matrix reports: rows are (model, dataset) pairs, columns are trainers.

use std::fmt::Write as _;

use super::{ExperimentRecord, Status};
use crate::error::{Error, Result};

pub const METRICS: [&str; 8] = [
    "train_acc",
    "test_acc",
    "loss",
    "total_wall_ms",
    "wall_ms_per_epoch",
    "param_count",
    "peak_aux_memory_bytes",
    "spike_sparsity",
];

#[derive(Debug, Clone, PartialEq)]
pub enum MatrixCell {
    Value(f64),
    NotSupported,
    Failed,
    /// No record for this pair, or the metric was not produced.
    Missing,
}

impl MatrixCell {
    fn csv(&self) -> String {
        match self {
            MatrixCell::Value(v) => format!("{v}"),
            MatrixCell::NotSupported => "N/S".into(),
            MatrixCell::Failed => "failed".into(),
            MatrixCell::Missing => String::new(),
        }
    }

    fn text(&self, metric: &str) -> String {
        match self {
            MatrixCell::Value(v) if metric.ends_with("_acc") || metric == "spike_sparsity" => format!("{v:.4}"),
            MatrixCell::Value(v) if metric == "loss" => format!("{v:.5}"),
            MatrixCell::Value(v) => format!("{v:.0}"),
            MatrixCell::Missing => "-".into(),
            other => other.csv(),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "N/S" => MatrixCell::NotSupported,
            "failed" => MatrixCell::Failed,
            "" => MatrixCell::Missing,
            v => MatrixCell::Value(
                v.parse()
                    .map_err(|_| Error::Format(format!("matrix cell `{v}` is not a number")))?,
            ),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixReport {
    pub metric: String,
    pub trainers: Vec<String>,
    /// `(model, dataset)`.
    pub rows: Vec<(String, String)>,
    /// `rows.len() × trainers.len()`.
    pub cells: Vec<Vec<MatrixCell>>,
}

fn push_unique(v: &mut Vec<String>, s: &str) {
    if !v.iter().any(|x| x == s) {
        v.push(s.to_string());
    }
}

fn check_metric(metric: &str) -> Result<()> {
    if METRICS.contains(&metric) {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "unknown metric `{metric}`; valid metrics: {}",
            METRICS.join(", ")
        )))
    }
}

/// Each cell shows the best trial's value, `N/S` for filtered cells and
/// `failed` when no trial finished.
pub fn report_matrix(records: &[ExperimentRecord], metric: &str) -> Result<MatrixReport> {
    check_metric(metric)?;
    let mut trainers = Vec::new();
    let mut rows: Vec<(String, String)> = Vec::new();
    for r in records {
        push_unique(&mut trainers, &r.trainer);
        let key = (r.model.clone(), r.dataset.clone());
        if !rows.contains(&key) {
            rows.push(key);
        }
    }
    let mut cells = vec![vec![MatrixCell::Missing; trainers.len()]; rows.len()];
    for (ri, (m, d)) in rows.iter().enumerate() {
        for (ti, t) in trainers.iter().enumerate() {
            let group: Vec<&ExperimentRecord> = records
                .iter()
                .filter(|r| &r.trainer == t && &r.model == m && &r.dataset == d)
                .collect();
            if group.is_empty() {
                continue;
            }
            cells[ri][ti] = if group.iter().any(|r| r.status == Status::NotSupported) {
                MatrixCell::NotSupported
            } else {
                let ok: Vec<&&ExperimentRecord> = group.iter().filter(|r| r.status == Status::Ok).collect();
                let pick = ok.iter().find(|r| r.best).or_else(|| {
                    ok.iter().max_by(|a, b| {
                        let (x, y) = (a.metric("test_acc").unwrap_or(0.0), b.metric("test_acc").unwrap_or(0.0));
                        x.total_cmp(&y)
                    })
                });
                match pick {
                    None => MatrixCell::Failed,
                    Some(r) => r.metric(metric).map_or(MatrixCell::Missing, MatrixCell::Value),
                }
            };
        }
    }
    Ok(MatrixReport {
        metric: metric.to_string(),
        trainers,
        rows,
        cells,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn split_csv_line(line: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', true) => quoted = false,
            ('"', false) if cur.is_empty() => quoted = true,
            (',', false) => out.push(std::mem::take(&mut cur)),
            (c, _) => cur.push(c),
        }
    }
    if quoted {
        return Err(Error::Format(format!("unterminated quote in `{line}`")));
    }
    out.push(cur);
    Ok(out)
}

impl MatrixReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,dataset");
        for t in &self.trainers {
            s.push(',');
            s.push_str(&csv_field(t));
        }
        s.push('\n');
        for ((m, d), row) in self.rows.iter().zip(&self.cells) {
            s.push_str(&csv_field(m));
            s.push(',');
            s.push_str(&csv_field(d));
            for c in row {
                s.push(',');
                s.push_str(&c.csv());
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str, metric: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.is_empty());
        let header = split_csv_line(lines.next().ok_or_else(|| Error::Format("empty matrix csv".into()))?)?;
        if header.len() < 2 || header[0] != "model" || header[1] != "dataset" {
            return Err(Error::Format("matrix csv must start with model,dataset".into()));
        }
        let trainers = header[2..].to_vec();
        let mut rows = Vec::new();
        let mut cells = Vec::new();
        for (i, line) in lines.enumerate() {
            let f = split_csv_line(line)?;
            if f.len() != header.len() {
                return Err(Error::Format(format!(
                    "matrix csv row {} has {} fields, header has {}",
                    i + 2,
                    f.len(),
                    header.len()
                )));
            }
            rows.push((f[0].clone(), f[1].clone()));
            cells.push(
                f[2..]
                    .iter()
                    .map(|c| MatrixCell::parse(c))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(MatrixReport {
            metric: metric.to_string(),
            trainers,
            rows,
            cells,
        })
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut grid: Vec<Vec<String>> = Vec::with_capacity(self.rows.len() + 1);
        let mut head = vec!["model".to_string(), "dataset".to_string()];
        head.extend(self.trainers.iter().cloned());
        grid.push(head);
        for ((m, d), row) in self.rows.iter().zip(&self.cells) {
            let mut line = vec![m.clone(), d.clone()];
            line.extend(row.iter().map(|c| c.text(&self.metric)));
            grid.push(line);
        }
        let cols = grid[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut s = format!("{}\n", self.metric);
        for r in &grid {
            let mut line = String::new();
            for (c, cell) in r.iter().enumerate() {
                if c > 0 {
                    line.push_str("  ");
                }
                if c < 2 {
                    let _ = write!(line, "{cell:<w$}", w = widths[c]);
                } else {
                    let _ = write!(line, "{cell:>w$}", w = widths[c]);
                }
            }
            s.push_str(line.trim_end());
            s.push('\n');
        }
        s
    }
}
