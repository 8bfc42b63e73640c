//! Routing statistics and the metrics log.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const METRICS_SCHEMA: &str = "modtune.metrics/1";

/// Fraction of weights strictly below `eps`.
pub fn sparsity(weights: &[f64], eps: f64) -> f64 {
    if weights.is_empty() {
        return 0.0;
    }
    weights.iter().filter(|&&w| w < eps).count() as f64 / weights.len() as f64
}

/// Mean and population variance.
pub fn route_stats(weights: &[f64]) -> (f64, f64) {
    if weights.is_empty() {
        return (0.0, 0.0);
    }
    let n = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / n;
    let var = weights.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Centered moving average; near the ends the window is truncated to the available
/// points. `window` must be odd.
pub fn smooth(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window % 2 == 0 {
        return Err(CoreError::Validation(format!("smoothing window must be odd, got {window}")));
    }
    let half = window / 2;
    let n = series.len();
    Ok((0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            series[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouteMetrics {
    pub loss: f64,
    pub sparsity: Option<f64>,
    pub mean: Option<f64>,
    pub var: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// `train`, `eval`, or `abort` for the record written before a numerical failure.
    pub split: String,
    pub loss_task: f64,
    pub loss_distill: f64,
    pub loss_total: f64,
    pub routes: Vec<RouteMetrics>,
    pub tokens_seen: u64,
}

fn header(k: usize) -> Vec<String> {
    let mut h: Vec<String> = ["step", "split", "loss_task", "loss_distill", "loss_total"].map(String::from).to_vec();
    for prefix in ["loss_route", "sparsity_route", "mean_route", "var_route"] {
        h.extend((0..k).map(|i| format!("{prefix}_{i}")));
    }
    h.push("tokens_seen".into());
    h
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// Appends records to a CSV file whose first line names the schema version.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
    routes: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path, routes: usize) -> Result<Self> {
        let mut f = File::create(path).map_err(|e| CoreError::io(path, e))?;
        writeln!(f, "#schema={METRICS_SCHEMA}").map_err(|e| CoreError::io(path, e))?;
        let mut inner = csv::Writer::from_writer(f);
        inner.write_record(header(routes))?;
        Ok(MetricsWriter { inner, routes })
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        if r.routes.len() != self.routes {
            return Err(CoreError::Validation(format!("record has {} routes, log has {}", r.routes.len(), self.routes)));
        }
        let mut row = vec![
            r.step.to_string(),
            r.split.clone(),
            format!("{:e}", r.loss_task),
            format!("{:e}", r.loss_distill),
            format!("{:e}", r.loss_total),
        ];
        row.extend(r.routes.iter().map(|m| format!("{:e}", m.loss)));
        row.extend(r.routes.iter().map(|m| fmt_opt(m.sparsity)));
        row.extend(r.routes.iter().map(|m| fmt_opt(m.mean)));
        row.extend(r.routes.iter().map(|m| fmt_opt(m.var)));
        row.push(r.tokens_seen.to_string());
        self.inner.write_record(&row)?;
        self.inner.flush().map_err(|e| CoreError::io("metrics.csv", e))?;
        Ok(())
    }
}

/// Reads a metrics log, rejecting any schema other than [`METRICS_SCHEMA`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut reader = BufReader::new(f);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| CoreError::io(path, e))?;
    let schema = first.trim().strip_prefix("#schema=").unwrap_or("");
    if schema != METRICS_SCHEMA {
        return Err(CoreError::Validation(format!(
            "{}: unsupported metrics schema {:?} (expected {METRICS_SCHEMA})",
            path.display(),
            first.trim()
        )));
    }
    let mut csv = csv::Reader::from_reader(reader);
    let cols = csv.headers()?.len();
    if cols < 6 || (cols - 6) % 4 != 0 {
        return Err(CoreError::Validation(format!("{}: malformed header with {cols} columns", path.display())));
    }
    let k = (cols - 6) / 4;
    let num = |s: &str, line: usize| -> Result<f64> {
        s.parse::<f64>().map_err(|_| CoreError::Validation(format!("{}: line {line}: bad number {s:?}", path.display())))
    };
    let opt = |s: &str, line: usize| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s, line).map(Some)
        }
    };
    let mut out = Vec::new();
    for (i, row) in csv.records().enumerate() {
        let row = row?;
        let line = i + 3;
        let field = |c: usize| row.get(c).unwrap_or("");
        let routes = (0..k)
            .map(|r| {
                Ok(RouteMetrics {
                    loss: num(field(5 + r), line)?,
                    sparsity: opt(field(5 + k + r), line)?,
                    mean: opt(field(5 + 2 * k + r), line)?,
                    var: opt(field(5 + 3 * k + r), line)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(MetricsRecord {
            step: num(field(0), line)? as usize,
            split: field(1).to_string(),
            loss_task: num(field(2), line)?,
            loss_distill: num(field(3), line)?,
            loss_total: num(field(4), line)?,
            routes,
            tokens_seen: num(field(5 + 4 * k), line)? as u64,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_example() {
        assert_eq!(smooth(&[0.0, 3.0, 0.0], 3).unwrap(), vec![1.5, 1.0, 1.5]);
        assert!(smooth(&[1.0], 2).is_err());
        assert_eq!(smooth(&[], 3).unwrap(), Vec::<f64>::new());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rec = MetricsRecord {
            step: 5,
            split: "eval".into(),
            loss_task: 1.25,
            loss_distill: 0.125,
            loss_total: 1.2500125,
            routes: vec![
                RouteMetrics { loss: 2.0, sparsity: Some(0.5), mean: Some(0.25), var: Some(0.01) },
                RouteMetrics { loss: 1.0, sparsity: None, mean: None, var: None },
            ],
            tokens_seen: 640,
        };
        let mut w = MetricsWriter::create(&p, 2).unwrap();
        w.write(&rec).unwrap();
        drop(w);
        assert_eq!(read_metrics(&p).unwrap(), vec![rec]);
        let text = std::fs::read_to_string(&p).unwrap().replace("metrics/1", "metrics/9");
        std::fs::write(&p, text).unwrap();
        assert!(matches!(read_metrics(&p), Err(CoreError::Validation(_))));
    }
}
