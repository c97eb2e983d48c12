//! Per-iteration metrics and their CSV persistence.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairness;
use crate::meta::EvalResult;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One row of `metrics.csv`. Field order is the column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub split: Split,
    /// Mean query cross-entropy.
    pub loss: f64,
    pub accuracy: f64,
    /// Mean signed query-set DBC.
    pub dbc_mean: f64,
    pub dbc_abs_mean: f64,
    /// Mean |DBC| on the support sets (after adaptation for fair MAML).
    pub support_dbc_abs_mean: f64,
    pub disparate_impact: f64,
    /// Fraction of episodes whose query constraint value is positive.
    pub constraint_violation_rate: f64,
    pub wall_time_ms: f64,
}

pub const METRICS_COLUMNS: [&str; 10] = [
    "iteration",
    "split",
    "loss",
    "accuracy",
    "dbc_mean",
    "dbc_abs_mean",
    "support_dbc_abs_mean",
    "disparate_impact",
    "constraint_violation_rate",
    "wall_time_ms",
];

impl MetricsRecord {
    pub fn from_results(iteration: usize, split: Split, results: &[EvalResult], wall_time_ms: f64) -> Self {
        let n = results.len().max(1) as f64;
        let mean = |f: fn(&EvalResult) -> f64| results.iter().map(f).sum::<f64>() / n;
        MetricsRecord {
            iteration,
            split,
            loss: mean(|r| r.query_loss),
            accuracy: mean(|r| r.accuracy),
            dbc_mean: mean(|r| r.fairness.dbc),
            dbc_abs_mean: mean(|r| r.fairness.abs_dbc),
            support_dbc_abs_mean: mean(|r| r.support_fairness.abs_dbc),
            disparate_impact: fairness::pooled_disparate_impact(results.iter().map(|r| &r.fairness)),
            constraint_violation_rate: results
                .iter()
                .filter(|r| r.fairness.constraint_value > 0.0)
                .count() as f64
                / n,
            wall_time_ms,
        }
    }

    /// Same record with the timing column zeroed.
    pub fn without_timing(&self) -> Self {
        MetricsRecord {
            wall_time_ms: 0.0,
            ..self.clone()
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Serde(e.to_string())
}

pub fn metrics_to_csv(records: &[MetricsRecord]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    if records.is_empty() {
        w.write_record(METRICS_COLUMNS).map_err(csv_err)?;
    }
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.iter().ne(METRICS_COLUMNS) {
        return Err(Error::Serde(format!("unexpected metrics columns: {headers:?}")));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn write_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    fs::write(path, metrics_to_csv(records)?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    metrics_from_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(i: usize, x: f64) -> MetricsRecord {
        MetricsRecord {
            iteration: i,
            split: Split::Val,
            loss: x,
            accuracy: 0.5,
            dbc_mean: -x / 7.0,
            dbc_abs_mean: x / 7.0,
            support_dbc_abs_mean: 0.1,
            disparate_impact: 1.0,
            constraint_violation_rate: 0.25,
            wall_time_ms: 3.75,
        }
    }

    #[test]
    fn header_matches_field_order() {
        let text = metrics_to_csv(&[record(0, 1.0)]).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_COLUMNS.join(","));
        let empty = metrics_to_csv(&[]).unwrap();
        assert_eq!(empty, format!("{}\n", METRICS_COLUMNS.join(",")));
        assert!(metrics_from_csv(&empty).unwrap().is_empty());
        assert!(!text.contains('\r'));
    }

    #[test]
    fn wrong_columns_rejected() {
        assert!(metrics_from_csv("iteration,split\n0,train\n").is_err());
    }

    proptest! {
        #[test]
        fn rows_parse_back_losslessly(xs in prop::collection::vec(-1e6f64..1e6, 1..20)) {
            let records: Vec<_> = xs.iter().enumerate().map(|(i, &x)| record(i, x)).collect();
            let back = metrics_from_csv(&metrics_to_csv(&records).unwrap()).unwrap();
            prop_assert_eq!(back, records);
        }
    }
}
