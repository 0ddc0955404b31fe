//! Per-epoch training metrics: NDJSON ingestion and per-run retrieval.
//!
//! Wire format, one JSON object per line:
//! `{"epoch": <non-negative int>, "name": "<text>", "value": <finite number>}`
//! Extra keys are ignored so files from other tools can be dropped in.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{Store, StoreError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("not found: {0}")]
    NotFound(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub epoch: u64,
    pub name: String,
    pub value: f64,
}

/// All points of one metric within one task, epochs strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub run_id: String,
    pub step: String,
    pub name: String,
    pub points: Vec<MetricPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    /// One series per metric name, names ascending.
    pub series: Vec<MetricSeries>,
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct RawLine {
    epoch: i64,
    name: String,
    value: f64,
}

/// Parses a metrics NDJSON blob. All-or-nothing: the first malformed
/// line fails the whole file. Duplicate epochs within a metric keep the
/// last occurrence and produce a warning.
pub fn ingest_metrics_file(text: &str, run_id: &str, step: &str) -> Result<Ingested, MetricsError> {
    let mut by_name: BTreeMap<String, BTreeMap<u64, f64>> = BTreeMap::new();
    let mut warnings = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawLine = serde_json::from_str(line).map_err(|e| MetricsError::MalformedLine {
            line: line_no,
            reason: e.to_string(),
        })?;
        if raw.epoch < 0 {
            return Err(MetricsError::MalformedLine {
                line: line_no,
                reason: format!("epoch must be non-negative, got {}", raw.epoch),
            });
        }
        if !raw.value.is_finite() {
            return Err(MetricsError::MalformedLine {
                line: line_no,
                reason: "value is not a finite number".to_string(),
            });
        }
        let epochs = by_name.entry(raw.name.clone()).or_default();
        if epochs.insert(raw.epoch as u64, raw.value).is_some() {
            warnings.push(format!(
                "duplicate epoch {} for metric `{}`: keeping the last occurrence",
                raw.epoch, raw.name
            ));
        }
    }
    let series = by_name
        .into_iter()
        .map(|(name, epochs)| MetricSeries {
            run_id: run_id.to_string(),
            step: step.to_string(),
            name: name.clone(),
            points: epochs
                .into_iter()
                .map(|(epoch, value)| MetricPoint {
                    epoch,
                    name: name.clone(),
                    value,
                })
                .collect(),
        })
        .collect();
    Ok(Ingested { series, warnings })
}

/// Renders series back to the NDJSON wire format.
pub fn serialize_series(series: &[MetricSeries]) -> String {
    let mut out = String::new();
    for s in series {
        for p in &s.points {
            out.push_str(&format!(
                "{{\"epoch\": {}, \"name\": {}, \"value\": {}}}\n",
                p.epoch,
                serde_json::to_string(&p.name).expect("string serializes"),
                fmt_value(p.value),
            ));
        }
    }
    out
}

fn fmt_value(v: f64) -> String {
    // a bare integer like `7` survives the f64 round-trip as `7.0`,
    // so emit through serde_json for exact re-parsing
    serde_json::to_string(&v).expect("finite value serializes")
}

/// Fetches one metric's series for each run. Runs lacking the metric are
/// absent from the map; an unknown run id is an error. When several steps
/// of a run recorded the metric, the lexicographically first step wins.
pub fn series_for_runs(
    store: &Store,
    flow_name: &str,
    run_ids: &[String],
    metric: &str,
) -> Result<BTreeMap<String, MetricSeries>, MetricsError> {
    let mut out = BTreeMap::new();
    for run_id in run_ids {
        let run = store
            .load_run(flow_name, run_id)
            .map_err(|_| MetricsError::NotFound(format!("run {run_id} of flow `{flow_name}`")))?;
        // BTreeMap iteration gives steps in lexicographic order
        for (step, task) in &run.tasks {
            let Some(object) = &task.metrics else {
                continue;
            };
            let bytes = store.get_object(object)?;
            let Ok(text) = String::from_utf8(bytes) else {
                continue;
            };
            // failed tasks may have stored a partial, unvalidated file;
            // skip anything that no longer parses
            let Ok(ingested) = ingest_metrics_file(&text, run_id, step) else {
                continue;
            };
            if let Some(series) = ingested.series.into_iter().find(|s| s.name == metric) {
                out.insert(run_id.clone(), series);
                break;
            }
        }
    }
    Ok(out)
}

/// Adapter seam for experiment trackers: fetch the series a tracker
/// recorded under an external run key. The shipped implementation reads
/// the local run store; real tracker clients can plug in behind the same
/// contract.
pub trait ExperimentTracker {
    fn fetch_series(
        &self,
        run_key: &str,
        metric: &str,
    ) -> Result<Option<MetricSeries>, MetricsError>;
}

/// Tracker backed by the local store's metrics objects.
pub struct LocalRunTracker<'a> {
    pub store: &'a Store,
    pub flow_name: String,
}

impl ExperimentTracker for LocalRunTracker<'_> {
    fn fetch_series(
        &self,
        run_key: &str,
        metric: &str,
    ) -> Result<Option<MetricSeries>, MetricsError> {
        let mut found =
            series_for_runs(self.store, &self.flow_name, &[run_key.to_string()], metric)?;
        Ok(found.remove(run_key))
    }
}
