//! Black-box behavioral tests for a trained pipeline.
//!
//! Each case pipes its input text into a predict entrypoint (a shell
//! command, usually referencing run artifacts) and checks the captured
//! stdout against a simple expectation. Verdicts distinguish `fail`
//! (the model answered wrongly) from `error` (the harness or entrypoint
//! broke), so a card reader can tell regressions from plumbing.

use std::io::Write;
use std::process::{Command, Stdio};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{bind_template, ExecError};
use crate::flow::{ExpectKind, ValidatedFlow};
use crate::store::{RunRecord, RunStatus, Store, StoreError};

/// Stored `observed` text is capped at this many bytes; evaluation
/// always sees the full output.
const OBSERVED_CAP: usize = 4096;

#[derive(Debug, Error)]
pub enum BehaviorError {
    #[error("run {run_id} is not runnable for behavior tests: status is {status}")]
    NotRunnable { run_id: String, status: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseStatus {
    Pass,
    Fail,
    Error,
}

impl CaseStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CaseStatus::Pass => "pass",
            CaseStatus::Fail => "fail",
            CaseStatus::Error => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorResult {
    pub case: String,
    pub status: CaseStatus,
    pub observed: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BehaviorTotals {
    pub pass: usize,
    pub fail: usize,
    pub error: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorReport {
    pub run_id: String,
    pub results: Vec<BehaviorResult>,
    pub totals: BehaviorTotals,
}

impl BehaviorReport {
    pub fn cases(&self) -> usize {
        self.totals.pass + self.totals.fail + self.totals.error
    }
}

fn preview(text: &str) -> String {
    let trimmed = text.trim_end_matches(['\n', '\r']);
    let mut head: String = trimmed.chars().take(60).collect();
    if head.len() < trimmed.len() {
        head.push_str("...");
    }
    head
}

/// Pure verdict for one expectation. `Err` carries the fail reason.
pub fn evaluate_expectation(expect: &ExpectKind, observed: &str) -> Result<(), String> {
    match expect {
        ExpectKind::Equals(want) => {
            let got = observed.trim_end_matches(['\n', '\r']);
            let want = want.trim_end_matches(['\n', '\r']);
            if got == want {
                Ok(())
            } else {
                Err(format!(
                    "expected exactly `{want}`, got `{}`",
                    preview(observed)
                ))
            }
        }
        ExpectKind::Contains(want) => {
            if observed.contains(want.as_str()) {
                Ok(())
            } else {
                Err(format!("output does not contain `{want}`"))
            }
        }
        ExpectKind::Regex(pattern) => {
            let re = Regex::new(pattern).map_err(|e| format!("bad pattern `{pattern}`: {e}"))?;
            if re.is_match(observed) {
                Ok(())
            } else {
                Err(format!(
                    "no match for pattern `{pattern}` in `{}`",
                    preview(observed)
                ))
            }
        }
        ExpectKind::Approx { target, tol } => {
            let trimmed = observed.trim();
            let value: f64 = trimmed.parse().map_err(|_| {
                format!(
                    "expected a number within {tol} of {target}, got `{}`",
                    preview(observed)
                )
            })?;
            let delta = (value - target).abs();
            if delta <= *tol {
                Ok(())
            } else {
                Err(format!(
                    "|{value} - {target}| = {delta} exceeds tolerance {tol}"
                ))
            }
        }
    }
}

fn truncate_observed(text: String) -> String {
    if text.len() <= OBSERVED_CAP {
        return text;
    }
    let mut cut = OBSERVED_CAP;
    while !text.is_char_boundary(cut) {
        cut -= 1;
    }
    text[..cut].to_string()
}

fn run_case(
    name: &str,
    input: &str,
    via: &str,
    expect: &ExpectKind,
    flow: &ValidatedFlow,
    run: &RunRecord,
    store: &Store,
) -> BehaviorResult {
    let error = |detail: String, observed: String| BehaviorResult {
        case: name.to_string(),
        status: CaseStatus::Error,
        observed: truncate_observed(observed),
        detail: Some(detail),
    };

    let resolved = match bind_template(via, flow, run, store) {
        Ok(resolved) => resolved,
        Err(e @ (ExecError::UnknownPlaceholder { .. } | ExecError::UpstreamNotRun { .. })) => {
            return error(format!("via template: {e}"), String::new());
        }
        Err(e) => return error(format!("via template: {e}"), String::new()),
    };

    let child = Command::new("/bin/sh")
        .arg("-c")
        .arg(&resolved)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn();
    let mut child = match child {
        Ok(child) => child,
        Err(e) => return error(format!("failed to spawn entrypoint: {e}"), String::new()),
    };
    {
        // a closed pipe just means the entrypoint stopped reading early
        let mut stdin = child.stdin.take().expect("stdin piped");
        let _ = stdin.write_all(input.as_bytes());
    }
    let output = match child.wait_with_output() {
        Ok(output) => output,
        Err(e) => {
            return error(
                format!("failed to collect entrypoint output: {e}"),
                String::new(),
            )
        }
    };
    let observed = String::from_utf8_lossy(&output.stdout).into_owned();
    if !output.status.success() {
        let mut detail = match output.status.code() {
            Some(code) => format!("entrypoint exited with code {code}"),
            None => "entrypoint terminated by signal".to_string(),
        };
        let stderr = String::from_utf8_lossy(&output.stderr);
        if let Some(first) = stderr.lines().next() {
            detail.push_str(": ");
            detail.push_str(first);
        }
        return error(detail, observed);
    }

    match evaluate_expectation(expect, &observed) {
        Ok(()) => BehaviorResult {
            case: name.to_string(),
            status: CaseStatus::Pass,
            observed: truncate_observed(observed),
            detail: None,
        },
        Err(reason) => BehaviorResult {
            case: name.to_string(),
            status: CaseStatus::Fail,
            observed: truncate_observed(observed),
            detail: Some(reason),
        },
    }
}

/// Runs every behavior case of the flow against a successful run, in
/// declaration order, and persists the report as `behavior.json` in the
/// run directory.
pub fn run_behavior_suite(
    store: &Store,
    flow: &ValidatedFlow,
    run: &RunRecord,
) -> Result<BehaviorReport, BehaviorError> {
    if run.status != RunStatus::Success {
        return Err(BehaviorError::NotRunnable {
            run_id: run.run_id.clone(),
            status: run.status.as_str().to_string(),
        });
    }

    let mut results = Vec::new();
    let mut totals = BehaviorTotals::default();
    for case in &flow.spec.behaviors {
        let result = run_case(
            &case.name,
            &case.input,
            &case.via,
            &case.expect,
            flow,
            run,
            store,
        );
        match result.status {
            CaseStatus::Pass => totals.pass += 1,
            CaseStatus::Fail => totals.fail += 1,
            CaseStatus::Error => totals.error += 1,
        }
        results.push(result);
    }

    let report = BehaviorReport {
        run_id: run.run_id.clone(),
        results,
        totals,
    };
    store.write_run_json(&run.flow_name, &run.run_id, "behavior.json", &report)?;
    Ok(report)
}

/// Loads a previously persisted report, if the suite has been run.
pub fn load_behavior_report(
    store: &Store,
    flow_name: &str,
    run_id: &str,
) -> Result<Option<BehaviorReport>, StoreError> {
    store.read_run_json(flow_name, run_id, "behavior.json")
}
