//! DAG card assembly and rendering.
//!
//! A card is a single self-contained HTML document built from one flow
//! definition plus its run store: flow-level sections (description,
//! ownership, structure) and run-level sections covering the last k
//! completed runs (training info, loss chart, behavioral tests). The
//! renderer is deliberately boring: sorted traversals, fixed-precision
//! SVG, no scripts, no external references, so the same inputs always
//! produce the same bytes.

pub mod html;
pub mod svg;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::process::{Command, Stdio};

use thiserror::Error;

use crate::behavior::{load_behavior_report, BehaviorReport, CaseStatus};
use crate::exec::bind_template;
use crate::flow::{flow_fingerprint, ValidatedFlow};
use crate::metrics::{ingest_metrics_file, MetricSeries};
use crate::store::{RunRecord, RunStatus, Store, StoreError};

use html::{check_fragment, escape_html};

#[derive(Debug, Error)]
pub enum CardError {
    #[error("{0}")]
    Invalid(String),
    #[error("section `{id}` provider failed: {msg}")]
    Provider { id: String, msg: String },
    #[error("section `{id}` produced a malformed fragment: {msg}")]
    MalformedFragment { id: String, msg: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// The built-in sections, in card order.
pub const SECTION_IDS: [&str; 7] = [
    "title_menu",
    "description",
    "ownership",
    "structure_params",
    "training_info",
    "loss_chart",
    "behavioral_tests",
];

fn section_label(id: &str) -> String {
    match id {
        "title_menu" => "Overview".to_string(),
        "description" => "Description".to_string(),
        "ownership" => "Ownership".to_string(),
        "structure_params" => "Structure and parameters".to_string(),
        "training_info" => "Training info".to_string(),
        "loss_chart" => "Loss chart".to_string(),
        "behavioral_tests" => "Behavioral tests".to_string(),
        other => other.replace(['_', '-'], " "),
    }
}

/// Everything the card needs from one selected run.
#[derive(Debug, Clone)]
pub struct RunBundle {
    pub run: RunRecord,
    /// All metric series of the run, tasks in step-name order.
    pub metrics: Vec<MetricSeries>,
    /// The `loss` series, if any task recorded one.
    pub loss: Option<MetricSeries>,
    /// Verbatim content of the run's `summary` artifact.
    pub summary: Option<String>,
    pub behavior: Option<BehaviorReport>,
}

#[derive(Debug, Clone)]
pub struct CardModel {
    pub flow: ValidatedFlow,
    pub flow_name: String,
    pub doc: String,
    pub fingerprint: String,
    /// Built-in section ids in render order.
    pub sections: Vec<String>,
    pub k: usize,
    /// Newest first, at most k completed (success or failed) runs.
    pub selected: Vec<RunBundle>,
    /// Every recorded run, newest first, any status.
    pub all_runs: Vec<RunRecord>,
}

fn gather_bundle(store: &Store, run: RunRecord) -> Result<RunBundle, CardError> {
    let mut metrics = Vec::new();
    for (step, task) in &run.tasks {
        if let Some(object) = &task.metrics {
            let bytes = store.get_object(object)?;
            // stored metrics of failed tasks may be malformed; those
            // series are simply absent from the card
            if let Ok(text) = std::str::from_utf8(&bytes) {
                if let Ok(ingested) = ingest_metrics_file(text, &run.run_id, step) {
                    metrics.extend(ingested.series);
                }
            }
        }
    }
    let loss = metrics.iter().find(|s| s.name == "loss").cloned();
    let mut summary = None;
    'tasks: for task in run.tasks.values() {
        for artifact in &task.artifacts {
            if artifact.name == "summary" {
                let bytes = store.get_object(&artifact.object)?;
                summary = Some(String::from_utf8_lossy(&bytes).into_owned());
                break 'tasks;
            }
        }
    }
    let behavior = load_behavior_report(store, &run.flow_name, &run.run_id)?;
    Ok(RunBundle {
        run,
        metrics,
        loss,
        summary,
        behavior,
    })
}

/// Collects the model behind a card: the k most recent completed runs
/// with their metrics, summaries, and behavior reports, plus ownership
/// tallies over every recorded run.
pub fn build_card_model(
    store: &Store,
    flow: &ValidatedFlow,
    k: usize,
) -> Result<CardModel, CardError> {
    if k < 1 {
        return Err(CardError::Invalid("k must be at least 1".to_string()));
    }
    let all_runs = store.list_runs(&flow.spec.name)?;
    let mut selected = Vec::new();
    for run in all_runs
        .iter()
        .filter(|r| r.status != RunStatus::Running)
        .take(k)
    {
        selected.push(gather_bundle(store, run.clone())?);
    }
    Ok(CardModel {
        flow: flow.clone(),
        flow_name: flow.spec.name.clone(),
        doc: flow.spec.doc.clone(),
        fingerprint: flow_fingerprint(&flow.spec.source_text)
            .as_str()
            .to_string(),
        sections: SECTION_IDS.iter().map(|s| s.to_string()).collect(),
        k,
        selected,
        all_runs,
    })
}

/// What a section producer gets to work with.
pub struct RenderCtx<'a> {
    pub model: &'a CardModel,
    pub store: &'a Store,
    /// (id, label) of every section in the card, render order.
    pub sections: &'a [(String, String)],
}

type Producer = Box<dyn Fn(&RenderCtx) -> Result<String, CardError>>;

pub struct SectionProvider {
    pub id: String,
    producer: Producer,
}

impl SectionProvider {
    pub fn new(
        id: impl Into<String>,
        producer: impl Fn(&RenderCtx) -> Result<String, CardError> + 'static,
    ) -> SectionProvider {
        SectionProvider {
            id: id.into(),
            producer: Box::new(producer),
        }
    }
}

/// The seven built-in sections, in card order.
pub fn default_providers() -> Vec<SectionProvider> {
    vec![
        SectionProvider::new("title_menu", |ctx| Ok(render_title_menu(ctx))),
        SectionProvider::new("description", |ctx| Ok(render_description(ctx.model))),
        SectionProvider::new("ownership", |ctx| Ok(render_ownership(ctx.model))),
        SectionProvider::new("structure_params", |ctx| {
            Ok(render_structure_params(ctx.model))
        }),
        SectionProvider::new("training_info", |ctx| Ok(render_training_info(ctx.model))),
        SectionProvider::new("loss_chart", |ctx| Ok(render_loss_chart(ctx.model))),
        SectionProvider::new("behavioral_tests", |ctx| Ok(render_behavior(ctx.model))),
    ]
}

/// A section whose fragment is the stdout of a shell command. The
/// command may use the same placeholders as step commands; they resolve
/// against the newest selected run.
pub fn external_section(id: impl Into<String>, command: impl Into<String>) -> SectionProvider {
    let id = id.into();
    let command = command.into();
    let id_for_errors = id.clone();
    SectionProvider::new(id, move |ctx| {
        let provider_err = |msg: String| CardError::Provider {
            id: id_for_errors.clone(),
            msg,
        };
        let resolved = match ctx.model.selected.first() {
            Some(bundle) => bind_template(&command, &ctx.model.flow, &bundle.run, ctx.store)
                .map_err(|e| provider_err(e.to_string()))?,
            None => command.clone(),
        };
        let output = Command::new("/bin/sh")
            .arg("-c")
            .arg(&resolved)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .output()
            .map_err(|e| provider_err(format!("failed to spawn: {e}")))?;
        if !output.status.success() {
            let stderr = String::from_utf8_lossy(&output.stderr);
            let head = stderr.lines().next().unwrap_or("");
            return Err(provider_err(match output.status.code() {
                Some(code) if head.is_empty() => format!("command exited with code {code}"),
                Some(code) => format!("command exited with code {code}: {head}"),
                None => "command terminated by signal".to_string(),
            }));
        }
        Ok(String::from_utf8_lossy(&output.stdout).into_owned())
    })
}

fn render_title_menu(ctx: &RenderCtx) -> String {
    let model = ctx.model;
    let mut s = String::new();
    let _ = writeln!(s, "<h1>{}</h1>", escape_html(&model.flow_name));
    let _ = writeln!(
        s,
        "<p class=\"meta\">flow fingerprint <code>{}</code></p>",
        escape_html(&model.fingerprint)
    );
    let _ = writeln!(
        s,
        "<p class=\"meta\">covering the last {} completed runs</p>",
        model.k
    );
    s.push_str("<nav><ul>\n");
    for (id, label) in ctx.sections {
        if id == "title_menu" {
            continue;
        }
        let _ = writeln!(
            s,
            "<li><a href=\"#{}\">{}</a></li>",
            escape_html(id),
            escape_html(label)
        );
    }
    s.push_str("</ul></nav>");
    s
}

fn render_description(model: &CardModel) -> String {
    let mut s = String::from("<h2>Description</h2>\n");
    if model.doc.trim().is_empty() {
        s.push_str("<p class=\"placeholder\">no description provided</p>");
    } else {
        let _ = write!(
            s,
            "<p class=\"doc\">{}</p>",
            escape_html(&model.doc).replace('\n', "<br>\n")
        );
    }
    s
}

fn render_ownership(model: &CardModel) -> String {
    let mut s = String::from("<h2>Ownership</h2>\n");
    if model.all_runs.is_empty() {
        s.push_str("<p class=\"placeholder\">no runs yet</p>");
        return s;
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for run in &model.all_runs {
        *counts.entry(run.user.as_str()).or_insert(0) += 1;
    }
    let mut ordered: Vec<(String, usize)> = counts
        .into_iter()
        .map(|(user, n)| (user.to_string(), n))
        .collect();
    ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    s.push_str(&svg::bar_chart(&ordered));
    s.push_str("\n<table><tr><th>user</th><th>runs</th></tr>\n");
    for (user, n) in &ordered {
        let _ = writeln!(s, "<tr><td>{}</td><td>{n}</td></tr>", escape_html(user));
    }
    s.push_str("</table>");
    s
}

fn render_structure_params(model: &CardModel) -> String {
    let flow = &model.flow;
    let mut s = String::from("<h2>Structure and parameters</h2>\n<h3>Dependency graph</h3>\n");
    s.push_str(&svg::dag_svg(flow));

    s.push_str("\n<h3>Parameters</h3>\n");
    if flow.spec.params.is_empty() {
        s.push_str("<p class=\"placeholder\">no parameters declared</p>\n");
    } else {
        s.push_str(
            "<table><tr><th>name</th><th>kind</th><th>default</th><th>bound values</th></tr>\n",
        );
        for param in &flow.spec.params {
            let bound: BTreeSet<&str> = model
                .selected
                .iter()
                .filter_map(|b| b.run.param_bindings.get(&param.name))
                .map(|v| v.as_str())
                .collect();
            let bound = if bound.is_empty() {
                "-".to_string()
            } else {
                bound
                    .iter()
                    .map(|v| escape_html(v))
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            let _ = writeln!(
                s,
                "<tr><td>{}</td><td>{}</td><td>{}</td><td>{bound}</td></tr>",
                escape_html(&param.name),
                param.kind.as_str(),
                param
                    .default
                    .as_deref()
                    .map(escape_html)
                    .unwrap_or_else(|| "-".to_string()),
            );
        }
        s.push_str("</table>\n");
    }

    s.push_str("<h3>Input files</h3>\n");
    if flow.spec.inputs.is_empty() {
        s.push_str("<p class=\"placeholder\">no input files declared</p>");
    } else {
        s.push_str("<table><tr><th>name</th><th>declared path</th><th>snapshots</th></tr>\n");
        for input in &flow.spec.inputs {
            let objects: BTreeSet<&str> = model
                .selected
                .iter()
                .filter_map(|b| b.run.input_bindings.get(&input.name))
                .map(|a| a.object.as_str())
                .collect();
            let snapshots = if objects.is_empty() {
                "-".to_string()
            } else {
                objects
                    .iter()
                    .map(|o| format!("<code>{o}</code>"))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let _ = writeln!(
                s,
                "<tr><td>{}</td><td>{}</td><td>{snapshots}</td></tr>",
                escape_html(&input.name),
                escape_html(&input.path),
            );
        }
        s.push_str("</table>");
    }
    s
}

fn render_training_info(model: &CardModel) -> String {
    let mut s = String::from("<h2>Training info</h2>\n");
    if model.selected.is_empty() {
        s.push_str("<p class=\"placeholder\">no completed runs</p>");
        return s;
    }
    for bundle in &model.selected {
        let _ = write!(
            s,
            "<div class=\"run-block\">\n<h3>run {} ({})</h3>\n",
            escape_html(&bundle.run.run_id),
            bundle.run.status.as_str(),
        );
        if bundle.metrics.is_empty() {
            s.push_str("<p class=\"placeholder\">no metrics recorded</p>\n");
        } else {
            s.push_str(
                "<table><tr><th>step</th><th>metric</th><th>points</th><th>final value</th></tr>\n",
            );
            for series in &bundle.metrics {
                let last = series.points.last().expect("series are non-empty");
                let _ = writeln!(
                    s,
                    "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr>",
                    escape_html(&series.step),
                    escape_html(&series.name),
                    series.points.len(),
                    last.value,
                );
            }
            s.push_str("</table>\n");
        }
        match &bundle.summary {
            Some(text) => {
                let _ = write!(
                    s,
                    "<h4>architecture summary</h4>\n<pre>{}</pre>\n",
                    escape_html(text)
                );
            }
            None => s.push_str("<p class=\"placeholder\">no summary artifact</p>\n"),
        }
        s.push_str("</div>\n");
    }
    s.pop();
    s
}

fn render_loss_chart(model: &CardModel) -> String {
    let mut s = String::from("<h2>Loss chart</h2>\n");
    let series: Vec<(String, Vec<(u64, f64)>)> = model
        .selected
        .iter()
        .filter_map(|bundle| {
            bundle.loss.as_ref().map(|loss| {
                (
                    bundle.run.run_id.clone(),
                    loss.points.iter().map(|p| (p.epoch, p.value)).collect(),
                )
            })
        })
        .collect();
    if series.is_empty() {
        s.push_str("<p class=\"placeholder\">no metrics recorded</p>");
        return s;
    }
    s.push_str(&svg::line_chart(&series));
    s.push_str("\n<ul class=\"legend\">\n");
    for (i, (run_id, _)) in series.iter().enumerate() {
        let _ = writeln!(
            s,
            "<li><span class=\"swatch\" style=\"background:{}\"></span>run {}</li>",
            svg::color(i),
            escape_html(run_id)
        );
    }
    s.push_str("</ul>");
    s
}

fn render_behavior(model: &CardModel) -> String {
    let mut s = String::from("<h2>Behavioral tests</h2>\n");
    if model.selected.is_empty() {
        s.push_str("<p class=\"placeholder\">no completed runs</p>");
        return s;
    }
    for bundle in &model.selected {
        let _ = write!(
            s,
            "<div class=\"run-block\">\n<h3>run {}</h3>\n",
            escape_html(&bundle.run.run_id)
        );
        match &bundle.behavior {
            None => s.push_str("<p class=\"placeholder\">behavior suite not run</p>\n"),
            Some(report) => {
                let _ = writeln!(
                    s,
                    "<p class=\"totals\">{} passed, {} failed, {} errors</p>",
                    report.totals.pass, report.totals.fail, report.totals.error
                );
                if report.results.is_empty() {
                    s.push_str("<p class=\"placeholder\">no behavior cases declared</p>\n");
                } else {
                    s.push_str("<table><tr><th>case</th><th>status</th><th>detail</th></tr>\n");
                    for result in &report.results {
                        let status = result.status.as_str();
                        let detail = match result.status {
                            CaseStatus::Pass => String::new(),
                            _ => result.detail.clone().unwrap_or_default(),
                        };
                        let _ = writeln!(
                            s,
                            "<tr><td>{}</td><td class=\"status-{status}\">{status}</td><td>{}</td></tr>",
                            escape_html(&result.case),
                            escape_html(&detail),
                        );
                    }
                    s.push_str("</table>\n");
                }
            }
        }
        s.push_str("</div>\n");
    }
    s.pop();
    s
}

const CSS: &str = "\
body { font-family: Helvetica, Arial, sans-serif; margin: 2rem auto; max-width: 960px; padding: 0 1rem; color: #1a1a1a; line-height: 1.45; }
h1 { margin-bottom: 0.2rem; }
section { border-top: 1px solid #ddd; padding: 1rem 0; }
section:first-of-type { border-top: none; }
nav ul { list-style: none; padding: 0; display: flex; flex-wrap: wrap; gap: 0.75rem; }
nav a { text-decoration: none; color: #1f77b4; }
table { border-collapse: collapse; margin: 0.5rem 0; }
th, td { border: 1px solid #ccc; padding: 0.3rem 0.6rem; text-align: left; font-size: 0.9rem; vertical-align: top; }
th { background: #f2f5f9; }
pre { background: #f6f8fa; padding: 0.6rem; overflow-x: auto; }
code { background: #f6f8fa; padding: 0 0.2rem; word-break: break-all; }
svg { max-width: 100%; }
.placeholder { color: #777; font-style: italic; }
.meta { color: #555; margin: 0.1rem 0; }
.status-pass { color: #116329; font-weight: bold; }
.status-fail { color: #b35900; font-weight: bold; }
.status-error { color: #8b0000; font-weight: bold; }
.totals { font-weight: bold; }
.legend { list-style: none; padding: 0; display: flex; gap: 1rem; }
.swatch { display: inline-block; width: 1rem; height: 0.6rem; margin-right: 0.3rem; }
.run-block { margin-bottom: 1rem; }
";

/// Renders the final document. Providers must begin with the seven
/// built-in sections in order; extra sections follow and join the menu.
/// Output is byte-deterministic for a fixed model and provider list.
pub fn render_card(
    store: &Store,
    model: &CardModel,
    providers: &[SectionProvider],
) -> Result<String, CardError> {
    let ids: Vec<&str> = providers.iter().map(|p| p.id.as_str()).collect();
    if ids.len() < SECTION_IDS.len() || ids[..SECTION_IDS.len()] != SECTION_IDS {
        return Err(CardError::Invalid(
            "providers must start with the seven built-in sections in order".to_string(),
        ));
    }
    let mut seen = BTreeSet::new();
    for id in &ids {
        if !seen.insert(*id) {
            return Err(CardError::Invalid(format!("duplicate section id `{id}`")));
        }
    }

    let sections: Vec<(String, String)> = ids
        .iter()
        .map(|id| (id.to_string(), section_label(id)))
        .collect();
    let ctx = RenderCtx {
        model,
        store,
        sections: &sections,
    };

    let mut body = String::new();
    for provider in providers {
        let fragment = (provider.producer)(&ctx)?;
        check_fragment(&fragment).map_err(|msg| CardError::MalformedFragment {
            id: provider.id.clone(),
            msg,
        })?;
        let _ = write!(
            body,
            "<section id=\"{}\">\n{}\n</section>\n",
            escape_html(&provider.id),
            fragment
        );
    }

    Ok(format!(
        "<!doctype html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n\
         <title>{} DAG card</title>\n<style>\n{}</style>\n</head>\n<body>\n<main>\n{}</main>\n</body>\n</html>\n",
        escape_html(&model.flow_name),
        CSS,
        body
    ))
}
