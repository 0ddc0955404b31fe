//! Command-line interface: validate, run, resume, card, test, runs,
//! artifact. Exit codes follow one convention everywhere: 0 success,
//! 1 domain failure (run failed, tests failed, not found), 2 usage or
//! I/O error. Diagnostics go to stderr, results to stdout.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::behavior::{run_behavior_suite, BehaviorError, BehaviorReport, CaseStatus};
use crate::card::{build_card_model, default_providers, render_card, CardError};
use crate::exec::{execute_run, resume_run, ExecError};
use crate::flow::{parse_flow, validate_dag, FlowError, ValidatedFlow};
use crate::store::{ObjectId, RunRecord, RunStatus, Store, StoreError, TaskStatus};

#[derive(Parser)]
#[command(
    name = "dagdoc",
    version,
    about = "Define ML workflows as DAGs, run them with artifact snapshotting, and render DAG cards"
)]
struct Cli {
    /// Store root directory.
    #[arg(long, global = true, env = "DAGDOC_STORE", default_value = ".dagdoc")]
    store: PathBuf,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse a flow file and report its execution waves.
    Validate {
        /// Path to the flow file.
        flow: PathBuf,
    },
    /// Execute a flow and record the run.
    Run {
        /// Path to the flow file.
        flow: PathBuf,
        /// Parameter binding, repeatable: --param name=value.
        #[arg(long = "param", value_name = "NAME=VALUE")]
        params: Vec<String>,
        /// Recorded as the run's owner.
        #[arg(long, env = "DAGDOC_USER", default_value = "unknown")]
        user: String,
        /// Maximum tasks running at once (default: available cores).
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Re-execute the failed and never-run steps of a failed run.
    Resume {
        /// Flow file path or flow name.
        flow: String,
        run_id: String,
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Render the DAG card to an HTML file and store it.
    Card {
        /// Flow file path or flow name.
        flow: String,
        /// How many recent completed runs the card covers.
        #[arg(long = "last-k", value_name = "N", default_value_t = 2)]
        last_k: usize,
        /// Output HTML path.
        #[arg(short = 'o', long = "output", default_value = "card.html")]
        output: PathBuf,
    },
    /// Run the flow's behavior suite against a successful run.
    Test {
        /// Path to the flow file.
        flow: PathBuf,
        /// Run id to test (default: newest successful run).
        #[arg(long)]
        run: Option<String>,
    },
    /// List recorded runs, newest first.
    Runs {
        /// Flow file path or flow name.
        flow: String,
    },
    /// Inspect stored objects.
    Artifact {
        #[command(subcommand)]
        action: ArtifactCmd,
    },
}

#[derive(Subcommand)]
enum ArtifactCmd {
    /// Write an object's bytes to stdout.
    Get { id: String },
}

fn usage_error(msg: impl Display) -> i32 {
    eprintln!("error: {msg}");
    2
}

fn domain_error(msg: impl Display) -> i32 {
    eprintln!("error: {msg}");
    1
}

fn store_code(e: &StoreError) -> i32 {
    match e {
        StoreError::NotFound(_) => 1,
        _ => 2,
    }
}

fn exec_code(e: &ExecError) -> i32 {
    match e {
        ExecError::NotResumable { .. }
        | ExecError::UnknownPlaceholder { .. }
        | ExecError::UpstreamNotRun { .. } => 1,
        ExecError::CorruptFlow { .. } => 2,
        ExecError::Store(inner) => store_code(inner),
    }
}

fn card_code(e: &CardError) -> i32 {
    match e {
        CardError::Invalid(_) => 2,
        CardError::Provider { .. } | CardError::MalformedFragment { .. } => 1,
        CardError::Store(inner) => store_code(inner),
    }
}

/// `{path}:{line}:{col}: message` when the error has a position.
fn flow_diagnostic(path: &Path, err: &FlowError) -> String {
    match err.position() {
        Some(_) => format!("{}:{err}", path.display()),
        None => format!("{}: {err}", path.display()),
    }
}

fn load_flow_file(path: &Path) -> Result<ValidatedFlow, i32> {
    let source = std::fs::read_to_string(path).map_err(|e| {
        usage_error(format_args!(
            "cannot read flow file `{}`: {e}",
            path.display()
        ))
    })?;
    parse_flow(&source)
        .and_then(|spec| validate_dag(&spec))
        .map_err(|e| domain_error(flow_diagnostic(path, &e)))
}

/// Flow name for commands that accept a path or a bare name.
fn flow_name_of(arg: &str) -> Result<String, i32> {
    if Path::new(arg).is_file() {
        Ok(load_flow_file(Path::new(arg))?.spec.name)
    } else {
        Ok(arg.to_string())
    }
}

/// Full flow definition from a path, or from the newest run's stored
/// source when given a bare name.
fn resolve_flow(store: &Store, arg: &str) -> Result<ValidatedFlow, i32> {
    let path = Path::new(arg);
    if path.is_file() {
        return load_flow_file(path);
    }
    let runs = store.list_runs(arg).map_err(|e| {
        eprintln!("error: {e}");
        store_code(&e)
    })?;
    let Some(newest) = runs.first() else {
        return Err(domain_error(format_args!(
            "unknown flow `{arg}`: not a file, and the store has no runs under that name"
        )));
    };
    let bytes = store.get_object(&newest.flow_source).map_err(|e| {
        eprintln!("error: {e}");
        store_code(&e)
    })?;
    let source = String::from_utf8(bytes)
        .map_err(|_| usage_error(format_args!("stored flow source for `{arg}` is not UTF-8")))?;
    parse_flow(&source)
        .and_then(|spec| validate_dag(&spec))
        .map_err(|e| {
            usage_error(format_args!(
                "stored flow source for `{arg}` is invalid: {e}"
            ))
        })
}

fn parse_param_args(pairs: &[String]) -> Result<BTreeMap<String, String>, i32> {
    let mut out = BTreeMap::new();
    for pair in pairs {
        let Some((name, value)) = pair.split_once('=') else {
            return Err(usage_error(format_args!(
                "--param expects NAME=VALUE, got `{pair}`"
            )));
        };
        out.insert(name.to_string(), value.to_string());
    }
    Ok(out)
}

fn default_parallelism() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

fn print_failed_tasks(run: &RunRecord) {
    for (step, task) in &run.tasks {
        match task.status {
            TaskStatus::Failed => eprintln!(
                "step `{step}` failed: {}",
                task.detail.as_deref().unwrap_or("no detail recorded")
            ),
            TaskStatus::SkippedUpstreamFailed => eprintln!(
                "step `{step}` skipped: {}",
                task.detail.as_deref().unwrap_or("upstream failure")
            ),
            _ => {}
        }
    }
}

fn cmd_validate(flow_path: &Path) -> i32 {
    let flow = match load_flow_file(flow_path) {
        Ok(flow) => flow,
        Err(code) => return code,
    };
    for warning in &flow.warnings {
        eprintln!("warning: {warning}");
    }
    let waves = flow.waves();
    println!(
        "flow {}: {} steps in {} waves",
        flow.spec.name,
        flow.spec.steps.len(),
        waves.len()
    );
    for (i, wave) in waves.iter().enumerate() {
        println!("  wave {}: {}", i + 1, wave.join(", "));
    }
    0
}

fn cmd_run(
    store: &Store,
    flow_path: &Path,
    params: &[String],
    user: &str,
    parallelism: Option<usize>,
) -> i32 {
    let flow = match load_flow_file(flow_path) {
        Ok(flow) => flow,
        Err(code) => return code,
    };
    let explicit = match parse_param_args(params) {
        Ok(map) => map,
        Err(code) => return code,
    };
    let input_base = flow_path.parent().unwrap_or(Path::new("."));
    let p = parallelism.unwrap_or_else(default_parallelism);
    match execute_run(store, &flow, &explicit, user, p, input_base) {
        Ok(run) => {
            println!("{}", run.run_id);
            if run.status == RunStatus::Success {
                0
            } else {
                print_failed_tasks(&run);
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exec_code(&e)
        }
    }
}

fn cmd_resume(store: &Store, flow_arg: &str, run_id: &str, parallelism: Option<usize>) -> i32 {
    let flow_name = match flow_name_of(flow_arg) {
        Ok(name) => name,
        Err(code) => return code,
    };
    let p = parallelism.unwrap_or_else(default_parallelism);
    match resume_run(store, &flow_name, run_id, p) {
        Ok(run) => {
            println!("{}", run.run_id);
            if run.status == RunStatus::Success {
                0
            } else {
                print_failed_tasks(&run);
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exec_code(&e)
        }
    }
}

fn cmd_card(store: &Store, flow_arg: &str, last_k: usize, output: &Path) -> i32 {
    if last_k < 1 {
        return usage_error("--last-k must be at least 1");
    }
    let flow = match resolve_flow(store, flow_arg) {
        Ok(flow) => flow,
        Err(code) => return code,
    };
    let model = match build_card_model(store, &flow, last_k) {
        Ok(model) => model,
        Err(e) => {
            eprintln!("error: {e}");
            return card_code(&e);
        }
    };
    let html = match render_card(store, &model, &default_providers()) {
        Ok(html) => html,
        Err(e) => {
            eprintln!("error: {e}");
            return card_code(&e);
        }
    };
    if let Err(e) = std::fs::write(output, &html) {
        return usage_error(format_args!("cannot write `{}`: {e}", output.display()));
    }
    let scope: Vec<String> = model
        .selected
        .iter()
        .map(|b| b.run.run_id.clone())
        .collect();
    match store.put_card(&flow.spec.name, &scope, html.as_bytes()) {
        Ok(entry) => {
            println!("{}", entry.object.as_str());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            store_code(&e)
        }
    }
}

fn print_behavior_report(report: &BehaviorReport) {
    for result in &report.results {
        match (&result.status, &result.detail) {
            (CaseStatus::Pass, _) => println!("case `{}`: pass", result.case),
            (status, Some(detail)) => {
                println!("case `{}`: {} ({detail})", result.case, status.as_str())
            }
            (status, None) => println!("case `{}`: {}", result.case, status.as_str()),
        }
    }
    println!(
        "totals: {} passed, {} failed, {} errors",
        report.totals.pass, report.totals.fail, report.totals.error
    );
}

fn cmd_test(store: &Store, flow_path: &Path, run_id: Option<&str>) -> i32 {
    let flow = match load_flow_file(flow_path) {
        Ok(flow) => flow,
        Err(code) => return code,
    };
    let run = match run_id {
        Some(id) => match store.load_run(&flow.spec.name, id) {
            Ok(run) => run,
            Err(e) => {
                eprintln!("error: {e}");
                return store_code(&e);
            }
        },
        None => {
            let runs = match store.list_runs(&flow.spec.name) {
                Ok(runs) => runs,
                Err(e) => {
                    eprintln!("error: {e}");
                    return store_code(&e);
                }
            };
            match runs.into_iter().find(|r| r.status == RunStatus::Success) {
                Some(run) => run,
                None => {
                    return domain_error(format_args!(
                        "no successful run of flow `{}` to test",
                        flow.spec.name
                    ))
                }
            }
        }
    };
    match run_behavior_suite(store, &flow, &run) {
        Ok(report) => {
            print_behavior_report(&report);
            if report.totals.fail == 0 && report.totals.error == 0 {
                0
            } else {
                1
            }
        }
        Err(BehaviorError::NotRunnable { run_id, status }) => domain_error(format_args!(
            "run {run_id} is not runnable for behavior tests: status is {status}"
        )),
        Err(BehaviorError::Store(e)) => {
            eprintln!("error: {e}");
            store_code(&e)
        }
    }
}

fn cmd_runs(store: &Store, flow_arg: &str) -> i32 {
    let flow_name = match flow_name_of(flow_arg) {
        Ok(name) => name,
        Err(code) => return code,
    };
    let runs = match store.list_runs(&flow_name) {
        Ok(runs) => runs,
        Err(e) => {
            eprintln!("error: {e}");
            return store_code(&e);
        }
    };
    let user_w = runs
        .iter()
        .map(|r| r.user.len())
        .max()
        .unwrap_or(0)
        .max("user".len());
    println!(
        "{:<8} {:<8} {:<user_w$} started_at",
        "run_id", "status", "user"
    );
    for run in &runs {
        println!(
            "{:<8} {:<8} {:<user_w$} {}",
            run.run_id,
            run.status.as_str(),
            run.user,
            run.started_at
        );
    }
    0
}

fn cmd_artifact_get(store: &Store, id: &str) -> i32 {
    let object = match ObjectId::parse(id) {
        Ok(object) => object,
        Err(e) => return usage_error(e),
    };
    match store.get_object(&object) {
        Ok(bytes) => {
            let mut out = std::io::stdout().lock();
            if let Err(e) = out.write_all(&bytes).and_then(|_| out.flush()) {
                return usage_error(format_args!("cannot write to stdout: {e}"));
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            store_code(&e)
        }
    }
}

/// Parses arguments and dispatches; returns the process exit code.
pub fn main_entry<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let store = Store::open(&cli.store);
    match &cli.command {
        Cmd::Validate { flow } => cmd_validate(flow),
        Cmd::Run {
            flow,
            params,
            user,
            parallelism,
        } => cmd_run(&store, flow, params, user, *parallelism),
        Cmd::Resume {
            flow,
            run_id,
            parallelism,
        } => cmd_resume(&store, flow, run_id, *parallelism),
        Cmd::Card {
            flow,
            last_k,
            output,
        } => cmd_card(&store, flow, *last_k, output),
        Cmd::Test { flow, run } => cmd_test(&store, flow, run.as_deref()),
        Cmd::Runs { flow } => cmd_runs(&store, flow),
        Cmd::Artifact { action } => match action {
            ArtifactCmd::Get { id } => cmd_artifact_get(&store, id),
        },
    }
}
