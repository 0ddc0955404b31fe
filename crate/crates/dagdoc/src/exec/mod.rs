//! Wave-by-wave flow execution with artifact snapshotting.
//!
//! The executor owns all run-metadata writes: worker threads execute
//! tasks and send their records over a channel to the single writer that
//! persists them. Object writes (logs, artifacts) are safe from any
//! thread because the store renames content-addressed files into place.

pub mod builtins;

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Mutex};

use thiserror::Error;

use crate::flow::{parse_flow, validate_dag, StepSpec, TaskKind, ValidatedFlow};
use crate::store::{
    now_millis, ArtifactRef, RunRecord, RunStatus, Store, StoreError, TaskRecord, TaskStatus,
};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("unknown placeholder `{{{name}}}` at offset {position}")]
    UnknownPlaceholder { name: String, position: usize },
    #[error(
        "artifact placeholder `{{{placeholder}}}` is unavailable: step `{step}` has not succeeded"
    )]
    UpstreamNotRun { placeholder: String, step: String },
    #[error("run {run_id} is not resumable: {reason}")]
    NotResumable { run_id: String, reason: String },
    #[error("stored flow source for run {run_id} is invalid: {msg}")]
    CorruptFlow { run_id: String, msg: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn io_exec(path: &Path, source: std::io::Error) -> ExecError {
    ExecError::Store(StoreError::Storage {
        path: path.to_path_buf(),
        source,
    })
}

/// Everything one task execution needs, assembled by the executor.
#[derive(Debug, Clone)]
pub struct TaskContext {
    pub run_id: String,
    pub step: String,
    pub workdir: PathBuf,
    /// Post-substitution command; `None` for builtins.
    pub resolved_command: Option<String>,
    /// Environment additions handed to the task process.
    pub env: Vec<(String, String)>,
}

fn absolutize(path: &Path) -> Result<PathBuf, ExecError> {
    std::path::absolute(path).map_err(|e| io_exec(path, e))
}

/// Substitutes `{param.N}`, `{input.N}`, `{artifact.STEP.NAME}` and
/// `{run.id}` in a command template. Input and artifact placeholders
/// resolve to absolute paths of store objects.
///
/// Brace groups outside those four namespaces pass through untouched, so
/// shell and awk braces survive; a known namespace with an unknown name
/// is an error, never silent.
pub fn bind_template(
    template: &str,
    flow: &ValidatedFlow,
    run: &RunRecord,
    store: &Store,
) -> Result<String, ExecError> {
    let chars: Vec<char> = template.chars().collect();
    let mut out = String::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '{' {
            if let Some(rel) = chars[i + 1..].iter().position(|&c| c == '}') {
                let inner: String = chars[i + 1..i + 1 + rel].iter().collect();
                if let Some(value) = resolve_placeholder(&inner, flow, run, store, i + 1)? {
                    out.push_str(&value);
                    i += rel + 2;
                    continue;
                }
            }
        }
        out.push(chars[i]);
        i += 1;
    }
    Ok(out)
}

/// `Ok(None)` means "not a placeholder, keep the braces literally".
fn resolve_placeholder(
    inner: &str,
    _flow: &ValidatedFlow,
    run: &RunRecord,
    store: &Store,
    position: usize,
) -> Result<Option<String>, ExecError> {
    let Some((namespace, rest)) = inner.split_once('.') else {
        return Ok(None);
    };
    let unknown = || ExecError::UnknownPlaceholder {
        name: inner.to_string(),
        position,
    };
    match namespace {
        "param" => match run.param_bindings.get(rest) {
            Some(value) => Ok(Some(value.clone())),
            None => Err(unknown()),
        },
        "input" => match run.input_bindings.get(rest) {
            Some(binding) => Ok(Some(
                absolutize(&store.object_path(&binding.object))?
                    .to_string_lossy()
                    .into_owned(),
            )),
            None => Err(unknown()),
        },
        "artifact" => {
            let Some((step, name)) = rest.split_once('.') else {
                return Err(unknown());
            };
            let task = run.tasks.get(step).ok_or_else(unknown)?;
            if task.status != TaskStatus::Success {
                return Err(ExecError::UpstreamNotRun {
                    placeholder: inner.to_string(),
                    step: step.to_string(),
                });
            }
            let artifact = task.artifact(name).ok_or_else(unknown)?;
            Ok(Some(
                absolutize(&store.object_path(&artifact.object))?
                    .to_string_lossy()
                    .into_owned(),
            ))
        }
        "run" => {
            if rest == "id" {
                Ok(Some(run.run_id.clone()))
            } else {
                Err(unknown())
            }
        }
        _ => Ok(None),
    }
}

fn failed(mut record: TaskRecord, detail: String) -> TaskRecord {
    record.status = TaskStatus::Failed;
    record.detail = Some(detail);
    record.finished_at = Some(now_millis());
    record
}

/// Runs one task to completion and returns its record. Domain failures
/// (nonzero exit, missing output, bad template, builtin error) come back
/// as a failed record; only store and filesystem breakage is an `Err`.
pub fn execute_task(
    store: &Store,
    flow: &ValidatedFlow,
    run: &RunRecord,
    step: &StepSpec,
    mut record: TaskRecord,
) -> Result<TaskRecord, ExecError> {
    let step_dir = store.work_dir(&run.flow_name, &run.run_id, &step.name);
    if step_dir.exists() {
        fs::remove_dir_all(&step_dir).map_err(|e| io_exec(&step_dir, e))?;
    }
    let workdir = step_dir.join("wd");
    fs::create_dir_all(&workdir).map_err(|e| io_exec(&workdir, e))?;
    let metrics_path = absolutize(&step_dir.join("metrics.ndjson"))?;
    let log_path = step_dir.join("log.txt");

    match &step.task {
        TaskKind::Exec { command } => {
            let resolved = match bind_template(command, flow, run, store) {
                Ok(resolved) => resolved,
                Err(
                    e @ (ExecError::UnknownPlaceholder { .. } | ExecError::UpstreamNotRun { .. }),
                ) => {
                    return Ok(failed(record, format!("command template: {e}")));
                }
                Err(e) => return Err(e),
            };
            let ctx = TaskContext {
                run_id: run.run_id.clone(),
                step: step.name.clone(),
                workdir: workdir.clone(),
                resolved_command: Some(resolved.clone()),
                env: vec![
                    ("DAGDOC_RUN_ID".to_string(), run.run_id.clone()),
                    ("DAGDOC_STEP".to_string(), step.name.clone()),
                    (
                        "DAGDOC_METRICS".to_string(),
                        metrics_path.to_string_lossy().into_owned(),
                    ),
                ],
            };
            // one file description shared by stdout and stderr keeps the
            // combined log interleaved the way a terminal would show it
            let log_file = fs::File::create(&log_path).map_err(|e| io_exec(&log_path, e))?;
            let log_clone = log_file.try_clone().map_err(|e| io_exec(&log_path, e))?;
            let mut cmd = Command::new("/bin/sh");
            cmd.arg("-c")
                .arg(&resolved)
                .current_dir(&ctx.workdir)
                .stdin(Stdio::null())
                .stdout(Stdio::from(log_clone))
                .stderr(Stdio::from(log_file));
            for (key, value) in &ctx.env {
                cmd.env(key, value);
            }
            let status = match cmd.status() {
                Ok(status) => status,
                Err(e) => return Ok(failed(record, format!("failed to spawn `/bin/sh -c`: {e}"))),
            };
            record.exit_code = status.code();
            let log_bytes = fs::read(&log_path).map_err(|e| io_exec(&log_path, e))?;
            record.log = Some(store.put_object(&log_bytes)?);
            if !status.success() {
                // keep whatever partial metrics exist for debugging;
                // they are validated only on the success path
                if metrics_path.is_file() {
                    let bytes = fs::read(&metrics_path).map_err(|e| io_exec(&metrics_path, e))?;
                    record.metrics = Some(store.put_object(&bytes)?);
                }
                let detail = match status.code() {
                    Some(code) => format!("command exited with code {code}"),
                    None => "command terminated by signal".to_string(),
                };
                return Ok(failed(record, detail));
            }
        }
        TaskKind::Builtin { name, settings } => {
            let mut resolved = BTreeMap::new();
            for (key, value) in settings {
                match bind_template(value, flow, run, store) {
                    Ok(v) => {
                        resolved.insert(key.clone(), v);
                    }
                    Err(
                        e @ (ExecError::UnknownPlaceholder { .. }
                        | ExecError::UpstreamNotRun { .. }),
                    ) => {
                        return Ok(failed(record, format!("setting `{key}` template: {e}")));
                    }
                    Err(e) => return Err(e),
                }
            }
            let outputs: BTreeMap<String, PathBuf> = step
                .outputs
                .iter()
                .map(|(n, rel)| (n.clone(), workdir.join(rel)))
                .collect();
            for path in outputs.values() {
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).map_err(|e| io_exec(parent, e))?;
                }
            }
            match builtins::run_builtin(name, &resolved, &outputs, &metrics_path) {
                Ok(outcome) => {
                    fs::write(&log_path, &outcome.log).map_err(|e| io_exec(&log_path, e))?;
                    record.log = Some(store.put_object(outcome.log.as_bytes())?);
                    record.exit_code = Some(0);
                }
                Err(reason) => {
                    let log = format!("{name} failed: {reason}\n");
                    fs::write(&log_path, &log).map_err(|e| io_exec(&log_path, e))?;
                    record.log = Some(store.put_object(log.as_bytes())?);
                    return Ok(failed(record, reason));
                }
            }
        }
    }

    for (name, rel) in &step.outputs {
        let path = workdir.join(rel);
        if !path.is_file() {
            return Ok(failed(
                record,
                format!("declared output `{name}` missing (expected at `{rel}`)"),
            ));
        }
        let (object, size_bytes) = store.put_object_file(&path)?;
        record.artifacts.push(ArtifactRef {
            name: name.clone(),
            step: step.name.clone(),
            object,
            size_bytes,
        });
    }

    if metrics_path.is_file() {
        let bytes = fs::read(&metrics_path).map_err(|e| io_exec(&metrics_path, e))?;
        record.metrics = Some(store.put_object(&bytes)?);
        let parsed = std::str::from_utf8(&bytes)
            .map_err(|e| format!("metrics file is not UTF-8: {e}"))
            .and_then(|text| {
                crate::metrics::ingest_metrics_file(text, &run.run_id, &step.name)
                    .map_err(|e| format!("metrics file invalid: {e}"))
            });
        if let Err(reason) = parsed {
            return Ok(failed(record, reason));
        }
    }

    record.status = TaskStatus::Success;
    record.finished_at = Some(now_millis());
    Ok(record)
}

enum TaskEvent {
    Started(TaskRecord),
    Finished(TaskRecord),
    Infra(ExecError),
}

/// Executes one wave with up to `p` concurrent tasks. Workers send task
/// records to this thread, which is the only writer of run metadata.
fn run_wave(
    store: &Store,
    flow: &ValidatedFlow,
    run: &mut RunRecord,
    steps: Vec<StepSpec>,
    p: usize,
) -> Result<(), ExecError> {
    let workers = p.min(steps.len()).max(1);
    let snapshot = run.clone();
    let queue = Mutex::new(VecDeque::from(steps));
    let abort = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<TaskEvent>();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let snapshot = &snapshot;
            let queue = &queue;
            let abort = &abort;
            scope.spawn(move || loop {
                if abort.load(Ordering::Relaxed) {
                    break;
                }
                let step = queue.lock().expect("queue lock").pop_front();
                let Some(step) = step else { break };
                let mut record = snapshot.tasks[&step.name].clone();
                record.status = TaskStatus::Running;
                record.started_at = Some(now_millis());
                if tx.send(TaskEvent::Started(record.clone())).is_err() {
                    break;
                }
                let event = match execute_task(store, flow, snapshot, &step, record) {
                    Ok(finished) => TaskEvent::Finished(finished),
                    Err(e) => TaskEvent::Infra(e),
                };
                if tx.send(event).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut first_err: Option<ExecError> = None;
        for event in rx {
            match event {
                TaskEvent::Started(record) | TaskEvent::Finished(record) => {
                    if first_err.is_none() {
                        if let Err(e) = store.update_task(run, record) {
                            abort.store(true, Ordering::Relaxed);
                            first_err = Some(e.into());
                        }
                    }
                }
                TaskEvent::Infra(e) => {
                    abort.store(true, Ordering::Relaxed);
                    if first_err.is_none() {
                        first_err = Some(e);
                    }
                }
            }
        }
        match first_err {
            None => Ok(()),
            Some(e) => Err(e),
        }
    })
}

/// Runs every pending-and-ready task wave by wave. On a task failure the
/// current wave still finishes, later waves are not started, and every
/// step downstream of a failure is marked skipped.
fn drive(
    store: &Store,
    flow: &ValidatedFlow,
    run: &mut RunRecord,
    p: usize,
) -> Result<(), ExecError> {
    for wave in flow.waves() {
        let ready: Vec<StepSpec> = wave
            .iter()
            .filter(|name| run.tasks[name.as_str()].status == TaskStatus::Pending)
            .map(|name| flow.spec.step(name).expect("wave names spec steps").clone())
            .filter(|step| {
                step.after
                    .iter()
                    .all(|pred| run.tasks[pred.as_str()].status == TaskStatus::Success)
            })
            .collect();
        if !ready.is_empty() {
            run_wave(store, flow, run, ready, p)?;
        }
        if run.tasks.values().any(|t| t.status == TaskStatus::Failed) {
            break;
        }
    }
    mark_downstream_skipped(store, flow, run)?;
    store.finish_run(run)?;
    Ok(())
}

/// Marks every still-pending step downstream of a failed step as
/// `skipped_upstream_failed`, blaming the failed ancestor.
fn mark_downstream_skipped(
    store: &Store,
    flow: &ValidatedFlow,
    run: &mut RunRecord,
) -> Result<(), ExecError> {
    let mut successors: BTreeMap<&str, Vec<&str>> = flow
        .spec
        .steps
        .iter()
        .map(|s| (s.name.as_str(), Vec::new()))
        .collect();
    for step in &flow.spec.steps {
        for pred in &step.after {
            successors
                .get_mut(pred.as_str())
                .expect("validated reference")
                .push(&step.name);
        }
    }
    for list in successors.values_mut() {
        list.sort();
    }

    let failed_steps: Vec<String> = run
        .tasks
        .iter()
        .filter(|(_, t)| t.status == TaskStatus::Failed)
        .map(|(name, _)| name.clone())
        .collect();
    let mut blame: BTreeMap<String, String> = BTreeMap::new();
    for cause in &failed_steps {
        let mut stack = vec![cause.as_str()];
        while let Some(node) = stack.pop() {
            for succ in &successors[node] {
                if !blame.contains_key(*succ) {
                    blame.insert(succ.to_string(), cause.clone());
                    stack.push(succ);
                }
            }
        }
    }
    for (step, cause) in blame {
        if run.tasks[&step].status == TaskStatus::Pending {
            let mut record = run.tasks[&step].clone();
            record.status = TaskStatus::SkippedUpstreamFailed;
            record.detail = Some(format!("upstream step `{cause}` did not succeed"));
            store.update_task(run, record)?;
        }
    }
    Ok(())
}

/// Creates a run and executes it. Task failures are recorded in the
/// returned `RunRecord`, not raised.
pub fn execute_run(
    store: &Store,
    flow: &ValidatedFlow,
    explicit: &BTreeMap<String, String>,
    user: &str,
    parallelism: usize,
    input_base: &Path,
) -> Result<RunRecord, ExecError> {
    let mut run = store.create_run(flow, explicit, user, input_base)?;
    drive(store, flow, &mut run, parallelism.max(1))?;
    Ok(run)
}

/// Re-executes the failed, skipped, and never-started tasks of a failed
/// run. Successful tasks and their artifacts are left untouched; the
/// flow definition is re-read from the source snapshotted at creation.
pub fn resume_run(
    store: &Store,
    flow_name: &str,
    run_id: &str,
    parallelism: usize,
) -> Result<RunRecord, ExecError> {
    let mut run = store.load_run(flow_name, run_id)?;
    match run.status {
        RunStatus::Success => {
            return Err(ExecError::NotResumable {
                run_id: run_id.to_string(),
                reason: "run already successful".to_string(),
            })
        }
        RunStatus::Running => {
            return Err(ExecError::NotResumable {
                run_id: run_id.to_string(),
                reason: "run is still in progress".to_string(),
            })
        }
        RunStatus::Failed => {}
    }

    let source_bytes = store.get_object(&run.flow_source)?;
    let source = String::from_utf8(source_bytes).map_err(|e| ExecError::CorruptFlow {
        run_id: run_id.to_string(),
        msg: e.to_string(),
    })?;
    let flow = parse_flow(&source)
        .and_then(|spec| validate_dag(&spec))
        .map_err(|e| ExecError::CorruptFlow {
            run_id: run_id.to_string(),
            msg: e.to_string(),
        })?;

    for record in run.tasks.values_mut() {
        if record.status != TaskStatus::Success {
            *record = TaskRecord::pending(&record.step.clone());
        }
    }
    run.status = RunStatus::Running;
    run.finished_at = None;
    run.resume_count += 1;
    store.save_run(&run)?;

    drive(store, &flow, &mut run, parallelism.max(1))?;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    fn setup(src: &str) -> (tempfile::TempDir, Store, ValidatedFlow) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path().join(".dagdoc"));
        let flow = validate_dag(&parse_flow(src).unwrap()).unwrap();
        (dir, store, flow)
    }

    fn no_params() -> BTreeMap<String, String> {
        BTreeMap::new()
    }

    mod template {
        use super::*;

        fn fixture() -> (tempfile::TempDir, Store, ValidatedFlow, RunRecord) {
            let (dir, store, flow) = setup(
                "flow t\n\
                 param lr float default 0.05\n\
                 input points file \"points.csv\"\n\
                 step train\nexec \"true\"\nout model \"m.txt\"\n\
                 step eval after train\nexec \"true\"\n",
            );
            fs::write(dir.path().join("points.csv"), "1,3\n").unwrap();
            let run = store
                .create_run(&flow, &no_params(), "t", dir.path())
                .unwrap();
            (dir, store, flow, run)
        }

        #[test]
        fn params_and_run_id_substitute() {
            let (_g, store, flow, run) = fixture();
            let got =
                bind_template("train --lr {param.lr} --run {run.id}", &flow, &run, &store).unwrap();
            assert_eq!(got, "train --lr 0.05 --run 000001");
        }

        #[test]
        fn unknown_param_is_an_error_with_position() {
            let (_g, store, flow, run) = fixture();
            match bind_template("x {param.nope}", &flow, &run, &store) {
                Err(ExecError::UnknownPlaceholder { name, position }) => {
                    assert_eq!(name, "param.nope");
                    assert_eq!(position, 3);
                }
                other => panic!("expected UnknownPlaceholder, got {other:?}"),
            }
        }

        #[test]
        fn shell_and_awk_braces_pass_through() {
            let (_g, store, flow, run) = fixture();
            for literal in [
                "awk '{printf \"%.4f\", $1}'",
                "echo ${HOME} {not_a_namespace} {} {0}",
                "sed 's/{weird.ns}//'",
            ] {
                assert_eq!(
                    bind_template(literal, &flow, &run, &store).unwrap(),
                    literal
                );
            }
        }

        #[test]
        fn input_resolves_to_snapshot_path() {
            let (_g, store, flow, run) = fixture();
            let path = bind_template("{input.points}", &flow, &run, &store).unwrap();
            assert_eq!(fs::read_to_string(&path).unwrap(), "1,3\n");
            assert!(path.contains(run.input_bindings["points"].object.as_str()));
        }

        #[test]
        fn artifact_requires_successful_upstream() {
            let (_g, store, flow, mut run) = fixture();
            match bind_template("{artifact.train.model}", &flow, &run, &store) {
                Err(ExecError::UpstreamNotRun { step, .. }) => assert_eq!(step, "train"),
                other => panic!("expected UpstreamNotRun, got {other:?}"),
            }

            let object = store.put_object(b"w=2 b=1\n").unwrap();
            let task = run.tasks.get_mut("train").unwrap();
            task.status = TaskStatus::Success;
            task.artifacts.push(ArtifactRef {
                name: "model".to_string(),
                step: "train".to_string(),
                object: object.clone(),
                size_bytes: 8,
            });
            let path = bind_template("{artifact.train.model}", &flow, &run, &store).unwrap();
            assert_eq!(fs::read_to_string(&path).unwrap(), "w=2 b=1\n");

            match bind_template("{artifact.train.ghost}", &flow, &run, &store) {
                Err(ExecError::UnknownPlaceholder { name, .. }) => {
                    assert_eq!(name, "artifact.train.ghost")
                }
                other => panic!("expected UnknownPlaceholder, got {other:?}"),
            }
        }
    }

    #[test]
    fn diamond_runs_to_success() {
        let (g, store, flow) = setup(
            "flow d\n\
             step start\nexec \"true\"\n\
             step clean after start\nexec \"true\"\n\
             step aggregate after start\nexec \"true\"\n\
             step prepare after clean, aggregate\nexec \"true\"\n",
        );
        let run = execute_run(&store, &flow, &no_params(), "t", 2, g.path()).unwrap();
        assert_eq!(run.status, RunStatus::Success);
        assert_eq!(run.tasks.len(), 4);
        assert!(run.tasks.values().all(|t| t.status == TaskStatus::Success));
        assert!(run.tasks.values().all(|t| t.exit_code == Some(0)));
        assert!(run.tasks.values().all(|t| t.log.is_some()));
        assert!(run.finished_at.is_some());
    }

    #[test]
    fn failure_skips_downstream_only() {
        let (g, store, flow) = setup(
            "flow f\n\
             step a\nexec \"true\"\n\
             step b after a\nexec \"true\"\n\
             step c after b\nexec \"exit 3\"\n\
             step d after c\nexec \"true\"\n",
        );
        let run = execute_run(&store, &flow, &no_params(), "t", 2, g.path()).unwrap();
        assert_eq!(run.status, RunStatus::Failed);
        assert_eq!(run.tasks["a"].status, TaskStatus::Success);
        assert_eq!(run.tasks["b"].status, TaskStatus::Success);
        assert_eq!(run.tasks["c"].status, TaskStatus::Failed);
        assert_eq!(run.tasks["c"].exit_code, Some(3));
        assert_eq!(run.tasks["d"].status, TaskStatus::SkippedUpstreamFailed);
        assert!(run.tasks["d"].detail.as_deref().unwrap().contains("`c`"));
    }

    #[test]
    fn failing_wave_finishes_but_later_waves_do_not_start() {
        let (g, store, flow) = setup(
            "flow f\n\
             step root\nexec \"true\"\n\
             step bad after root\nexec \"exit 1\"\n\
             step slow after root\nexec \"sleep 0.1 && true\"\n\
             step tail after slow\nexec \"true\"\n",
        );
        let run = execute_run(&store, &flow, &no_params(), "t", 2, g.path()).unwrap();
        assert_eq!(run.status, RunStatus::Failed);
        // wave mate of the failing task still completed
        assert_eq!(run.tasks["slow"].status, TaskStatus::Success);
        // `tail` is not downstream of the failure but its wave never started
        assert_eq!(run.tasks["tail"].status, TaskStatus::Pending);
    }

    #[test]
    fn outputs_snapshotted_and_content_addressed() {
        let (g, store, flow) = setup(
            "flow o\nstep make\nexec \"printf 'hi\\n' > out.txt\"\nout greeting \"out.txt\"\n",
        );
        let run = execute_run(&store, &flow, &no_params(), "t", 1, g.path()).unwrap();
        assert_eq!(run.status, RunStatus::Success);
        let artifact = run.tasks["make"].artifact("greeting").unwrap();
        assert_eq!(artifact.size_bytes, 3);
        assert_eq!(store.get_object(&artifact.object).unwrap(), b"hi\n");
    }

    #[test]
    fn missing_declared_output_fails_task() {
        let (g, store, flow) = setup("flow m\nstep s\nexec \"true\"\nout model \"model.bin\"\n");
        let run = execute_run(&store, &flow, &no_params(), "t", 1, g.path()).unwrap();
        assert_eq!(run.tasks["s"].status, TaskStatus::Failed);
        assert_eq!(run.tasks["s"].exit_code, Some(0));
        let detail = run.tasks["s"].detail.as_deref().unwrap();
        assert!(
            detail.contains("declared output `model` missing"),
            "{detail}"
        );
    }

    #[test]
    fn env_vars_reach_the_task() {
        let (g, store, flow) = setup(
            "flow e\nstep probe\nexec \"printf '%s %s' \\\"$DAGDOC_RUN_ID\\\" \\\"$DAGDOC_STEP\\\" > env.txt\"\nout env \"env.txt\"\n",
        );
        let run = execute_run(&store, &flow, &no_params(), "t", 1, g.path()).unwrap();
        let artifact = run.tasks["probe"].artifact("env").unwrap();
        assert_eq!(store.get_object(&artifact.object).unwrap(), b"000001 probe");
    }

    #[test]
    fn metrics_file_ingested_and_stored() {
        let (g, store, flow) = setup(
            "flow mm\nstep train\nexec \"printf '{\\\"epoch\\\": 0, \\\"name\\\": \\\"loss\\\", \\\"value\\\": 2.5}\\n' > \\\"$DAGDOC_METRICS\\\"\"\n",
        );
        let run = execute_run(&store, &flow, &no_params(), "t", 1, g.path()).unwrap();
        assert_eq!(run.status, RunStatus::Success);
        let object = run.tasks["train"].metrics.as_ref().unwrap();
        let text = String::from_utf8(store.get_object(object).unwrap()).unwrap();
        let parsed = crate::metrics::ingest_metrics_file(&text, "000001", "train").unwrap();
        assert_eq!(parsed.series[0].points[0].value, 2.5);
    }

    #[test]
    fn malformed_metrics_fail_a_successful_command() {
        let (g, store, flow) =
            setup("flow mb\nstep train\nexec \"printf 'not json\\n' > \\\"$DAGDOC_METRICS\\\"\"\n");
        let run = execute_run(&store, &flow, &no_params(), "t", 1, g.path()).unwrap();
        assert_eq!(run.tasks["train"].status, TaskStatus::Failed);
        let detail = run.tasks["train"].detail.as_deref().unwrap();
        assert!(detail.contains("metrics file invalid"), "{detail}");
    }

    #[test]
    fn command_log_captures_stdout_and_stderr() {
        let (g, store, flow) = setup("flow l\nstep s\nexec \"echo to-out; echo to-err >&2\"\n");
        let run = execute_run(&store, &flow, &no_params(), "t", 1, g.path()).unwrap();
        let log = store
            .get_object(run.tasks["s"].log.as_ref().unwrap())
            .unwrap();
        let text = String::from_utf8(log).unwrap();
        assert!(text.contains("to-out"), "{text}");
        assert!(text.contains("to-err"), "{text}");
    }

    #[test]
    fn sibling_tasks_have_isolated_workdirs() {
        let (g, store, flow) = setup(
            "flow iso\n\
             step root\nexec \"true\"\n\
             step left after root\nexec \"printf left > same.txt\"\nout f \"same.txt\"\n\
             step right after root\nexec \"printf right > same.txt\"\nout f \"same.txt\"\n",
        );
        let run = execute_run(&store, &flow, &no_params(), "t", 2, g.path()).unwrap();
        assert_eq!(run.status, RunStatus::Success);
        let left = run.tasks["left"].artifact("f").unwrap();
        let right = run.tasks["right"].artifact("f").unwrap();
        assert_eq!(store.get_object(&left.object).unwrap(), b"left");
        assert_eq!(store.get_object(&right.object).unwrap(), b"right");
    }

    #[test]
    fn artifacts_flow_between_steps() {
        let (g, store, flow) = setup(
            "flow chain\n\
             step a\nexec \"printf alpha > word.txt\"\nout word \"word.txt\"\n\
             step b after a\nexec \"cat {artifact.a.word} {artifact.a.word} > double.txt\"\nout double \"double.txt\"\n",
        );
        let run = execute_run(&store, &flow, &no_params(), "t", 1, g.path()).unwrap();
        let double = run.tasks["b"].artifact("double").unwrap();
        assert_eq!(store.get_object(&double.object).unwrap(), b"alphaalpha");
    }

    #[test]
    fn parallel_wave_overlaps_with_p2() {
        let (g, store, flow) = setup(
            "flow par\n\
             step start\nexec \"true\"\n\
             step b after start\nexec \"sleep 0.2\"\n\
             step c after start\nexec \"sleep 0.2\"\n",
        );
        let t0 = Instant::now();
        let run = execute_run(&store, &flow, &no_params(), "t", 2, g.path()).unwrap();
        let elapsed = t0.elapsed();
        assert_eq!(run.status, RunStatus::Success);
        assert!(
            elapsed.as_millis() < 350,
            "wave should overlap, took {elapsed:?}"
        );
    }

    #[test]
    fn parallelism_one_serializes_the_wave() {
        let (g, store, flow) = setup(
            "flow ser\n\
             step start\nexec \"true\"\n\
             step b after start\nexec \"sleep 0.2\"\n\
             step c after start\nexec \"sleep 0.2\"\n",
        );
        let t0 = Instant::now();
        execute_run(&store, &flow, &no_params(), "t", 1, g.path()).unwrap();
        assert!(
            t0.elapsed().as_millis() >= 390,
            "p=1 must serialize, took {:?}",
            t0.elapsed()
        );
    }

    #[test]
    fn no_task_starts_before_predecessors_finish() {
        let (g, store, flow) = setup(
            "flow sched\n\
             step a\nexec \"sleep 0.02\"\n\
             step b after a\nexec \"sleep 0.02\"\n\
             step c after a\nexec \"sleep 0.02\"\n\
             step d after b, c\nexec \"sleep 0.02\"\n\
             step e after d\nexec \"true\"\n",
        );
        let run = execute_run(&store, &flow, &no_params(), "t", 4, g.path()).unwrap();
        assert_eq!(run.status, RunStatus::Success);
        for step in &flow.spec.steps {
            for pred in &step.after {
                let pred_done = run.tasks[pred.as_str()].finished_at.as_deref().unwrap();
                let succ_start = run.tasks[step.name.as_str()].started_at.as_deref().unwrap();
                // fixed-width RFC 3339 UTC millis compare as strings
                assert!(
                    pred_done <= succ_start,
                    "{pred} finished {pred_done} after {} started {succ_start}",
                    step.name
                );
            }
        }
    }

    #[test]
    fn builtin_trainer_runs_in_flow() {
        let (g, store, flow) = setup(
            "flow bt\n\
             param lr float default 0.05\n\
             step train\nbuiltin train_toy epochs=50 lr={param.lr} data=\"1:3, 2:5, 3:7\"\nout model \"model.txt\"\nout summary \"summary.txt\"\n",
        );
        let run = execute_run(&store, &flow, &no_params(), "t", 1, g.path()).unwrap();
        assert_eq!(run.status, RunStatus::Success);
        let task = &run.tasks["train"];
        let model = String::from_utf8(
            store
                .get_object(&task.artifact("model").unwrap().object)
                .unwrap(),
        )
        .unwrap();
        assert!(model.starts_with("w="), "{model}");
        let metrics =
            String::from_utf8(store.get_object(task.metrics.as_ref().unwrap()).unwrap()).unwrap();
        assert_eq!(metrics.lines().count(), 50);
    }

    #[test]
    fn unknown_builtin_fails_task() {
        let (g, store, flow) = setup("flow ub\nstep s\nbuiltin mystery\n");
        let run = execute_run(&store, &flow, &no_params(), "t", 1, g.path()).unwrap();
        assert_eq!(run.tasks["s"].status, TaskStatus::Failed);
        assert!(run.tasks["s"]
            .detail
            .as_deref()
            .unwrap()
            .contains("unknown builtin"));
    }

    #[test]
    fn bad_template_fails_task_with_record() {
        let (g, store, flow) = setup("flow tmpl\nstep s\nexec \"echo {param.ghost}\"\n");
        let run = execute_run(&store, &flow, &no_params(), "t", 1, g.path()).unwrap();
        assert_eq!(run.tasks["s"].status, TaskStatus::Failed);
        assert!(run.tasks["s"]
            .detail
            .as_deref()
            .unwrap()
            .contains("param.ghost"));
    }

    #[test]
    fn resume_reruns_only_failed_and_downstream() {
        let dir = tempfile::tempdir().unwrap();
        let marker = dir.path().join("fixed.marker");
        let src = format!(
            "flow r\n\
             step a\nexec \"printf A > a.txt\"\nout a \"a.txt\"\n\
             step b after a\nexec \"printf B > b.txt\"\nout b \"b.txt\"\n\
             step c after b\nexec \"test -f {}\"\n\
             step d after c\nexec \"true\"\n",
            marker.display()
        );
        let store = Store::open(dir.path().join(".dagdoc"));
        let flow = validate_dag(&parse_flow(&src).unwrap()).unwrap();

        let run = execute_run(&store, &flow, &no_params(), "t", 2, dir.path()).unwrap();
        assert_eq!(run.status, RunStatus::Failed);
        assert_eq!(run.tasks["c"].status, TaskStatus::Failed);
        assert_eq!(run.tasks["d"].status, TaskStatus::SkippedUpstreamFailed);
        let a_artifact = run.tasks["a"].artifact("a").unwrap().object.clone();
        let a_started = run.tasks["a"].started_at.clone();

        fs::write(&marker, "").unwrap();
        let resumed = resume_run(&store, "r", &run.run_id, 2).unwrap();
        assert_eq!(resumed.run_id, run.run_id);
        assert_eq!(resumed.status, RunStatus::Success);
        assert_eq!(resumed.resume_count, 1);
        // successful tasks untouched: same record, same artifacts
        assert_eq!(resumed.tasks["a"].started_at, a_started);
        assert_eq!(resumed.tasks["a"].artifact("a").unwrap().object, a_artifact);
        // failed and downstream re-executed
        assert_eq!(resumed.tasks["c"].status, TaskStatus::Success);
        assert_eq!(resumed.tasks["d"].status, TaskStatus::Success);
    }

    #[test]
    fn resume_of_successful_run_rejected() {
        let (g, store, flow) = setup("flow ok\nstep s\nexec \"true\"\n");
        let run = execute_run(&store, &flow, &no_params(), "t", 1, g.path()).unwrap();
        assert_eq!(run.status, RunStatus::Success);
        match resume_run(&store, "ok", &run.run_id, 1) {
            Err(ExecError::NotResumable { reason, .. }) => {
                assert!(reason.contains("already successful"), "{reason}");
            }
            other => panic!("expected NotResumable, got {other:?}"),
        }
    }

    #[test]
    fn resume_of_unknown_run_not_found() {
        let (_g, store, _flow) = setup("flow nf\nstep s\nexec \"true\"\n");
        assert!(matches!(
            resume_run(&store, "nf", "000042", 1),
            Err(ExecError::Store(StoreError::NotFound(_)))
        ));
    }

    #[test]
    fn deterministic_builtin_flow_reproduces_artifact_ids() {
        let src = "flow det\n\
             step train\nbuiltin train_toy epochs=30 lr=0.05 data=\"1:3, 2:5, 3:7\"\nout model \"m.txt\"\nout summary \"s.txt\"\n";
        let (g, store, flow) = setup(src);
        let r1 = execute_run(&store, &flow, &no_params(), "t", 2, g.path()).unwrap();
        let r2 = execute_run(&store, &flow, &no_params(), "t", 2, g.path()).unwrap();
        for step in r1.tasks.keys() {
            let a1: Vec<_> = r1.tasks[step].artifacts.iter().map(|a| &a.object).collect();
            let a2: Vec<_> = r2.tasks[step].artifacts.iter().map(|a| &a.object).collect();
            assert_eq!(a1, a2, "artifacts differ for step {step}");
            assert_eq!(r1.tasks[step].metrics, r2.tasks[step].metrics);
        }
    }
}
