//! Content-addressed object store plus persisted run metadata.
//!
//! Layout under the store root (default `.dagdoc/`):
//! - `objects/<first2>/<hex>`: immutable blobs named by their SHA-256
//! - `flows/<flow>/counter`: decimal text of the last allocated run id
//! - `flows/<flow>/runs/<run_id>/meta.json`: run metadata, sorted keys
//! - `flows/<flow>/cards.json`: index of rendered cards
//!
//! Objects are written to a temporary name, made read-only, and atomically
//! renamed into place, so readers never observe a partial blob. All JSON is
//! written with sorted keys and a trailing newline.

use std::collections::BTreeMap;
use std::fs;
use std::io::{ErrorKind, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use fs2::FileExt;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::flow::{flow_fingerprint, ValidatedFlow};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage error at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("binding error: {0}")]
    Binding(String),
    #[error("missing input `{name}`: `{path}` does not exist")]
    MissingInput { name: String, path: String },
    #[error("illegal task transition for step `{step}`: {from} -> {to}")]
    IllegalTransition {
        step: String,
        from: &'static str,
        to: &'static str,
    },
    #[error("corrupt store data at {path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path, source: std::io::Error) -> StoreError {
    StoreError::Storage {
        path: path.to_path_buf(),
        source,
    }
}

/// 64-char lowercase hex SHA-256 of a blob's bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectId(String);

impl ObjectId {
    pub fn for_bytes(bytes: &[u8]) -> ObjectId {
        ObjectId(hex::encode(Sha256::digest(bytes)))
    }

    pub fn parse(text: &str) -> Result<ObjectId, StoreError> {
        if text.len() == 64
            && text
                .chars()
                .all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase())
        {
            Ok(ObjectId(text.to_string()))
        } else {
            Err(StoreError::Invalid(format!(
                "`{text}` is not a 64-char lowercase hex object id"
            )))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for ObjectId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Named binding of a stored blob to the step (or input) that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub name: String,
    pub step: String,
    pub object: ObjectId,
    pub size_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Success,
    Failed,
}

impl RunStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunStatus::Running => "running",
            RunStatus::Success => "success",
            RunStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    Running,
    Success,
    Failed,
    SkippedUpstreamFailed,
}

impl TaskStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskStatus::Pending => "pending",
            TaskStatus::Running => "running",
            TaskStatus::Success => "success",
            TaskStatus::Failed => "failed",
            TaskStatus::SkippedUpstreamFailed => "skipped_upstream_failed",
        }
    }
}

/// Outcome of one step within a run.
///
/// Task timestamps carry millisecond precision so scheduling order can be
/// checked from the record alone; run timestamps use second precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub step: String,
    pub status: TaskStatus,
    pub exit_code: Option<i32>,
    pub artifacts: Vec<ArtifactRef>,
    pub log: Option<ObjectId>,
    pub metrics: Option<ObjectId>,
    pub detail: Option<String>,
    pub started_at: Option<String>,
    pub finished_at: Option<String>,
}

impl TaskRecord {
    pub fn pending(step: &str) -> TaskRecord {
        TaskRecord {
            step: step.to_string(),
            status: TaskStatus::Pending,
            exit_code: None,
            artifacts: Vec::new(),
            log: None,
            metrics: None,
            detail: None,
            started_at: None,
            finished_at: None,
        }
    }

    pub fn artifact(&self, name: &str) -> Option<&ArtifactRef> {
        self.artifacts.iter().find(|a| a.name == name)
    }
}

/// One tracked execution of a flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub flow_name: String,
    pub fingerprint: String,
    /// Snapshot of the flow source at run creation; resume re-reads it.
    pub flow_source: ObjectId,
    pub user: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub param_bindings: BTreeMap<String, String>,
    pub input_bindings: BTreeMap<String, ArtifactRef>,
    pub status: RunStatus,
    pub tasks: BTreeMap<String, TaskRecord>,
    pub resume_count: u32,
}

impl RunRecord {
    pub fn task(&self, step: &str) -> Option<&TaskRecord> {
        self.tasks.get(step)
    }
}

/// One entry in a flow's card index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardIndexEntry {
    pub version: u32,
    pub created_at: String,
    /// Run ids the card covers, newest first.
    pub scope: Vec<String>,
    pub object: ObjectId,
}

pub fn now_secs() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

pub fn now_millis() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes bytes to a sibling temp file, syncs, then renames into place.
fn write_atomic(path: &Path, bytes: &[u8], readonly: bool) -> Result<(), StoreError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let tmp = dir.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
        f.sync_all().map_err(|e| io_err(&tmp, e))?;
        if readonly {
            set_readonly(&tmp)?;
        }
        fs::rename(&tmp, path).map_err(|e| io_err(path, e))
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

#[cfg(unix)]
fn set_readonly(path: &Path) -> Result<(), StoreError> {
    use std::os::unix::fs::PermissionsExt;
    fs::set_permissions(path, fs::Permissions::from_mode(0o444)).map_err(|e| io_err(path, e))
}

#[cfg(not(unix))]
fn set_readonly(path: &Path) -> Result<(), StoreError> {
    let mut perms = fs::metadata(path)
        .map_err(|e| io_err(path, e))?
        .permissions();
    perms.set_readonly(true);
    fs::set_permissions(path, perms).map_err(|e| io_err(path, e))
}

/// Serializes with sorted keys, pretty-printed, trailing newline.
pub fn to_stable_json<T: Serialize>(value: &T) -> Result<String, StoreError> {
    // serde_json's Value keeps maps in a BTreeMap, so routing through
    // Value sorts struct fields too.
    let v = serde_json::to_value(value).map_err(|e| StoreError::Invalid(e.to_string()))?;
    let mut text =
        serde_json::to_string_pretty(&v).map_err(|e| StoreError::Invalid(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    write_atomic(path, to_stable_json(value)?.as_bytes(), false)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Handle on one store root. Directories are created lazily on first write.
#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Store {
        Store { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn object_path(&self, id: &ObjectId) -> PathBuf {
        let hex = id.as_str();
        self.root.join("objects").join(&hex[..2]).join(hex)
    }

    pub fn has_object(&self, id: &ObjectId) -> bool {
        self.object_path(id).is_file()
    }

    /// Stores a blob, returning its content id. Existing objects are
    /// never rewritten; duplicate content costs nothing.
    pub fn put_object(&self, bytes: &[u8]) -> Result<ObjectId, StoreError> {
        let id = ObjectId::for_bytes(bytes);
        let path = self.object_path(&id);
        if !path.is_file() {
            write_atomic(&path, bytes, true)?;
        }
        Ok(id)
    }

    /// Streams a file into the store without loading it whole.
    pub fn put_object_file(&self, src: &Path) -> Result<(ObjectId, u64), StoreError> {
        let mut reader = fs::File::open(src).map_err(|e| io_err(src, e))?;
        let objects = self.root.join("objects");
        fs::create_dir_all(&objects).map_err(|e| io_err(&objects, e))?;
        let tmp = objects.join(format!(
            ".tmp-{}-{}",
            std::process::id(),
            TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let result = (|| {
            let mut writer = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
            let mut hasher = Sha256::new();
            let mut size: u64 = 0;
            let mut buf = [0u8; 64 * 1024];
            loop {
                let n = reader.read(&mut buf).map_err(|e| io_err(src, e))?;
                if n == 0 {
                    break;
                }
                hasher.update(&buf[..n]);
                writer.write_all(&buf[..n]).map_err(|e| io_err(&tmp, e))?;
                size += n as u64;
            }
            writer.sync_all().map_err(|e| io_err(&tmp, e))?;
            drop(writer);
            let id = ObjectId(hex::encode(hasher.finalize()));
            let path = self.object_path(&id);
            if path.is_file() {
                fs::remove_file(&tmp).map_err(|e| io_err(&tmp, e))?;
            } else {
                let dir = path.parent().expect("object path has parent");
                fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
                set_readonly(&tmp)?;
                fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))?;
            }
            Ok((id, size))
        })();
        if result.is_err() {
            let _ = fs::remove_file(&tmp);
        }
        result
    }

    pub fn get_object(&self, id: &ObjectId) -> Result<Vec<u8>, StoreError> {
        let path = self.object_path(id);
        match fs::read(&path) {
            Ok(bytes) => Ok(bytes),
            Err(e) if e.kind() == ErrorKind::NotFound => {
                Err(StoreError::NotFound(format!("object {id}")))
            }
            Err(e) => Err(io_err(&path, e)),
        }
    }

    fn flow_dir(&self, flow: &str) -> PathBuf {
        self.root.join("flows").join(flow)
    }

    pub fn run_dir(&self, flow: &str, run_id: &str) -> PathBuf {
        self.flow_dir(flow).join("runs").join(run_id)
    }

    fn meta_path(&self, flow: &str, run_id: &str) -> PathBuf {
        self.run_dir(flow, run_id).join("meta.json")
    }

    /// Scratch space for one task; not part of the durable record.
    pub fn work_dir(&self, flow: &str, run_id: &str, step: &str) -> PathBuf {
        self.root.join("work").join(flow).join(run_id).join(step)
    }

    /// Allocates the next run id for a flow under an exclusive file lock,
    /// so concurrent callers get gap-free sequential ids.
    fn allocate_run_id(&self, flow: &str) -> Result<String, StoreError> {
        let dir = self.flow_dir(flow);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let lock_path = dir.join("counter.lock");
        let lock = fs::OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(|e| io_err(&lock_path, e))?;
        lock.lock_exclusive().map_err(|e| io_err(&lock_path, e))?;
        let counter_path = dir.join("counter");
        let last: u64 = match fs::read_to_string(&counter_path) {
            Ok(text) => text.trim().parse().map_err(|_| StoreError::Corrupt {
                path: counter_path.clone(),
                msg: format!("`{}` is not a run counter", text.trim()),
            })?,
            Err(e) if e.kind() == ErrorKind::NotFound => 0,
            Err(e) => return Err(io_err(&counter_path, e)),
        };
        let next = last + 1;
        write_atomic(&counter_path, format!("{next}\n").as_bytes(), false)?;
        let _ = fs2::FileExt::unlock(&lock);
        Ok(format!("{next:06}"))
    }

    /// Creates a run: binds parameters (defaults applied), snapshots input
    /// files and the flow source, allocates the next id, persists metadata.
    ///
    /// Validation happens before any write, so a binding error or missing
    /// input leaves the store untouched. Relative input paths resolve
    /// against `input_base`.
    pub fn create_run(
        &self,
        flow: &ValidatedFlow,
        explicit: &BTreeMap<String, String>,
        user: &str,
        input_base: &Path,
    ) -> Result<RunRecord, StoreError> {
        let spec = &flow.spec;

        for name in explicit.keys() {
            if spec.param(name).is_none() {
                return Err(StoreError::Binding(format!("unknown parameter `{name}`")));
            }
        }
        let mut param_bindings = BTreeMap::new();
        for p in &spec.params {
            let value = explicit.get(&p.name).cloned().or_else(|| p.default.clone());
            match value {
                Some(v) => {
                    if let Err(msg) = p.kind.check_literal(&v) {
                        return Err(StoreError::Binding(format!(
                            "parameter `{}`: {msg}",
                            p.name
                        )));
                    }
                    param_bindings.insert(p.name.clone(), v);
                }
                None => {
                    return Err(StoreError::Binding(format!(
                        "missing required parameter `{}`",
                        p.name
                    )))
                }
            }
        }

        let mut found_inputs = Vec::new();
        for input in &spec.inputs {
            let path = input_base.join(&input.path);
            if !path.is_file() {
                return Err(StoreError::MissingInput {
                    name: input.name.clone(),
                    path: input.path.clone(),
                });
            }
            found_inputs.push((input, path));
        }

        let mut input_bindings = BTreeMap::new();
        for (input, path) in found_inputs {
            let (object, size_bytes) = self.put_object_file(&path)?;
            input_bindings.insert(
                input.name.clone(),
                ArtifactRef {
                    name: input.name.clone(),
                    step: "input".to_string(),
                    object,
                    size_bytes,
                },
            );
        }
        let flow_source = self.put_object(spec.source_text.as_bytes())?;

        let run_id = self.allocate_run_id(&spec.name)?;
        let tasks = spec
            .steps
            .iter()
            .map(|s| (s.name.clone(), TaskRecord::pending(&s.name)))
            .collect();
        let run = RunRecord {
            run_id,
            flow_name: spec.name.clone(),
            fingerprint: flow_fingerprint(&spec.source_text).as_str().to_string(),
            flow_source,
            user: user.to_string(),
            started_at: now_secs(),
            finished_at: None,
            param_bindings,
            input_bindings,
            status: RunStatus::Running,
            tasks,
            resume_count: 0,
        };
        self.save_run(&run)?;
        Ok(run)
    }

    pub fn save_run(&self, run: &RunRecord) -> Result<(), StoreError> {
        write_json(&self.meta_path(&run.flow_name, &run.run_id), run)
    }

    pub fn load_run(&self, flow: &str, run_id: &str) -> Result<RunRecord, StoreError> {
        let path = self.meta_path(flow, run_id);
        if !path.is_file() {
            return Err(StoreError::NotFound(format!(
                "run {run_id} of flow `{flow}`"
            )));
        }
        read_json(&path)
    }

    /// Replaces one task's record after checking the status transition is
    /// legal, then recomputes the run status and persists.
    pub fn update_task(&self, run: &mut RunRecord, new: TaskRecord) -> Result<(), StoreError> {
        let old = run.tasks.get(&new.step).ok_or_else(|| {
            StoreError::NotFound(format!("step `{}` in run {}", new.step, run.run_id))
        })?;
        let legal = matches!(
            (old.status, new.status),
            (TaskStatus::Pending, TaskStatus::Running)
                | (TaskStatus::Running, TaskStatus::Success)
                | (TaskStatus::Running, TaskStatus::Failed)
                | (TaskStatus::Pending, TaskStatus::SkippedUpstreamFailed)
        );
        if !legal {
            return Err(StoreError::IllegalTransition {
                step: new.step.clone(),
                from: old.status.as_str(),
                to: new.status.as_str(),
            });
        }
        run.tasks.insert(new.step.clone(), new);
        run.status = Self::derive_status(run);
        self.save_run(run)
    }

    fn derive_status(run: &RunRecord) -> RunStatus {
        if run.tasks.values().any(|t| {
            matches!(
                t.status,
                TaskStatus::Failed | TaskStatus::SkippedUpstreamFailed
            )
        }) {
            RunStatus::Failed
        } else if run.tasks.values().all(|t| t.status == TaskStatus::Success) {
            RunStatus::Success
        } else {
            RunStatus::Running
        }
    }

    /// Seals a run: final status plus `finished_at`.
    pub fn finish_run(&self, run: &mut RunRecord) -> Result<(), StoreError> {
        run.status = if run.tasks.values().all(|t| t.status == TaskStatus::Success) {
            RunStatus::Success
        } else {
            RunStatus::Failed
        };
        run.finished_at = Some(now_secs());
        self.save_run(run)
    }

    /// All runs of a flow, newest first. Unknown flow yields an empty list.
    pub fn list_runs(&self, flow: &str) -> Result<Vec<RunRecord>, StoreError> {
        let runs_dir = self.flow_dir(flow).join("runs");
        let entries = match fs::read_dir(&runs_dir) {
            Ok(entries) => entries,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&runs_dir, e)),
        };
        let mut runs = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| io_err(&runs_dir, e))?;
            let meta = entry.path().join("meta.json");
            if meta.is_file() {
                runs.push(read_json::<RunRecord>(&meta)?);
            }
        }
        runs.sort_by(|a, b| {
            let na: u64 = a.run_id.parse().unwrap_or(0);
            let nb: u64 = b.run_id.parse().unwrap_or(0);
            nb.cmp(&na)
        });
        Ok(runs)
    }

    /// Stores a rendered card and appends it to the flow's card index.
    pub fn put_card(
        &self,
        flow: &str,
        scope: &[String],
        html: &[u8],
    ) -> Result<CardIndexEntry, StoreError> {
        if html.is_empty() {
            return Err(StoreError::Invalid("card html must not be empty".into()));
        }
        let object = self.put_object(html)?;
        let dir = self.flow_dir(flow);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let lock_path = dir.join("cards.lock");
        let lock = fs::OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(|e| io_err(&lock_path, e))?;
        lock.lock_exclusive().map_err(|e| io_err(&lock_path, e))?;
        let mut index = self.list_cards(flow)?;
        let entry = CardIndexEntry {
            version: index.len() as u32 + 1,
            created_at: now_secs(),
            scope: scope.to_vec(),
            object,
        };
        index.push(entry.clone());
        write_json(&dir.join("cards.json"), &index)?;
        let _ = fs2::FileExt::unlock(&lock);
        Ok(entry)
    }

    pub fn list_cards(&self, flow: &str) -> Result<Vec<CardIndexEntry>, StoreError> {
        let path = self.flow_dir(flow).join("cards.json");
        if !path.is_file() {
            return Ok(Vec::new());
        }
        read_json(&path)
    }

    /// Persists an extra JSON document inside a run directory
    /// (for example the behavioral test report).
    pub fn write_run_json<T: Serialize>(
        &self,
        flow: &str,
        run_id: &str,
        name: &str,
        value: &T,
    ) -> Result<(), StoreError> {
        write_json(&self.run_dir(flow, run_id).join(name), value)
    }

    pub fn read_run_json<T: DeserializeOwned>(
        &self,
        flow: &str,
        run_id: &str,
        name: &str,
    ) -> Result<Option<T>, StoreError> {
        let path = self.run_dir(flow, run_id).join(name);
        if !path.is_file() {
            return Ok(None);
        }
        read_json(&path).map(Some)
    }

    pub fn count_objects(&self) -> Result<usize, StoreError> {
        Ok(self.object_files()?.len())
    }

    /// Re-hashes every stored object; returns a description per mismatch.
    /// An empty result means the store is consistent.
    pub fn verify_objects(&self) -> Result<Vec<String>, StoreError> {
        let mut issues = Vec::new();
        for path in self.object_files()? {
            let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
            let actual = hex::encode(Sha256::digest(&bytes));
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            let shard = path
                .parent()
                .and_then(|p| p.file_name())
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            if actual != name {
                issues.push(format!("{} hashes to {actual}", path.display()));
            } else if !name.starts_with(&shard) {
                issues.push(format!("{} is in the wrong shard", path.display()));
            }
        }
        Ok(issues)
    }

    fn object_files(&self) -> Result<Vec<PathBuf>, StoreError> {
        let objects = self.root.join("objects");
        let mut files = Vec::new();
        let shards = match fs::read_dir(&objects) {
            Ok(entries) => entries,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(files),
            Err(e) => return Err(io_err(&objects, e)),
        };
        for shard in shards {
            let shard = shard.map_err(|e| io_err(&objects, e))?.path();
            if !shard.is_dir() {
                continue;
            }
            for entry in fs::read_dir(&shard).map_err(|e| io_err(&shard, e))? {
                let path = entry.map_err(|e| io_err(&shard, e))?.path();
                let hidden = path
                    .file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with('.'))
                    .unwrap_or(true);
                if path.is_file() && !hidden {
                    files.push(path);
                }
            }
        }
        files.sort();
        Ok(files)
    }
}
