//! End-to-end acceptance checks over the shipped example flow and a set
//! of generated fixtures. Each test prints one PASS/FAIL line so the
//! suite doubles as a checklist (`cargo test --test acceptance -- --nocapture`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dagdoc::behavior::run_behavior_suite;
use dagdoc::card::{build_card_model, default_providers, render_card};
use dagdoc::exec::builtins::run_builtin;
use dagdoc::exec::{execute_run, resume_run};
use dagdoc::flow::{
    parse_flow, validate_dag, FlowError, FlowSpec, StepSpec, TaskKind, ValidatedFlow,
};
use dagdoc::metrics::ingest_metrics_file;
use dagdoc::store::{ObjectId, RunStatus, Store, TaskStatus};

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($msg)+));
        }
    };
}

fn criterion(n: u32, desc: &str, body: impl FnOnce() -> Result<(), String>) {
    match body() {
        Ok(()) => println!("ACCEPTANCE {n} PASS: {desc}"),
        Err(reason) => {
            println!("ACCEPTANCE {n} FAIL: {desc}: {reason}");
            panic!("acceptance criterion {n} failed: {reason}");
        }
    }
}

fn example_flow_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../flows/substitute_model.flow")
}

fn dagdoc_cmd(store: &Path, cwd: &Path, args: &[&str]) -> (i32, String, String) {
    let output = Command::new(env!("CARGO_BIN_EXE_dagdoc"))
        .arg("--store")
        .arg(store)
        .args(args)
        .current_dir(cwd)
        .env_remove("DAGDOC_USER")
        .env_remove("DAGDOC_STORE")
        .output()
        .expect("spawn dagdoc");
    (
        output.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&output.stdout).into_owned(),
        String::from_utf8_lossy(&output.stderr).into_owned(),
    )
}

fn load_example() -> ValidatedFlow {
    let source = fs::read_to_string(example_flow_path()).expect("example flow readable");
    validate_dag(&parse_flow(&source).expect("example flow parses")).expect("example flow valid")
}

fn section<'a>(html: &'a str, id: &str) -> Result<&'a str, String> {
    let open = format!("<section id=\"{id}\">");
    let start = html
        .find(&open)
        .ok_or_else(|| format!("section `{id}` missing"))?;
    let end = html[start..]
        .find("</section>")
        .ok_or_else(|| format!("section `{id}` unterminated"))?
        + start;
    Ok(&html[start..end])
}

const SECTION_ORDER: [&str; 7] = [
    "title_menu",
    "description",
    "ownership",
    "structure_params",
    "training_info",
    "loss_chart",
    "behavioral_tests",
];

#[test]
fn criterion_01_card_structural_fidelity() {
    criterion(
        1,
        "example flow renders a seven-section card with grouped parallel wave and gpu marker",
        || {
            let started = Instant::now();
            let dir = tempfile::tempdir().unwrap();
            let store_dir = dir.path().join(".dagdoc");
            let flow_path = example_flow_path();
            let flow_arg = flow_path.to_str().unwrap();

            let (code, _out, err) = dagdoc_cmd(
                &store_dir,
                dir.path(),
                &["run", flow_arg, "--user", "alice"],
            );
            ensure!(code == 0, "run exited {code}: {err}");
            let card_path = dir.path().join("card.html");
            let (code, out, err) = dagdoc_cmd(
                &store_dir,
                dir.path(),
                &["card", flow_arg, "-o", card_path.to_str().unwrap()],
            );
            ensure!(code == 0, "card exited {code}: {err}");
            ensure!(
                ObjectId::parse(out.trim()).is_ok(),
                "card did not print an object id: {out:?}"
            );

            let html = fs::read_to_string(&card_path).map_err(|e| e.to_string())?;
            ensure!(
                html.matches("<section id=\"").count() == 7,
                "expected exactly 7 sections"
            );
            let mut last = 0;
            for id in SECTION_ORDER {
                let at = html
                    .find(&format!("<section id=\"{id}\">"))
                    .ok_or_else(|| format!("section `{id}` missing"))?;
                ensure!(at >= last, "section `{id}` out of order");
                last = at;
            }
            ensure!(
                html.contains("class=\"wave parallel\""),
                "parallel wave not grouped"
            );
            ensure!(html.contains("[gpu]"), "gpu resource marker missing");
            let elapsed = started.elapsed();
            ensure!(
                elapsed.as_secs_f64() < 5.0,
                "took {elapsed:?}, budget is 5 s"
            );
            Ok(())
        },
    );
}

#[test]
fn criterion_02_toy_trainer_correctness() {
    criterion(
        2,
        "trainer matches analytic epoch-0 loss and the normal-equations solution",
        || {
            let dir = tempfile::tempdir().unwrap();
            let model_path = dir.path().join("model.txt");
            let metrics_path = dir.path().join("metrics.ndjson");
            let mut settings = BTreeMap::new();
            settings.insert("epochs".to_string(), "500".to_string());
            settings.insert("lr".to_string(), "0.05".to_string());
            settings.insert("data".to_string(), "1:3, 2:5, 3:7".to_string());
            let mut outputs = BTreeMap::new();
            outputs.insert("model".to_string(), model_path.clone());
            run_builtin("train_toy", &settings, &outputs, &metrics_path)
                .map_err(|e| format!("trainer failed: {e}"))?;

            // independent oracles from the raw data
            let data = [(1.0f64, 3.0f64), (2.0, 5.0), (3.0, 7.0)];
            let n = data.len() as f64;
            let zero_init_loss = data.iter().map(|(_, y)| y * y).sum::<f64>() / n;
            let (sx, sy, sxy, sxx) = data.iter().fold((0.0, 0.0, 0.0, 0.0), |a, (x, y)| {
                (a.0 + x, a.1 + y, a.2 + x * y, a.3 + x * x)
            });
            let w_star = (n * sxy - sx * sy) / (n * sxx - sx * sx);
            let b_star = (sy - w_star * sx) / n;

            let metrics_text = fs::read_to_string(&metrics_path).map_err(|e| e.to_string())?;
            let ingested =
                ingest_metrics_file(&metrics_text, "oracle", "train").map_err(|e| e.to_string())?;
            let loss = ingested
                .series
                .iter()
                .find(|s| s.name == "loss")
                .ok_or("no loss series")?;
            ensure!(loss.points.len() == 500, "expected 500 loss points");
            let first = loss.points.first().unwrap();
            ensure!(first.epoch == 0, "first point is epoch {}", first.epoch);
            ensure!(
                (first.value - zero_init_loss).abs() <= 1e-9,
                "epoch-0 loss {} differs from analytic {zero_init_loss}",
                first.value
            );
            let final_loss = loss.points.last().unwrap().value;
            ensure!(final_loss < 1e-3, "final loss {final_loss} not < 1e-3");

            let model = fs::read_to_string(&model_path).map_err(|e| e.to_string())?;
            let mut numbers = model
                .split(|c: char| c != '-' && c != '.' && !c.is_ascii_digit())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().unwrap());
            let w = numbers.next().ok_or("model text has no w")?;
            let b = numbers.next().ok_or("model text has no b")?;
            ensure!(
                (w - w_star).abs() < 0.05,
                "w {w} not within 0.05 of {w_star}"
            );
            ensure!(
                (b - b_star).abs() < 0.05,
                "b {b} not within 0.05 of {b_star}"
            );
            Ok(())
        },
    );
}

#[test]
fn criterion_03_loss_chart_content() {
    criterion(
        3,
        "loss chart holds one polyline per run, one vertex per epoch, non-increasing",
        || {
            let dir = tempfile::tempdir().unwrap();
            let store = Store::open(dir.path().join(".dagdoc"));
            let flow = load_example();
            let base = example_flow_path().parent().unwrap().to_path_buf();
            let mut epochs_by_run: BTreeMap<String, usize> = BTreeMap::new();
            for epochs in ["30", "50"] {
                let mut params = BTreeMap::new();
                params.insert("epochs".to_string(), epochs.to_string());
                let run = execute_run(&store, &flow, &params, "t", 4, &base)
                    .map_err(|e| e.to_string())?;
                ensure!(
                    run.status == RunStatus::Success,
                    "fixture run failed: {:?}",
                    run.tasks
                );
                epochs_by_run.insert(run.run_id.clone(), epochs.parse().unwrap());
            }
            let model = build_card_model(&store, &flow, 2).map_err(|e| e.to_string())?;
            let html =
                render_card(&store, &model, &default_providers()).map_err(|e| e.to_string())?;
            let chart = section(&html, "loss_chart")?;
            ensure!(
                chart.matches("<polyline").count() == 2,
                "expected 2 polylines"
            );
            for part in chart.split("<polyline").skip(1) {
                let run_id = part
                    .split("data-run=\"")
                    .nth(1)
                    .and_then(|s| s.split('"').next())
                    .ok_or("polyline without data-run")?;
                let points = part
                    .split("points=\"")
                    .nth(1)
                    .and_then(|s| s.split('"').next())
                    .ok_or("polyline without points")?;
                let ys: Vec<f64> = points
                    .split_whitespace()
                    .map(|pair| pair.split(',').nth(1).unwrap().parse().unwrap())
                    .collect();
                let want = epochs_by_run
                    .get(run_id)
                    .ok_or_else(|| format!("unknown run {run_id} in chart"))?;
                ensure!(
                    ys.len() == *want,
                    "run {run_id}: {} vertices for {want} epochs",
                    ys.len()
                );
                // svg y grows downward; non-increasing loss means
                // non-decreasing y (2-decimal rounding can tie)
                for pair in ys.windows(2) {
                    ensure!(
                        pair[1] >= pair[0] - 0.011,
                        "run {run_id}: loss increased ({} then {})",
                        pair[0],
                        pair[1]
                    );
                }
            }
            Ok(())
        },
    );
}

#[test]
fn criterion_04_determinism() {
    criterion(
        4,
        "unchanged store renders identical bytes and ids; builtin flows reproduce artifact ids",
        || {
            let dir = tempfile::tempdir().unwrap();
            let store_dir = dir.path().join(".dagdoc");
            let flow_path = example_flow_path();
            let flow_arg = flow_path.to_str().unwrap();
            let (code, _, err) =
                dagdoc_cmd(&store_dir, dir.path(), &["run", flow_arg, "--user", "a"]);
            ensure!(code == 0, "run failed: {err}");

            let card_a = dir.path().join("a.html");
            let card_b = dir.path().join("b.html");
            let (_, id_a, _) = dagdoc_cmd(
                &store_dir,
                dir.path(),
                &["card", flow_arg, "-o", card_a.to_str().unwrap()],
            );
            let (_, id_b, _) = dagdoc_cmd(
                &store_dir,
                dir.path(),
                &["card", flow_arg, "-o", card_b.to_str().unwrap()],
            );
            ensure!(
                id_a == id_b && !id_a.trim().is_empty(),
                "card ids differ: {id_a:?} vs {id_b:?}"
            );
            let bytes_a = fs::read(&card_a).map_err(|e| e.to_string())?;
            let bytes_b = fs::read(&card_b).map_err(|e| e.to_string())?;
            ensure!(bytes_a == bytes_b, "card bytes differ across renders");

            // two clean executions of an all-builtin flow
            let src = "flow pure\nstep train\nbuiltin train_toy epochs=40 lr=0.05 data=\"1:3, 2:5, 3:7\"\nout model \"m.txt\"\nout summary \"s.txt\"\n";
            let flow = validate_dag(&parse_flow(src).unwrap()).unwrap();
            let mut artifact_sets = Vec::new();
            for _ in 0..2 {
                let clean = tempfile::tempdir().unwrap();
                let store = Store::open(clean.path().join(".dagdoc"));
                let run = execute_run(&store, &flow, &BTreeMap::new(), "t", 2, clean.path())
                    .map_err(|e| e.to_string())?;
                ensure!(run.status == RunStatus::Success, "builtin run failed");
                let ids: BTreeMap<String, Vec<String>> = run
                    .tasks
                    .iter()
                    .map(|(step, task)| {
                        (
                            step.clone(),
                            task.artifacts
                                .iter()
                                .map(|a| a.object.as_str().to_string())
                                .collect(),
                        )
                    })
                    .collect();
                artifact_sets.push(ids);
            }
            ensure!(
                artifact_sets[0] == artifact_sets[1],
                "artifact ids differ between clean executions: {:?} vs {:?}",
                artifact_sets[0],
                artifact_sets[1]
            );
            Ok(())
        },
    );
}

#[test]
fn criterion_05_resume_semantics() {
    criterion(
        5,
        "resume reruns only the failure and downstream; upstream artifacts stable; card shows success",
        || {
            let dir = tempfile::tempdir().unwrap();
            let marker = dir.path().join("unblock.marker");
            let src = format!(
                "flow patchwork\n\
                 step fetch\nexec \"printf 'x,y\\n1,3\\n' > data.csv\"\nout data \"data.csv\"\n\
                 step shape after fetch\nexec \"cat {{artifact.fetch.data}} > shaped.csv\"\nout shaped \"shaped.csv\"\n\
                 step gate after shape\nexec \"test -f {}\"\n\
                 step publish after gate\nexec \"true\"\n",
                marker.display()
            );
            let store = Store::open(dir.path().join(".dagdoc"));
            let flow = validate_dag(&parse_flow(&src).unwrap()).unwrap();
            let run = execute_run(&store, &flow, &BTreeMap::new(), "t", 2, dir.path())
                .map_err(|e| e.to_string())?;
            ensure!(run.status == RunStatus::Failed, "gate should have failed");
            ensure!(
                run.tasks["publish"].status == TaskStatus::SkippedUpstreamFailed,
                "publish should be skipped"
            );
            let fetch_before = run.tasks["fetch"].clone();
            let shape_before = run.tasks["shape"].clone();

            fs::write(&marker, "").map_err(|e| e.to_string())?;
            let resumed =
                resume_run(&store, "patchwork", &run.run_id, 2).map_err(|e| e.to_string())?;
            ensure!(
                resumed.status == RunStatus::Success,
                "resume did not succeed"
            );
            for (before, after) in [
                (&fetch_before, &resumed.tasks["fetch"]),
                (&shape_before, &resumed.tasks["shape"]),
            ] {
                ensure!(
                    before.started_at == after.started_at
                        && before.finished_at == after.finished_at,
                    "upstream step `{}` was re-executed",
                    before.step
                );
                let ids_before: Vec<&str> =
                    before.artifacts.iter().map(|a| a.object.as_str()).collect();
                let ids_after: Vec<&str> =
                    after.artifacts.iter().map(|a| a.object.as_str()).collect();
                ensure!(
                    ids_before == ids_after,
                    "upstream artifacts changed for `{}`",
                    before.step
                );
            }
            ensure!(
                resumed.tasks["gate"].status == TaskStatus::Success
                    && resumed.tasks["publish"].status == TaskStatus::Success,
                "failed/downstream steps not re-run"
            );

            let model = build_card_model(&store, &flow, 2).map_err(|e| e.to_string())?;
            let html =
                render_card(&store, &model, &default_providers()).map_err(|e| e.to_string())?;
            ensure!(
                section(&html, "training_info")?.contains(&format!("run {} (success)", run.run_id)),
                "card does not reflect the resumed success"
            );
            Ok(())
        },
    );
}

#[test]
fn criterion_06_store_properties() {
    criterion(
        6,
        "1000 random round-trips, dedup, full-store verify, 8 gap-free concurrent run ids",
        || {
            let started = Instant::now();
            let dir = tempfile::tempdir().unwrap();
            let store = Store::open(dir.path().join(".dagdoc"));
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);

            let mut blobs = Vec::new();
            for _ in 0..1000 {
                let len = rng.gen_range(0..2048);
                let mut blob = vec![0u8; len];
                rng.fill(&mut blob[..]);
                blobs.push(blob);
            }
            let mut ids = Vec::new();
            for blob in &blobs {
                ids.push(store.put_object(blob).map_err(|e| e.to_string())?);
            }
            for (blob, id) in blobs.iter().zip(&ids) {
                let back = store.get_object(id).map_err(|e| e.to_string())?;
                ensure!(&back == blob, "round-trip mismatch for {id}");
            }

            let count_before = store.count_objects().map_err(|e| e.to_string())?;
            for blob in &blobs {
                store.put_object(blob).map_err(|e| e.to_string())?;
            }
            let count_after = store.count_objects().map_err(|e| e.to_string())?;
            ensure!(
                count_before == count_after,
                "duplicate puts changed object count: {count_before} -> {count_after}"
            );

            let issues = store.verify_objects().map_err(|e| e.to_string())?;
            ensure!(
                issues.is_empty(),
                "store scan found corrupt objects: {issues:?}"
            );

            let flow =
                validate_dag(&parse_flow("flow burst\nstep s\nexec \"true\"\n").unwrap()).unwrap();
            let base = dir.path().to_path_buf();
            let run_ids: Vec<String> = std::thread::scope(|scope| {
                let handles: Vec<_> = (0..8)
                    .map(|_| {
                        let store = &store;
                        let flow = &flow;
                        let base = &base;
                        scope.spawn(move || {
                            store
                                .create_run(flow, &BTreeMap::new(), "t", base)
                                .map(|r| r.run_id)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("no panics"))
                    .collect::<Result<Vec<_>, _>>()
            })
            .map_err(|e| e.to_string())?;
            let mut sorted = run_ids.clone();
            sorted.sort();
            sorted.dedup();
            ensure!(sorted.len() == 8, "duplicate run ids: {run_ids:?}");
            let expected: Vec<String> = (1..=8).map(|n| format!("{n:06}")).collect();
            ensure!(
                sorted == expected,
                "run ids not gap-free from 000001: {sorted:?}"
            );

            let elapsed = started.elapsed();
            ensure!(
                elapsed.as_secs_f64() < 30.0,
                "took {elapsed:?}, budget is 30 s"
            );
            Ok(())
        },
    );
}

fn synthetic_flow(step_count: usize, edges: &[(usize, usize)]) -> FlowSpec {
    let name = |i: usize| format!("s{i:02}");
    let steps = (0..step_count)
        .map(|i| StepSpec {
            name: name(i),
            doc: String::new(),
            after: edges
                .iter()
                .filter(|(_, to)| *to == i)
                .map(|(from, _)| name(*from))
                .collect(),
            resources: Vec::new(),
            task: TaskKind::Exec {
                command: "true".to_string(),
            },
            outputs: Vec::new(),
        })
        .collect();
    FlowSpec {
        name: "synthetic".to_string(),
        doc: String::new(),
        params: Vec::new(),
        inputs: Vec::new(),
        steps,
        behaviors: Vec::new(),
        source_text: String::new(),
    }
}

/// Straightforward recursive DFS cycle check, independent of the
/// library's Kahn-based validator.
fn oracle_has_cycle(step_count: usize, edges: &[(usize, usize)]) -> bool {
    fn visit(
        node: usize,
        adj: &[Vec<usize>],
        state: &mut [u8], // 0 unvisited, 1 in progress, 2 done
    ) -> bool {
        state[node] = 1;
        for &next in &adj[node] {
            if state[next] == 1 || (state[next] == 0 && visit(next, adj, state)) {
                return true;
            }
        }
        state[node] = 2;
        false
    }
    let mut adj = vec![Vec::new(); step_count];
    for &(from, to) in edges {
        adj[from].push(to);
    }
    let mut state = vec![0u8; step_count];
    (0..step_count).any(|n| state[n] == 0 && visit(n, &adj, &mut state))
}

/// Longest-path depth by relaxation, independent of the wave scheduler.
fn oracle_depths(step_count: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut depth = vec![0usize; step_count];
    // relax repeatedly; step_count passes suffice for any DAG
    for _ in 0..step_count {
        for &(from, to) in edges {
            depth[to] = depth[to].max(depth[from] + 1);
        }
    }
    depth
}

#[test]
fn criterion_07_dag_properties() {
    criterion(
        7,
        "200 random DAGs agree with cycle/order/depth oracles; crafted cycles named",
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(0xda6);
            let mut cyclic_seen = 0usize;
            let mut acyclic_seen = 0usize;
            for round in 0..200 {
                let n = rng.gen_range(1..=12);
                let mut edges = Vec::new();
                // random graph; later rounds flip some edges backward to
                // invite cycles
                for to in 0..n {
                    for from in 0..n {
                        if from == to {
                            continue;
                        }
                        let p = if round % 2 == 0 { 0.25 } else { 0.15 };
                        let forward_only = round % 2 == 0;
                        if rng.gen_bool(p) && (!forward_only || from < to) {
                            edges.push((from, to));
                        }
                    }
                }
                let spec = synthetic_flow(n, &edges);
                let has_cycle = oracle_has_cycle(n, &edges);
                // a rootless graph is rejected before cycle detection
                let rootless = n > 0 && (0..n).all(|node| edges.iter().any(|(_, to)| *to == node));
                match validate_dag(&spec) {
                    Ok(flow) => {
                        ensure!(
                            !has_cycle,
                            "round {round}: validator accepted a cyclic graph"
                        );
                        acyclic_seen += 1;
                        let position: BTreeMap<&str, usize> = flow
                            .topo_order
                            .iter()
                            .enumerate()
                            .map(|(i, s)| (s.as_str(), i))
                            .collect();
                        for (from, to) in &edges {
                            let f = format!("s{from:02}");
                            let t = format!("s{to:02}");
                            ensure!(
                                position[f.as_str()] < position[t.as_str()],
                                "round {round}: edge {f}->{t} not forward in topo order"
                            );
                        }
                        let depths = oracle_depths(n, &edges);
                        let waves = flow.waves();
                        for (wave_index, wave) in waves.iter().enumerate() {
                            for name in wave {
                                let index: usize = name[1..].parse().unwrap();
                                ensure!(
                                    depths[index] == wave_index,
                                    "round {round}: step {name} in wave {wave_index}, oracle depth {}",
                                    depths[index]
                                );
                            }
                        }
                    }
                    Err(FlowError::Cycle { cycle }) => {
                        ensure!(
                            has_cycle,
                            "round {round}: cycle reported for an acyclic graph"
                        );
                        cyclic_seen += 1;
                        ensure!(
                            cycle.len() >= 2 && cycle.first() == cycle.last(),
                            "round {round}: cycle path not closed: {cycle:?}"
                        );
                        for pair in cycle.windows(2) {
                            let from: usize = pair[0][1..].parse().unwrap();
                            let to: usize = pair[1][1..].parse().unwrap();
                            ensure!(
                                edges.contains(&(from, to)),
                                "round {round}: reported cycle uses missing edge {from}->{to}"
                            );
                        }
                    }
                    Err(FlowError::NoRoot) => {
                        ensure!(rootless, "round {round}: NoRoot reported but a root exists");
                        // every rootless finite graph has a cycle
                        ensure!(has_cycle, "round {round}: rootless graph without cycle?");
                        cyclic_seen += 1;
                    }
                    Err(other) => {
                        return Err(format!("round {round}: unexpected error {other}"));
                    }
                }
            }
            ensure!(
                acyclic_seen >= 50 && cyclic_seen >= 20,
                "generator imbalance: {acyclic_seen} acyclic, {cyclic_seen} cyclic"
            );

            // crafted rooted cycles must be rejected with a concrete path
            for edges in [
                vec![(0, 1), (1, 2), (2, 1)],
                vec![(0, 1), (1, 2), (2, 3), (3, 1)],
            ] {
                let spec = synthetic_flow(4, &edges);
                match validate_dag(&spec) {
                    Err(FlowError::Cycle { cycle }) => {
                        ensure!(
                            cycle.first() == cycle.last() && cycle.len() >= 3,
                            "crafted cycle path malformed: {cycle:?}"
                        );
                    }
                    other => {
                        return Err(format!(
                            "crafted cyclic fixture not rejected with a cycle: {other:?}"
                        ))
                    }
                }
            }
            Ok(())
        },
    );
}

#[test]
fn criterion_08_behavioral_test_totals() {
    criterion(
        8,
        "2-pass/1-fail suite: identical totals in CLI output and card, exit code 1",
        || {
            let dir = tempfile::tempdir().unwrap();
            let store_dir = dir.path().join(".dagdoc");
            let flow_src = "flow checks\n\
                step speak\nexec \"printf 'white sneaker low' > words.txt\"\nout words \"words.txt\"\n\
                behavior \"finds the sneaker\"\nvia \"cat {artifact.speak.words}\"\nexpect contains \"sneaker\"\n\
                behavior \"echo round-trip\"\ninput \"hello\"\nvia \"cat\"\nexpect equals \"hello\"\n\
                behavior \"expects a boot\"\nvia \"cat {artifact.speak.words}\"\nexpect contains \"boot\"\n";
            let flow_path = dir.path().join("checks.flow");
            fs::write(&flow_path, flow_src).map_err(|e| e.to_string())?;
            let flow_arg = flow_path.to_str().unwrap();

            let (code, _, err) = dagdoc_cmd(&store_dir, dir.path(), &["run", flow_arg]);
            ensure!(code == 0, "run failed: {err}");
            let (code, out, _) = dagdoc_cmd(&store_dir, dir.path(), &["test", flow_arg]);
            ensure!(code == 1, "test exit code {code}, want 1");
            ensure!(
                out.contains("totals: 2 passed, 1 failed, 0 errors"),
                "CLI totals wrong: {out:?}"
            );

            let card_path = dir.path().join("card.html");
            let (code, _, err) = dagdoc_cmd(
                &store_dir,
                dir.path(),
                &["card", flow_arg, "-o", card_path.to_str().unwrap()],
            );
            ensure!(code == 0, "card failed: {err}");
            let html = fs::read_to_string(&card_path).map_err(|e| e.to_string())?;
            ensure!(
                section(&html, "behavioral_tests")?.contains("2 passed, 1 failed, 0 errors"),
                "card totals do not match CLI totals"
            );
            Ok(())
        },
    );
}

#[test]
fn criterion_09_self_containment_and_escaping() {
    criterion(
        9,
        "cards have no external references; HTML metacharacters in docs render escaped",
        || {
            let dir = tempfile::tempdir().unwrap();
            let store = Store::open(dir.path().join(".dagdoc"));
            let src = "flow spiky\n\
                doc \"contains <script>alert('x')</script> & <img> markup\"\n\
                step s\nexec \"true\"\n";
            let flow = validate_dag(&parse_flow(src).unwrap()).unwrap();
            execute_run(&store, &flow, &BTreeMap::new(), "t", 1, dir.path())
                .map_err(|e| e.to_string())?;
            let model = build_card_model(&store, &flow, 2).map_err(|e| e.to_string())?;
            let html =
                render_card(&store, &model, &default_providers()).map_err(|e| e.to_string())?;
            for banned in ["http://", "https://", "src=", "<script"] {
                ensure!(!html.contains(banned), "card contains `{banned}`");
            }
            ensure!(
                html.contains("&lt;script&gt;alert(&#39;x&#39;)&lt;/script&gt; &amp; &lt;img&gt;"),
                "doc markup not escaped"
            );
            Ok(())
        },
    );
}

#[test]
fn criterion_10_freshness_sectionwise_diff() {
    criterion(
        10,
        "a new run changes run-level sections only; flow-level sections byte-identical",
        || {
            let dir = tempfile::tempdir().unwrap();
            let store = Store::open(dir.path().join(".dagdoc"));
            let flow = load_example();
            let base = example_flow_path().parent().unwrap().to_path_buf();

            let run = execute_run(&store, &flow, &BTreeMap::new(), "alice", 4, &base)
                .map_err(|e| e.to_string())?;
            ensure!(run.status == RunStatus::Success, "first run failed");
            run_behavior_suite(&store, &flow, &run).map_err(|e| e.to_string())?;
            let before = render_card(
                &store,
                &build_card_model(&store, &flow, 2).map_err(|e| e.to_string())?,
                &default_providers(),
            )
            .map_err(|e| e.to_string())?;

            let run2 = execute_run(&store, &flow, &BTreeMap::new(), "bob", 4, &base)
                .map_err(|e| e.to_string())?;
            ensure!(run2.status == RunStatus::Success, "second run failed");
            run_behavior_suite(&store, &flow, &run2).map_err(|e| e.to_string())?;
            let after = render_card(
                &store,
                &build_card_model(&store, &flow, 2).map_err(|e| e.to_string())?,
                &default_providers(),
            )
            .map_err(|e| e.to_string())?;

            ensure!(before != after, "card unchanged after a new run");
            for flow_level in ["title_menu", "description", "structure_params"] {
                ensure!(
                    section(&before, flow_level)? == section(&after, flow_level)?,
                    "flow-level section `{flow_level}` changed"
                );
            }
            for run_level in ["training_info", "loss_chart", "behavioral_tests"] {
                ensure!(
                    section(&before, run_level)? != section(&after, run_level)?,
                    "run-level section `{run_level}` did not change"
                );
            }
            Ok(())
        },
    );
}
