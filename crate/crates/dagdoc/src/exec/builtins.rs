//! Builtins run in-process by the executor with the same record-keeping
//! as external commands. The only builtin today is `train_toy`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Result of a builtin: log text for the task record. Output files are
/// already written at their declared paths when this returns.
#[derive(Debug)]
pub struct BuiltinOutcome {
    pub log: String,
}

/// Dispatches a builtin by name. Settings arrive template-resolved;
/// `outputs` maps declared artifact names to the paths to write.
/// An `Err` is a task failure with the given reason.
pub fn run_builtin(
    name: &str,
    settings: &BTreeMap<String, String>,
    outputs: &BTreeMap<String, PathBuf>,
    metrics_path: &Path,
) -> Result<BuiltinOutcome, String> {
    match name {
        "train_toy" => train_toy(settings, outputs, metrics_path),
        other => Err(format!("unknown builtin `{other}`")),
    }
}

/// Fits y = w*x + b by full-batch gradient descent on mean squared error,
/// starting from w = b = 0. Writes per-epoch `loss` metrics (computed
/// before each update, so epoch 0 is the zero-init loss), a `model`
/// artifact, and a `summary` artifact describing the architecture.
fn train_toy(
    settings: &BTreeMap<String, String>,
    outputs: &BTreeMap<String, PathBuf>,
    metrics_path: &Path,
) -> Result<BuiltinOutcome, String> {
    for key in settings.keys() {
        if !matches!(key.as_str(), "epochs" | "lr" | "data") {
            return Err(format!("unknown setting `{key}`"));
        }
    }
    let epochs: u64 = match settings.get("epochs") {
        None => return Err("missing setting `epochs`".to_string()),
        Some(v) => v.parse().ok().filter(|e| *e >= 1).ok_or(format!(
            "bad setting `epochs`: `{v}` is not a positive integer"
        ))?,
    };
    let lr: f64 = match settings.get("lr") {
        None => return Err("missing setting `lr`".to_string()),
        Some(v) => v
            .parse()
            .ok()
            .filter(|lr: &f64| lr.is_finite() && *lr > 0.0)
            .ok_or(format!("bad setting `lr`: `{v}` is not a positive number"))?,
    };
    let data = settings
        .get("data")
        .ok_or("missing setting `data`".to_string())?;
    // a value naming an existing file means file data, anything else
    // is treated as inline pairs
    let text = if Path::new(data).is_file() {
        fs::read_to_string(data).map_err(|e| format!("cannot read data file `{data}`: {e}"))?
    } else {
        data.clone()
    };
    let points = parse_points(&text)?;
    if points.len() < 2 {
        return Err(format!(
            "degenerate data: need at least 2 points, got {}",
            points.len()
        ));
    }
    if points.iter().all(|(x, _)| *x == points[0].0) {
        return Err("degenerate data: zero variance in x".to_string());
    }

    let n = points.len() as f64;
    let mut w = 0.0f64;
    let mut b = 0.0f64;
    let mut metrics = String::new();
    let mut last_loss = f64::NAN;
    for epoch in 0..epochs {
        let mut loss = 0.0;
        let mut grad_w = 0.0;
        let mut grad_b = 0.0;
        for (x, y) in &points {
            let err = w * x + b - y;
            loss += err * err;
            grad_w += err * x;
            grad_b += err;
        }
        loss /= n;
        writeln!(
            metrics,
            "{{\"epoch\": {epoch}, \"name\": \"loss\", \"value\": {}}}",
            serde_json::to_string(&loss).map_err(|e| e.to_string())?
        )
        .expect("writing to a String");
        w -= lr * 2.0 / n * grad_w;
        b -= lr * 2.0 / n * grad_b;
        last_loss = loss;
    }

    fs::write(metrics_path, &metrics).map_err(|e| format!("cannot write metrics file: {e}"))?;
    if let Some(path) = outputs.get("model") {
        let model = format!("w={} b={}\n", fmt_sig12(w), fmt_sig12(b));
        fs::write(path, model).map_err(|e| format!("cannot write model: {e}"))?;
    }
    if let Some(path) = outputs.get("summary") {
        let summary = format!(
            "model: linear y = w*x + b\nparameter count = 2\nepochs = {epochs}\nlr = {lr}\n"
        );
        fs::write(path, summary).map_err(|e| format!("cannot write summary: {e}"))?;
    }

    Ok(BuiltinOutcome {
        log: format!(
            "train_toy: {} points, epochs={epochs}, lr={lr}\nfinal: w={} b={} loss={}\n",
            points.len(),
            fmt_sig12(w),
            fmt_sig12(b),
            serde_json::to_string(&last_loss).unwrap_or_default(),
        ),
    })
}

/// Accepts inline pairs (`1:3, 2:5`) and file contents (`1,3` per line):
/// every numeric token is collected in order and consecutive tokens pair
/// up as (x, y). Lines starting with `#` are skipped.
fn parse_points(text: &str) -> Result<Vec<(f64, f64)>, String> {
    let mut values = Vec::new();
    for line in text.lines() {
        if line.trim_start().starts_with('#') {
            continue;
        }
        for token in line.split([',', ':', ';']).flat_map(str::split_whitespace) {
            let v: f64 = token
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or(format!(
                    "bad setting `data`: `{token}` is not a finite number"
                ))?;
            values.push(v);
        }
    }
    if values.len() % 2 != 0 {
        return Err(format!(
            "bad setting `data`: odd number of values ({})",
            values.len()
        ));
    }
    Ok(values.chunks(2).map(|c| (c[0], c[1])).collect())
}

/// Plain-decimal formatting at 12 significant digits.
pub fn fmt_sig12(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v.is_finite() {
            "0".to_string()
        } else {
            v.to_string()
        };
    }
    let exp = v.abs().log10().floor() as i32;
    let prec = (11 - exp).clamp(0, 17) as usize;
    format!("{v:.prec$}")
}
