//! Flow definitions: the DSL front end and the validated DAG model.
//!
//! A flow file declares a named pipeline as a list of steps with explicit
//! `after` dependencies, typed parameters, input files, and trailing
//! behavioral test cases. Parsing produces a [`FlowSpec`]; [`validate_dag`]
//! checks acyclicity and yields a [`ValidatedFlow`] carrying a
//! deterministic topological order.

mod fingerprint;
mod graph;
mod parser;

pub use fingerprint::{flow_fingerprint, normalize_source, FlowFingerprint};
pub use graph::{execution_waves, validate_dag, ValidatedFlow};
pub use parser::parse_flow;

use thiserror::Error;

/// Errors produced while parsing or validating a flow file.
#[derive(Debug, Error)]
pub enum FlowError {
    #[error("{line}:{col}: syntax error: {msg}")]
    Syntax {
        line: usize,
        col: usize,
        msg: String,
    },
    #[error("{line}:{col}: duplicate name `{name}`")]
    DuplicateName {
        line: usize,
        col: usize,
        name: String,
    },
    #[error("{line}:{col}: `after` names unknown step `{name}`")]
    UnknownReference {
        line: usize,
        col: usize,
        name: String,
    },
    #[error("{line}:{col}: bad literal: {msg}")]
    BadLiteral {
        line: usize,
        col: usize,
        msg: String,
    },
    #[error("dependency cycle: {}", cycle.join(" -> "))]
    Cycle { cycle: Vec<String> },
    #[error("flow has no root step: every step declares a predecessor")]
    NoRoot,
}

impl FlowError {
    /// Line/column of the offending token, when the error has a position.
    pub fn position(&self) -> Option<(usize, usize)> {
        match self {
            FlowError::Syntax { line, col, .. }
            | FlowError::DuplicateName { line, col, .. }
            | FlowError::UnknownReference { line, col, .. }
            | FlowError::BadLiteral { line, col, .. } => Some((*line, *col)),
            FlowError::Cycle { .. } | FlowError::NoRoot => None,
        }
    }
}

/// A parsed flow file: the DAG of steps plus parameters, inputs, and
/// behavioral test cases. `source_text` preserves the file byte-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSpec {
    pub name: String,
    pub doc: String,
    pub params: Vec<ParamSpec>,
    pub inputs: Vec<InputSpec>,
    pub steps: Vec<StepSpec>,
    pub behaviors: Vec<BehaviorCase>,
    pub source_text: String,
}

impl FlowSpec {
    pub fn step(&self, name: &str) -> Option<&StepSpec> {
        self.steps.iter().find(|s| s.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn input(&self, name: &str) -> Option<&InputSpec> {
        self.inputs.iter().find(|i| i.name == name)
    }
}

/// One node of the flow DAG.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSpec {
    pub name: String,
    pub doc: String,
    /// Predecessor step names, in declaration order, deduplicated.
    pub after: Vec<String>,
    /// Free-form resource tags (e.g. `gpu`), recorded and rendered only.
    pub resources: Vec<String>,
    pub task: TaskKind,
    /// Declared outputs as (artifact name, path relative to the task
    /// working directory).
    pub outputs: Vec<(String, String)>,
}

/// The single task a step yields when executed.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskKind {
    /// A shell command template run via `/bin/sh -c`.
    Exec { command: String },
    /// A named in-process builtin with key=value settings.
    Builtin {
        name: String,
        settings: Vec<(String, String)>,
    },
}

/// Scalar kinds a flow parameter can take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Int,
    Float,
    Text,
    Flag,
}

impl ParamKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParamKind::Int => "int",
            ParamKind::Float => "float",
            ParamKind::Text => "text",
            ParamKind::Flag => "flag",
        }
    }

    /// Checks that a literal parses as this kind.
    pub fn check_literal(&self, literal: &str) -> Result<(), String> {
        match self {
            ParamKind::Int => literal
                .parse::<i64>()
                .map(|_| ())
                .map_err(|_| format!("`{literal}` is not an int")),
            ParamKind::Float => match literal.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(()),
                _ => Err(format!("`{literal}` is not a finite float")),
            },
            ParamKind::Text => Ok(()),
            ParamKind::Flag => match literal {
                "true" | "false" => Ok(()),
                _ => Err(format!("`{literal}` is not a flag (true|false)")),
            },
        }
    }
}

/// A typed flow parameter with an optional default literal.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub default: Option<String>,
}

/// A named input file tracked and snapshotted per run.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSpec {
    pub name: String,
    pub path: String,
}

/// A black-box test case: feed `input` to the `via` command's stdin and
/// check its stdout against `expect`.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorCase {
    pub name: String,
    pub input: String,
    pub via: String,
    pub expect: ExpectKind,
}

/// The predicate a behavior case checks against captured stdout.
#[derive(Debug, Clone, PartialEq)]
pub enum ExpectKind {
    /// Exact match after trimming the trailing newline from the output.
    Equals(String),
    Contains(String),
    /// Regex searched over the full output text.
    Regex(String),
    /// Output parsed as a number; passes iff |observed - target| <= tol.
    Approx {
        target: f64,
        tol: f64,
    },
}

impl ExpectKind {
    pub fn describe(&self) -> String {
        match self {
            ExpectKind::Equals(s) => format!("equals \"{s}\""),
            ExpectKind::Contains(s) => format!("contains \"{s}\""),
            ExpectKind::Regex(s) => format!("regex \"{s}\""),
            ExpectKind::Approx { target, tol } => format!("approx {target} tol {tol}"),
        }
    }
}

/// True for `[A-Za-z_][A-Za-z0-9_]*`.
pub fn is_ident(text: &str) -> bool {
    let mut chars = text.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}
