//! dagdoc: declarative ML pipeline DAGs with tracked runs and generated
//! documentation cards.
//!
//! A pipeline ("flow") is written in a small line-oriented DSL, validated
//! into a DAG, and executed wave by wave with every artifact snapshotted
//! into a content-addressed store. From the flow text plus the run store,
//! dagdoc renders a self-contained HTML card documenting the flow's
//! structure, ownership, parameters, training metrics, and behavioral
//! test results for the most recent runs.
//!
//! Module map:
//! - [`flow`]: DSL parsing, DAG validation, wave scheduling, fingerprints
//! - [`store`]: content-addressed object store and run/task metadata
//! - [`exec`]: wave executor, command templates, builtin tasks, resume
//! - [`metrics`]: per-epoch metric ingestion and the tracker seam
//! - [`behavior`]: black-box input/output tests against a trained run
//! - [`card`]: card model assembly and deterministic HTML rendering
//! - [`cli`]: the `dagdoc` command-line front end

pub mod behavior;
pub mod card;
pub mod cli;
pub mod exec;
pub mod flow;
pub mod metrics;
pub mod store;

pub use flow::{parse_flow, validate_dag, FlowSpec, ValidatedFlow};
pub use store::{ObjectId, RunRecord, Store, TaskRecord};
