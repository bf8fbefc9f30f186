//! Stability-aware prompt orchestration.
//!
//! - [`prompt`] and [`plan`]: modular prompts, I/O constraints, subtask DAGs.
//! - [`metrics`]: semantic stability, token-level KL, Pearson correlation.
//! - [`deviation`]: the aggregation model and its concentration bound, with a
//!   Monte-Carlo checker.
//! - [`backend`]: generator/embedder traits with HTTP and scripted backends.
//! - [`orchestrator`]: planning, the stability gate, execution and plan updates.
//! - [`trace`] and [`report`]: JSON-lines run traces, replay, ESR/CR reports
//!   and the stability/success correlation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backend;
pub mod deviation;
pub mod metrics;
pub mod orchestrator;
pub mod plan;
pub mod prompt;
pub mod report;
pub mod scenarios;
pub mod trace;
