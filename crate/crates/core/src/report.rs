//! Run reports and the stability/success correlation harness.
//!
//! Both are pure functions of traces: the same trace bytes always give the
//! same report bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{pearson_correlation, MetricError};
use crate::orchestrator::{ReferenceCheck, ReferenceMatch, RefinementOutcome};
use crate::plan::SubtaskStatus;
use crate::trace::{EventKind, ExecutionTrace, RunStatus, TraceError};

/// Printed in place of CR when no run has a reference answer.
pub const CR_NOT_CONFIGURED: &str = "n/a (no reference answers configured)";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no traces given")]
    NoTraces,
    #[error("trace {index}: {source}")]
    Malformed { index: usize, source: TraceError },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskReport {
    pub id: String,
    pub status: SubtaskStatus,
    /// Gate scores in measurement order, across every prompt revision.
    pub stability_trajectory: Vec<f64>,
    pub refinement_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refinement_outcome: Option<RefinementOutcome>,
    pub augmentation_clauses: usize,
    pub executions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: String,
    pub seed: u64,
    pub status: RunStatus,
    /// Completed with every subtask executed-ok.
    pub succeeded: bool,
    /// Reference check result; `None` when the run has no reference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_output: Option<String>,
    pub subtasks: Vec<SubtaskReport>,
    pub warnings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub runs: Vec<RunRecord>,
    /// Execution success rate.
    pub esr: f64,
    /// Correctness rate over the runs that have a reference answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cr: Option<f64>,
    pub refinement_steps: usize,
    pub augmentation_clauses: usize,
}

/// Exact match compares whitespace-collapsed text; numeric match compares
/// leading numbers within the tolerance.
pub fn reference_matches(output: &str, check: &ReferenceCheck) -> bool {
    match check.matching {
        ReferenceMatch::Exact => collapse(output) == collapse(&check.answer),
        ReferenceMatch::Numeric { tolerance } => {
            match (crate::deviation::leading_number(output), crate::deviation::leading_number(&check.answer)) {
                (Some(a), Some(b)) => (a - b).abs() <= tolerance,
                _ => false,
            }
        }
    }
}

fn collapse(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl SubtaskReport {
    fn empty(id: &str) -> Self {
        SubtaskReport {
            id: id.to_string(),
            status: SubtaskStatus::Pending,
            stability_trajectory: Vec::new(),
            refinement_steps: 0,
            refinement_outcome: None,
            augmentation_clauses: 0,
            executions: 0,
        }
    }
}

fn slot<'m>(map: &'m mut BTreeMap<String, SubtaskReport>, order: &mut Vec<String>, id: &str) -> &'m mut SubtaskReport {
    if !map.contains_key(id) {
        order.push(id.to_string());
    }
    map.entry(id.to_string()).or_insert_with(|| SubtaskReport::empty(id))
}

fn run_record(trace: &ExecutionTrace) -> Result<RunRecord, TraceError> {
    let (status, final_output, plan) = trace.finish().ok_or(TraceError::Unterminated)?;
    let mut subtasks: BTreeMap<String, SubtaskReport> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut warnings = 0;
    for e in &trace.events {
        match &e.event {
            EventKind::Score { subtask: Some(id), score, .. } => {
                slot(&mut subtasks, &mut order, id).stability_trajectory.push(score.value);
            }
            EventKind::RefinementFinished { subtask: Some(id), outcome, steps, .. } => {
                let s = slot(&mut subtasks, &mut order, id);
                s.refinement_steps += steps;
                s.refinement_outcome = Some(*outcome);
            }
            EventKind::Augmentation { subtask, clauses, .. } => {
                slot(&mut subtasks, &mut order, subtask).augmentation_clauses += clauses.len();
            }
            EventKind::Execution { subtask, .. } => slot(&mut subtasks, &mut order, subtask).executions += 1,
            EventKind::StatusChange { subtask, to, .. } => slot(&mut subtasks, &mut order, subtask).status = *to,
            EventKind::Warning { .. } => warnings += 1,
            _ => {}
        }
    }
    // Final plan order and statuses win over event order when present.
    let mut ordered: Vec<SubtaskReport> = Vec::new();
    if let Some(plan) = plan {
        for s in &plan.subtasks {
            let mut r = subtasks.remove(&s.id).unwrap_or_else(|| SubtaskReport::empty(&s.id));
            r.status = s.status;
            ordered.push(r);
        }
    }
    ordered.extend(order.iter().filter_map(|id| subtasks.remove(id)));
    let succeeded = status == RunStatus::Completed
        && !ordered.is_empty()
        && ordered.iter().all(|s| s.status == SubtaskStatus::ExecutedOk);
    let correct = trace
        .header
        .config
        .reference
        .as_ref()
        .map(|check| final_output.is_some_and(|out| reference_matches(out, check)));
    Ok(RunRecord {
        task: trace.header.config.task.clone(),
        seed: trace.header.seed,
        status,
        succeeded,
        correct,
        final_output: final_output.cloned(),
        subtasks: ordered,
        warnings,
    })
}

/// ESR, CR and per-subtask detail over a set of runs.
pub fn compute_run_metrics(traces: &[ExecutionTrace]) -> Result<RunReport, ReportError> {
    if traces.is_empty() {
        return Err(ReportError::NoTraces);
    }
    let runs = traces
        .iter()
        .enumerate()
        .map(|(index, t)| run_record(t).map_err(|source| ReportError::Malformed { index, source }))
        .collect::<Result<Vec<_>, _>>()?;
    let esr = runs.iter().filter(|r| r.succeeded).count() as f64 / runs.len() as f64;
    let judged: Vec<bool> = runs.iter().filter_map(|r| r.correct).collect();
    let cr = (!judged.is_empty()).then(|| judged.iter().filter(|c| **c).count() as f64 / judged.len() as f64);
    let refinement_steps = runs.iter().flat_map(|r| &r.subtasks).map(|s| s.refinement_steps).sum();
    let augmentation_clauses = runs.iter().flat_map(|r| &r.subtasks).map(|s| s.augmentation_clauses).sum();
    Ok(RunReport { runs, esr, cr, refinement_steps, augmentation_clauses })
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable form.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "runs: {}", self.runs.len());
        let _ = writeln!(out, "ESR: {:.4}", self.esr);
        match self.cr {
            Some(cr) => {
                let _ = writeln!(out, "CR: {cr:.4}");
            }
            None => {
                let _ = writeln!(out, "CR: {CR_NOT_CONFIGURED}");
            }
        }
        let _ = writeln!(out, "refinement steps: {}", self.refinement_steps);
        let _ = writeln!(out, "augmentation clauses: {}", self.augmentation_clauses);
        for (i, run) in self.runs.iter().enumerate() {
            let _ = writeln!(out, "\nrun {} (seed {}): {}", i + 1, run.seed, run.task);
            let verdict = match run.correct {
                Some(true) => "correct",
                Some(false) => "incorrect",
                None => "unjudged",
            };
            let _ = writeln!(
                out,
                "  status {}, {}, {}, {} warning(s)",
                serde_json::to_value(run.status).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
                if run.succeeded { "succeeded" } else { "not succeeded" },
                verdict,
                run.warnings
            );
            if let Some(output) = &run.final_output {
                let _ = writeln!(out, "  final output: {}", output.replace('\n', " "));
            }
            for s in &run.subtasks {
                let trajectory: Vec<String> = s.stability_trajectory.iter().map(|v| format!("{v:.4}")).collect();
                let _ = writeln!(
                    out,
                    "  - {} [{}] stability [{}], {} refinement step(s){}, {} augmentation clause(s), {} execution(s)",
                    s.id,
                    s.status,
                    trajectory.join(", "),
                    s.refinement_steps,
                    match s.refinement_outcome {
                        Some(RefinementOutcome::Exhausted) => " (exhausted)",
                        _ => "",
                    },
                    s.augmentation_clauses,
                    s.executions
                );
            }
        }
        out
    }
}

/// One gated prompt: the score it passed the gate with and whether its
/// first execution succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptObservation {
    pub trace: usize,
    pub subtask: String,
    pub stability: f64,
    pub success: bool,
}

/// Observations of one trace, in execution order. Subtasks executed without
/// a preceding score are skipped.
pub fn prompt_observations(trace_index: usize, trace: &ExecutionTrace) -> Vec<PromptObservation> {
    let mut last_score: BTreeMap<&str, f64> = BTreeMap::new();
    let mut seen: BTreeMap<&str, ()> = BTreeMap::new();
    let mut out = Vec::new();
    for e in &trace.events {
        match &e.event {
            EventKind::Score { subtask: Some(id), score, .. } => {
                last_score.insert(id, score.value);
            }
            EventKind::Execution { subtask, failure, .. } if seen.insert(subtask, ()).is_none() => {
                if let Some(stability) = last_score.get(subtask.as_str()) {
                    out.push(PromptObservation {
                        trace: trace_index,
                        subtask: subtask.clone(),
                        stability: *stability,
                        success: failure.is_none(),
                    });
                }
            }
            _ => {}
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub n: usize,
    /// Pearson r between gate score and first-attempt success (0/1).
    pub r: f64,
    pub observations: Vec<PromptObservation>,
}

impl CorrelationReport {
    pub fn render_text(&self) -> String {
        format!("prompts: {}\npearson r: {:.6}\n", self.n, self.r)
    }
}

pub fn correlate(traces: &[ExecutionTrace]) -> Result<CorrelationReport, ReportError> {
    if traces.is_empty() {
        return Err(ReportError::NoTraces);
    }
    let observations: Vec<PromptObservation> =
        traces.iter().enumerate().flat_map(|(i, t)| prompt_observations(i, t)).collect();
    let xs: Vec<f64> = observations.iter().map(|o| o.stability).collect();
    let ys: Vec<f64> = observations.iter().map(|o| if o.success { 1.0 } else { 0.0 }).collect();
    let r = pearson_correlation(&xs, &ys)?;
    Ok(CorrelationReport { n: observations.len(), r, observations })
}
