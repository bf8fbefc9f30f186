//! Append-only execution traces in JSON-lines form.
//!
//! Line 1 is the [`TraceHeader`]; every following line is one
//! [`TraceEvent`] with a strictly increasing sequence number. Wall-clock
//! fields (`created_at_ms`, `ts_ms`) are the only nondeterministic content and
//! are removed by [`canonicalize`].

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::EmbeddingVector;
use crate::orchestrator::{
    CallPurpose, ExecutionFailure, PipelineConfig, PlanUpdate, PromptScore, RefinementOutcome, Summary,
};
use crate::plan::{InteractionTemplate, Plan, SubtaskStatus};
use crate::prompt::{ModularPrompt, PromptComponentKind};

pub const TRACE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace is empty")]
    Empty,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: sequence number {seq} does not follow {prev}")]
    Sequence { line: usize, seq: u64, prev: u64 },
    #[error("unsupported trace format version {0}")]
    Version(u32),
    #[error("replay diverged: {0}")]
    Replay(String),
    #[error("trace has no terminal run-finished event")]
    Unterminated,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format_version: u32,
    pub tool_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at_ms: Option<u64>,
    pub seed: u64,
    /// Full configuration, including backend descriptors and module toggles.
    pub config: PipelineConfig,
}

impl TraceHeader {
    pub fn new(config: &PipelineConfig) -> Self {
        TraceHeader {
            format_version: TRACE_FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created_at_ms: Some(now_ms()),
            seed: config.seed,
            config: config.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    PlanningFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum EventKind {
    TemplateSelected {
        template: InteractionTemplate,
        source: String,
    },
    PlanCreated {
        plan: Plan,
    },
    PlanOptimized {
        plan: Plan,
    },
    Generation {
        purpose: CallPurpose,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subtask: Option<String>,
        prompt_fingerprint: String,
        temperature: f64,
        outputs: Vec<String>,
    },
    Embedding {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subtask: Option<String>,
        vectors: Vec<EmbeddingVector>,
    },
    PromptBuilt {
        subtask: String,
        prompt: ModularPrompt,
    },
    Score {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subtask: Option<String>,
        prompt_revision: u32,
        prompt_fingerprint: String,
        score: PromptScore,
    },
    Revision {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subtask: Option<String>,
        component: PromptComponentKind,
        prompt: ModularPrompt,
    },
    RefinementFinished {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subtask: Option<String>,
        outcome: RefinementOutcome,
        steps: usize,
        best_revision: u32,
        best_value: f64,
    },
    PromptSelected {
        subtask: String,
        prompt: ModularPrompt,
    },
    Execution {
        subtask: String,
        attempt: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        output: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        failure: Option<ExecutionFailure>,
    },
    Augmentation {
        subtask: String,
        clauses: Vec<String>,
        prompt: ModularPrompt,
    },
    Summary {
        summary: Summary,
    },
    PlanUpdate {
        update: PlanUpdate,
        applied: bool,
        plan: Plan,
    },
    StatusChange {
        subtask: String,
        from: SubtaskStatus,
        to: SubtaskStatus,
    },
    Warning {
        code: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subtask: Option<String>,
        message: String,
    },
    RunFinished {
        status: RunStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        final_output: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        plan: Option<Plan>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts_ms: Option<u64>,
    pub event: EventKind,
}

/// Ordered event sink; assigns sequence numbers under one lock.
#[derive(Debug)]
pub struct TraceSink {
    events: Mutex<Vec<TraceEvent>>,
    timestamps: bool,
}

impl Default for TraceSink {
    fn default() -> Self {
        Self::new()
    }
}

impl TraceSink {
    pub fn new() -> Self {
        TraceSink { events: Mutex::new(Vec::new()), timestamps: true }
    }

    /// A sink that leaves `ts_ms` empty.
    pub fn without_timestamps() -> Self {
        TraceSink { events: Mutex::new(Vec::new()), timestamps: false }
    }

    pub fn record(&self, event: EventKind) -> u64 {
        let mut events = self.events.lock().expect("trace lock");
        let seq = events.last().map(|e| e.seq + 1).unwrap_or(1);
        let ts_ms = self.timestamps.then(now_ms);
        events.push(TraceEvent { seq, ts_ms, event });
        seq
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.events.lock().expect("trace lock").clone()
    }

    pub fn len(&self) -> usize {
        self.events.lock().expect("trace lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_trace(self, header: TraceHeader) -> ExecutionTrace {
        ExecutionTrace { header, events: self.events.into_inner().expect("trace lock") }
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionTrace {
    pub header: TraceHeader,
    pub events: Vec<TraceEvent>,
}

impl ExecutionTrace {
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TraceError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(TraceError::Empty)?;
        let header: TraceHeader =
            serde_json::from_str(first).map_err(|e| TraceError::Parse { line: 1, message: format!("header: {e}") })?;
        if header.format_version != TRACE_FORMAT_VERSION {
            return Err(TraceError::Version(header.format_version));
        }
        let mut events: Vec<TraceEvent> = Vec::new();
        for (i, line) in lines {
            let event: TraceEvent =
                serde_json::from_str(line).map_err(|e| TraceError::Parse { line: i + 1, message: e.to_string() })?;
            if let Some(prev) = events.last() {
                if event.seq <= prev.seq {
                    return Err(TraceError::Sequence { line: i + 1, seq: event.seq, prev: prev.seq });
                }
            }
            events.push(event);
        }
        Ok(ExecutionTrace { header, events })
    }

    pub fn read(path: &std::path::Path) -> Result<Self, TraceError> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<(), TraceError> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    /// The terminal event, if the run finished.
    pub fn finish(&self) -> Option<(RunStatus, Option<&String>, Option<&Plan>)> {
        self.events.iter().rev().find_map(|e| match &e.event {
            EventKind::RunFinished { status, final_output, plan } => {
                Some((*status, final_output.as_ref(), plan.as_ref()))
            }
            _ => None,
        })
    }

    pub fn events_of<'a>(&'a self, pred: impl Fn(&EventKind) -> bool + 'a) -> impl Iterator<Item = &'a EventKind> + 'a {
        self.events.iter().map(|e| &e.event).filter(move |e| pred(e))
    }
}

/// JSON-lines text with wall-clock fields removed and keys sorted.
pub fn canonicalize(jsonl: &str) -> Result<String, TraceError> {
    let mut out = String::new();
    for (i, line) in jsonl.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| TraceError::Parse { line: i + 1, message: e.to_string() })?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove("ts_ms");
            obj.remove("created_at_ms");
        }
        out.push_str(&value.to_string());
        out.push('\n');
    }
    Ok(out)
}

/// Plan and prompt state rebuilt from a trace.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayState {
    pub template: Option<InteractionTemplate>,
    pub plan: Option<Plan>,
    /// Latest prompt per subtask.
    pub prompts: BTreeMap<String, ModularPrompt>,
    /// Prompt that was actually executed, per subtask.
    pub executed_prompts: BTreeMap<String, ModularPrompt>,
    pub summaries: BTreeMap<String, Summary>,
    pub status: Option<RunStatus>,
    pub final_output: Option<String>,
}

/// Folds every state-changing event. Status changes are applied to the
/// replayed plan and cross-checked against each plan snapshot and the final
/// plan recorded by the run.
pub fn replay(trace: &ExecutionTrace) -> Result<ReplayState, TraceError> {
    let mut st = ReplayState::default();
    for e in &trace.events {
        match &e.event {
            EventKind::TemplateSelected { template, .. } => st.template = Some(*template),
            EventKind::PlanCreated { plan } | EventKind::PlanOptimized { plan } => st.plan = Some(plan.clone()),
            EventKind::PromptBuilt { subtask, prompt } => {
                st.prompts.insert(subtask.clone(), prompt.clone());
            }
            EventKind::Revision { subtask: Some(id), prompt, .. } => {
                st.prompts.insert(id.clone(), prompt.clone());
            }
            EventKind::Augmentation { subtask, prompt, .. } => {
                if let Some(prev) = st.prompts.get(subtask) {
                    if prompt.revision() <= prev.revision() {
                        return Err(TraceError::Replay(format!("seq {}: revision did not advance", e.seq)));
                    }
                }
                st.prompts.insert(subtask.clone(), prompt.clone());
            }
            EventKind::PromptSelected { subtask, prompt } => {
                st.prompts.insert(subtask.clone(), prompt.clone());
                st.executed_prompts.insert(subtask.clone(), prompt.clone());
            }
            EventKind::Summary { summary } => {
                st.summaries.insert(summary.source_subtask.clone(), summary.clone());
            }
            EventKind::StatusChange { subtask, from, to } => {
                let plan = st
                    .plan
                    .as_mut()
                    .ok_or_else(|| TraceError::Replay(format!("seq {}: status change before plan", e.seq)))?;
                let sub = plan
                    .get_mut(subtask)
                    .ok_or_else(|| TraceError::Replay(format!("seq {}: unknown subtask {subtask}", e.seq)))?;
                if sub.status != *from {
                    return Err(TraceError::Replay(format!(
                        "seq {}: {subtask} is {} but event says {from}",
                        e.seq, sub.status
                    )));
                }
                sub.transition(*to).map_err(|err| TraceError::Replay(format!("seq {}: {err}", e.seq)))?;
            }
            EventKind::PlanUpdate { plan, .. } => {
                let current = st
                    .plan
                    .as_ref()
                    .ok_or_else(|| TraceError::Replay(format!("seq {}: plan update before plan", e.seq)))?;
                let statuses = |p: &Plan| p.subtasks.iter().map(|s| (s.id.clone(), s.status)).collect::<Vec<_>>();
                let before = statuses(current);
                let after = statuses(plan);
                // Only a strategy shift may move the failed source to reformulated.
                let consistent = before.len() == after.len()
                    && before.iter().zip(&after).all(|(a, b)| {
                        a.0 == b.0
                            && (a.1 == b.1
                                || (a.1 == SubtaskStatus::ExecutedFailed && b.1 == SubtaskStatus::Reformulated))
                    });
                if !consistent {
                    return Err(TraceError::Replay(format!("seq {}: plan snapshot disagrees with statuses", e.seq)));
                }
                st.plan = Some(plan.clone());
            }
            EventKind::RunFinished { status, final_output, plan } => {
                if let (Some(recorded), Some(replayed)) = (plan, st.plan.as_ref()) {
                    if recorded != replayed {
                        return Err(TraceError::Replay("final plan differs from replayed plan".into()));
                    }
                }
                st.status = Some(*status);
                st.final_output = final_output.clone();
            }
            _ => {}
        }
    }
    if st.status.is_none() {
        return Err(TraceError::Unterminated);
    }
    Ok(st)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> TraceHeader {
        TraceHeader::new(&PipelineConfig::new("task"))
    }

    #[test]
    fn sink_assigns_increasing_sequence() {
        let sink = TraceSink::new();
        for i in 0..5 {
            let seq = sink.record(EventKind::Warning { code: "w".into(), subtask: None, message: i.to_string() });
            assert_eq!(seq, i + 1);
        }
        let trace = sink.into_trace(header());
        assert!(trace.events.windows(2).all(|w| w[0].seq < w[1].seq));
    }

    #[test]
    fn jsonl_round_trip_and_canonical_form() {
        let sink = TraceSink::new();
        sink.record(EventKind::Warning { code: "w".into(), subtask: Some("s1".into()), message: "m".into() });
        sink.record(EventKind::RunFinished { status: RunStatus::PlanningFailed, final_output: None, plan: None });
        let trace = sink.into_trace(header());
        let text = trace.to_jsonl();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(ExecutionTrace::from_jsonl(&text).unwrap(), trace);
        let canon = canonicalize(&text).unwrap();
        assert!(!canon.contains("ts_ms") && !canon.contains("created_at_ms"));
    }

    #[test]
    fn rejects_bad_traces() {
        assert!(matches!(ExecutionTrace::from_jsonl(""), Err(TraceError::Empty)));
        assert!(matches!(ExecutionTrace::from_jsonl("{\"nope\":1}"), Err(TraceError::Parse { line: 1, .. })));
        let h = serde_json::to_string(&header()).unwrap();
        let ev = |seq: u64| format!(r#"{{"seq":{seq},"event":{{"type":"warning","code":"c","message":"m"}}}}"#);
        let text = format!("{h}\n{}\n{}\n", ev(2), ev(2));
        assert!(matches!(ExecutionTrace::from_jsonl(&text), Err(TraceError::Sequence { line: 3, .. })));
        let unterminated = ExecutionTrace::from_jsonl(&format!("{h}\n{}\n", ev(1))).unwrap();
        assert!(matches!(replay(&unterminated), Err(TraceError::Unterminated)));
    }
}
