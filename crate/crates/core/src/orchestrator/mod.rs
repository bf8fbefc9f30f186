//! The stability-gated planner/executor control loop.
//!
//! [`Orchestrator`] holds the backends, the configuration and the trace sink;
//! each agent role (planner, subtask optimizer, reviewer, executor,
//! summarizer, plan updater, knowledge generator) is a method on it.
//! [`run_pipeline`] composes them for one task.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Embedder, GenerationRequest, Generator};
use crate::metrics::{MetricError, StabilityScore};
use crate::plan::PlanError;
use crate::prompt::{fingerprint, PromptComponentKind, PromptError, ValidationFailure};
use crate::trace::{EventKind, TraceSink};

pub mod agents;
mod config;
mod execute;
mod pipeline;
mod planning;
mod refine;

pub use agents::ControlPrompts;
pub use config::{
    ConfigError, Module, ModuleToggles, PipelineConfig, ReferenceCheck, ReferenceMatch, RefinementConfig,
    StabilityMetric,
};
pub use pipeline::{run_pipeline, run_pipeline_with, PipelineRun};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("planning failed after {attempts} attempt(s): {reason}")]
    PlanningFailure { attempts: u32, reason: String },
    #[error("reviewer gave no usable revision after {attempts} attempt(s)")]
    ReviewFailure { attempts: u32, prompt: Box<crate::prompt::ModularPrompt>, history: Box<RefinementHistory> },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("subtask {0} is not ready for execution")]
    NotReady(String),
}

/// Why a control call was made; recorded with every generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CallPurpose {
    TemplateSelection,
    Planning,
    SubtaskSplit,
    SubtaskMerge,
    CoverageCheck,
    DomainKnowledge,
    StabilitySampling,
    Review,
    Execution,
    Augmentation,
    Summarization,
    PlanUpdate,
}

impl fmt::Display for CallPurpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        f.write_str(&s)
    }
}

/// Gate signal for one prompt: semantic stability or its KL counterpart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptScore {
    pub metric: StabilityMetric,
    /// Compared against τ. For the KL metric this is exp(−KL).
    pub value: f64,
    pub sample_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability: Option<StabilityScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_divergence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementStep {
    pub revision: u32,
    pub component: PromptComponentKind,
    pub before: PromptScore,
    pub after: PromptScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefinementOutcome {
    Stabilized,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementHistory {
    pub initial: PromptScore,
    pub steps: Vec<RefinementStep>,
    pub outcome: RefinementOutcome,
}

impl RefinementHistory {
    /// Score of the returned (best) prompt.
    pub fn best_value(&self) -> f64 {
        self.steps.iter().map(|s| s.after.value).fold(self.initial.value, f64::max)
    }

    /// Score measured last.
    pub fn last_value(&self) -> f64 {
        self.steps.last().map(|s| s.after.value).unwrap_or(self.initial.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cause", rename_all = "kebab-case")]
pub enum ExecutionFailure {
    Format { failure: ValidationFailure },
    Transport { attempts: u32, message: String },
    Backend { message: String },
}

impl fmt::Display for ExecutionFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecutionFailure::Format { failure } => write!(f, "format: {failure}"),
            ExecutionFailure::Transport { attempts, message } => {
                write!(f, "transport after {attempts} attempt(s): {message}")
            }
            ExecutionFailure::Backend { message } => write!(f, "backend: {message}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub subtask: String,
    pub attempt: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<ExecutionFailure>,
}

impl ExecutionResult {
    pub fn is_ok(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanUpdateKind {
    PropagateSuccess,
    StrategyShift,
}

/// Corrective signal injected into not-yet-executed subtasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanUpdate {
    pub source_subtask: String,
    pub kind: PlanUpdateKind,
    pub targets: BTreeSet<String>,
    pub payload: String,
    /// New description for the failed source subtask (strategy shifts only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reformulation: Option<String>,
}

impl PlanUpdate {
    pub fn noop(source: &str, kind: PlanUpdateKind) -> Self {
        PlanUpdate {
            source_subtask: source.to_string(),
            kind,
            targets: BTreeSet::new(),
            payload: String::new(),
            reformulation: None,
        }
    }

    pub fn is_noop(&self) -> bool {
        self.targets.is_empty() && self.payload.is_empty() && self.reformulation.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub source_subtask: String,
    pub structured_text: String,
    pub preserved_keys: Vec<String>,
}

/// Summaries of executed subtasks, read when building downstream history.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContextStore {
    summaries: BTreeMap<String, Summary>,
}

impl ContextStore {
    pub fn insert(&mut self, summary: Summary) {
        self.summaries.insert(summary.source_subtask.clone(), summary);
    }

    pub fn get(&self, id: &str) -> Option<&Summary> {
        self.summaries.get(id)
    }

    /// History text for a subtask with the given dependencies.
    pub fn history_for<'a, I>(&self, dependencies: I) -> String
    where
        I: IntoIterator<Item = &'a String>,
    {
        dependencies
            .into_iter()
            .filter_map(|d| self.summaries.get(d))
            .map(|s| format!("[{}] {}", s.source_subtask, s.structured_text))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Backends, configuration and trace sink shared by every agent role.
pub struct Orchestrator<'a> {
    pub(crate) cfg: &'a PipelineConfig,
    pub(crate) generator: &'a dyn Generator,
    pub(crate) embedder: &'a dyn Embedder,
    pub(crate) sink: &'a TraceSink,
    pub(crate) prompts: ControlPrompts,
    pub context: ContextStore,
}

impl<'a> Orchestrator<'a> {
    pub fn new(
        cfg: &'a PipelineConfig,
        generator: &'a dyn Generator,
        embedder: &'a dyn Embedder,
        sink: &'a TraceSink,
    ) -> Self {
        Orchestrator { cfg, generator, embedder, sink, prompts: ControlPrompts, context: ContextStore::default() }
    }

    pub fn config(&self) -> &PipelineConfig {
        self.cfg
    }

    pub fn sink(&self) -> &TraceSink {
        self.sink
    }

    /// One generator call with tracing. Failures become warnings and are
    /// returned to the caller.
    pub(crate) fn call(
        &self,
        purpose: CallPurpose,
        subtask: Option<&str>,
        prompt: &str,
        temperature: f64,
        samples: u32,
    ) -> Result<Vec<String>, BackendError> {
        let request = GenerationRequest::new(prompt, temperature, samples);
        match self.generator.generate(&request) {
            Ok(outputs) => {
                self.sink.record(EventKind::Generation {
                    purpose,
                    subtask: subtask.map(str::to_string),
                    prompt_fingerprint: fingerprint(prompt),
                    temperature,
                    outputs: outputs.clone(),
                });
                Ok(outputs)
            }
            Err(e) => {
                self.warn("generation-failed", subtask, format!("{purpose}: {e}"));
                Err(e)
            }
        }
    }

    /// Single control call at the control temperature.
    pub(crate) fn ask(
        &self,
        purpose: CallPurpose,
        subtask: Option<&str>,
        prompt: &str,
    ) -> Result<String, BackendError> {
        let mut out = self.call(purpose, subtask, prompt, crate::backend::CONTROL_TEMPERATURE, 1)?;
        Ok(out.pop().unwrap_or_default())
    }

    pub(crate) fn warn(&self, code: &str, subtask: Option<&str>, message: impl Into<String>) {
        let message = message.into();
        log::warn!("{code}: {message}");
        self.sink.record(EventKind::Warning { code: code.to_string(), subtask: subtask.map(str::to_string), message });
    }
}

/// Pulls the first JSON object out of free-form model output.
pub(crate) fn extract_json<T: serde::de::DeserializeOwned>(text: &str) -> Option<T> {
    let body = crate::prompt::strip_code_fence(text);
    if let Ok(v) = serde_json::from_str(body) {
        return Some(v);
    }
    let start = body.find('{')?;
    let end = body.rfind('}')?;
    if end <= start {
        return None;
    }
    serde_json::from_str(&body[start..=end]).ok()
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_embedded_json() {
        #[derive(Deserialize)]
        struct X {
            a: u32,
        }
        assert_eq!(extract_json::<X>("{\"a\": 1}").unwrap().a, 1);
        assert_eq!(extract_json::<X>("Sure! Here it is: {\"a\": 2} hope that helps").unwrap().a, 2);
        assert_eq!(extract_json::<X>("```json\n{\"a\": 3}\n```").unwrap().a, 3);
        assert!(extract_json::<X>("no json").is_none());
    }

    #[test]
    fn history_lists_dependency_summaries() {
        let mut store = ContextStore::default();
        store.insert(Summary {
            source_subtask: "s1".into(),
            structured_text: "rows=10".into(),
            preserved_keys: vec![],
        });
        let deps: BTreeSet<String> = ["s1".to_string(), "s0".to_string()].into();
        assert_eq!(store.history_for(&deps), "[s1] rows=10");
    }
}
