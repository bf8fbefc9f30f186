use std::collections::BTreeSet;

use super::agents::{parse_augmentation, FailureReply, SuccessReply};
use super::{
    extract_json, CallPurpose, ExecutionFailure, ExecutionResult, Orchestrator, OrchestratorError, PlanUpdate,
    PlanUpdateKind, Summary,
};
use crate::backend::BackendError;
use crate::plan::{Plan, Subtask, SubtaskStatus};
use crate::prompt::{validate_output, ModularPrompt};
use crate::trace::EventKind;

/// Outputs up to this many characters are stored without summarizing.
pub const SUMMARY_PASSTHROUGH_CHARS: usize = 200;

impl Orchestrator<'_> {
    /// Moves a subtask to `to` and records the change.
    pub fn set_status(&self, plan: &mut Plan, id: &str, to: SubtaskStatus) -> Result<(), OrchestratorError> {
        let sub = plan.get_mut(id).ok_or_else(|| crate::plan::PlanError::UnknownSubtask(id.to_string()))?;
        let from = sub.status;
        sub.transition(to)?;
        self.sink.record(EventKind::StatusChange { subtask: id.to_string(), from, to });
        Ok(())
    }

    /// Knowledge text for a subtask; empty when disabled or on failure.
    pub fn generate_domain_knowledge(&self, task: &str, sub: &Subtask) -> String {
        if !self.cfg.toggles.domain_knowledge {
            return String::new();
        }
        match self.ask(CallPurpose::DomainKnowledge, Some(&sub.id), &self.prompts.knowledge(task, sub)) {
            Ok(text) if !text.trim().is_empty() => text.trim().to_string(),
            Ok(_) => {
                self.warn("knowledge-empty", Some(&sub.id), "knowledge generator returned nothing");
                String::new()
            }
            Err(_) => String::new(),
        }
    }

    /// Assembles the modular prompt for a subtask: template role, one
    /// requirement per description clause, generated knowledge plus
    /// injected plan-update notes, and dependency summaries as history.
    pub fn build_prompt(&self, plan: &Plan, id: &str) -> Result<ModularPrompt, OrchestratorError> {
        let index = plan.index_of(id).ok_or_else(|| crate::plan::PlanError::UnknownSubtask(id.to_string()))?;
        let sub = &plan.subtasks[index];
        let role = plan.interaction_template.role_for(index, plan.subtasks.len());
        let requirements = description_clauses(&sub.description);
        let mut knowledge = self.generate_domain_knowledge(&plan.task_description, sub);
        for note in &sub.injected {
            if !knowledge.is_empty() {
                knowledge.push('\n');
            }
            knowledge.push_str(note);
        }
        let history = self.context.history_for(&sub.dependencies);
        let prompt = ModularPrompt::new(role, requirements, knowledge, history, sub.io_spec.clone())?;
        self.sink.record(EventKind::PromptBuilt { subtask: id.to_string(), prompt: prompt.clone() });
        Ok(prompt)
    }

    /// One generation at the execution temperature, validated against the
    /// subtask's I/O spec.
    pub fn execute_subtask(
        &self,
        plan: &mut Plan,
        id: &str,
        prompt: &ModularPrompt,
        attempt: u32,
    ) -> Result<ExecutionResult, OrchestratorError> {
        let sub = plan.get(id).ok_or_else(|| crate::plan::PlanError::UnknownSubtask(id.to_string()))?;
        if sub.status != SubtaskStatus::StablePromptReady {
            return Err(OrchestratorError::NotReady(id.to_string()));
        }
        let text = prompt.render();
        let (output, failure) =
            match self.call(CallPurpose::Execution, Some(id), &text, self.cfg.execution_temperature, 1) {
                Ok(mut out) => {
                    let output = out.pop().unwrap_or_default();
                    let failure = validate_output(&output, prompt.io_spec())
                        .err()
                        .map(|failure| ExecutionFailure::Format { failure });
                    (Some(output), failure)
                }
                Err(BackendError::Transport { attempts, message }) => {
                    (None, Some(ExecutionFailure::Transport { attempts, message }))
                }
                Err(e) => (None, Some(ExecutionFailure::Backend { message: e.to_string() })),
            };
        let result = ExecutionResult { subtask: id.to_string(), attempt, output, failure };
        self.sink.record(EventKind::Execution {
            subtask: id.to_string(),
            attempt,
            output: result.output.clone(),
            failure: result.failure.clone(),
        });
        let to = if result.is_ok() { SubtaskStatus::ExecutedOk } else { SubtaskStatus::ExecutedFailed };
        self.set_status(plan, id, to)?;
        Ok(result)
    }

    /// Appends the reviewer's diagnosis of a failed execution as new
    /// requirement clauses. Any problem leaves the prompt unchanged.
    pub fn augment_requirements(&self, prompt: &ModularPrompt, failed: &ExecutionResult) -> ModularPrompt {
        let id = failed.subtask.as_str();
        let Some(failure) = &failed.failure else {
            self.warn("augmentation-skipped", Some(id), "execution did not fail");
            return prompt.clone();
        };
        let ask = self.prompts.failure_review(id, prompt, failed.output.as_deref(), &failure.to_string());
        let Ok(reply) = self.ask(CallPurpose::Augmentation, Some(id), &ask) else {
            return prompt.clone();
        };
        let clauses = parse_augmentation(&reply);
        if clauses.is_empty() {
            self.warn("augmentation-rejected", Some(id), "reviewer returned no clause");
            return prompt.clone();
        }
        let mut requirements = prompt.requirements().to_vec();
        requirements.extend(clauses.iter().cloned());
        match prompt.replace_requirements(requirements) {
            Ok(next) => {
                self.sink.record(EventKind::Augmentation { subtask: id.to_string(), clauses, prompt: next.clone() });
                next
            }
            Err(e) => {
                self.warn("augmentation-rejected", Some(id), e.to_string());
                prompt.clone()
            }
        }
    }

    /// Condenses a successful output for downstream history and stores it
    /// in the context store.
    pub fn summarize(&mut self, raw_output: &str, plan: &Plan, sub: &Subtask) -> Summary {
        let verbatim = raw_output.to_string();
        let structured_text = if raw_output.chars().count() <= SUMMARY_PASSTHROUGH_CHARS {
            verbatim
        } else {
            match self.ask(CallPurpose::Summarization, Some(&sub.id), &self.prompts.summarizer(plan, sub, raw_output)) {
                Ok(text) => {
                    let text = text.trim().to_string();
                    if text.is_empty() || text.chars().count() >= raw_output.chars().count() {
                        self.warn("summary-rejected", Some(&sub.id), "summary is not shorter than the output");
                        verbatim
                    } else {
                        text
                    }
                }
                Err(_) => verbatim,
            }
        };
        let preserved_keys = extract_json::<serde_json::Map<String, serde_json::Value>>(&structured_text)
            .map(|m| m.keys().cloned().collect())
            .unwrap_or_default();
        let summary = Summary { source_subtask: sub.id.clone(), structured_text, preserved_keys };
        self.sink.record(EventKind::Summary { summary: summary.clone() });
        self.context.insert(summary.clone());
        summary
    }

    /// Plan Updater. On success the payload is injected into the pending
    /// dependents; on failure the source subtask is reformulated. Updates
    /// that would touch executed subtasks are rejected. Every outcome is
    /// recorded, including no-ops.
    pub fn update_plan(&self, plan: &mut Plan, result: &ExecutionResult) -> Result<PlanUpdate, OrchestratorError> {
        let id = result.subtask.as_str();
        let sub = plan.get(id).ok_or_else(|| crate::plan::PlanError::UnknownSubtask(id.to_string()))?.clone();
        let update = if result.is_ok() {
            if sub.status != SubtaskStatus::ExecutedOk {
                return Err(OrchestratorError::NotReady(id.to_string()));
            }
            let output = result.output.as_deref().unwrap_or_default();
            self.ask(CallPurpose::PlanUpdate, Some(id), &self.prompts.update_success(plan, &sub, output))
                .ok()
                .and_then(|reply| extract_json::<SuccessReply>(&reply))
                .map(|r| PlanUpdate {
                    source_subtask: id.to_string(),
                    kind: PlanUpdateKind::PropagateSuccess,
                    targets: r.targets.map(|t| t.into_iter().collect()).unwrap_or_else(|| pending_dependents(plan, id)),
                    payload: r.payload.trim().to_string(),
                    reformulation: None,
                })
                .filter(|u| !u.payload.is_empty())
                .unwrap_or_else(|| PlanUpdate::noop(id, PlanUpdateKind::PropagateSuccess))
        } else {
            if sub.status != SubtaskStatus::ExecutedFailed {
                return Err(OrchestratorError::NotReady(id.to_string()));
            }
            let reason = result.failure.as_ref().map(|f| f.to_string()).unwrap_or_default();
            self.ask(CallPurpose::PlanUpdate, Some(id), &self.prompts.update_failure(plan, &sub, &reason))
                .ok()
                .and_then(|reply| extract_json::<FailureReply>(&reply))
                .filter(|r| !r.description.trim().is_empty())
                .map(|r| PlanUpdate {
                    source_subtask: id.to_string(),
                    kind: PlanUpdateKind::StrategyShift,
                    targets: match (r.targets, r.payload.trim().is_empty()) {
                        (Some(t), _) => t.into_iter().collect(),
                        (None, true) => BTreeSet::new(),
                        (None, false) => pending_dependents(plan, id),
                    },
                    payload: r.payload.trim().to_string(),
                    reformulation: Some(r.description.trim().to_string()),
                })
                .unwrap_or_else(|| PlanUpdate::noop(id, PlanUpdateKind::StrategyShift))
        };

        if update.is_noop() {
            self.sink.record(EventKind::PlanUpdate { update: update.clone(), applied: false, plan: plan.clone() });
            return Ok(update);
        }
        if let Some(bad) =
            update.targets.iter().find(|t| plan.get(t).is_none_or(|s| s.status != SubtaskStatus::Pending))
        {
            self.warn("invariant-violation", Some(id), format!("update targets {bad}, which is not pending"));
            self.sink.record(EventKind::PlanUpdate { update: update.clone(), applied: false, plan: plan.clone() });
            return Ok(update);
        }

        let mut next = plan.clone();
        for t in &update.targets {
            next.get_mut(t).expect("checked above").injected.push(update.payload.clone());
        }
        if let Some(description) = &update.reformulation {
            if *description == sub.description {
                self.warn("reformulation-unchanged", Some(id), "strategy shift kept the description");
            }
            next.get_mut(id).expect("source exists").set_description(description.clone());
        }
        if let Err(e) = next.validate() {
            self.warn("invariant-violation", Some(id), e.to_string());
            self.sink.record(EventKind::PlanUpdate { update: update.clone(), applied: false, plan: plan.clone() });
            return Ok(update);
        }
        *plan = next;
        if update.reformulation.is_some() {
            self.set_status(plan, id, SubtaskStatus::Reformulated)?;
        }
        self.sink.record(EventKind::PlanUpdate { update: update.clone(), applied: true, plan: plan.clone() });
        Ok(update)
    }
}

fn pending_dependents(plan: &Plan, id: &str) -> BTreeSet<String> {
    plan.dependents(id).into_iter().filter(|s| s.status == SubtaskStatus::Pending).map(|s| s.id.clone()).collect()
}

/// One requirement per sentence-like clause of a description.
pub(crate) fn description_clauses(description: &str) -> Vec<String> {
    let mut clauses = Vec::new();
    let mut current = String::new();
    for ch in description.chars() {
        current.push(ch);
        if matches!(ch, '.' | ';' | '!' | '?' | '\n') {
            let c = current.trim().trim_end_matches(';').trim();
            if !c.is_empty() {
                clauses.push(c.to_string());
            }
            current.clear();
        }
    }
    let c = current.trim();
    if !c.is_empty() {
        clauses.push(c.to_string());
    }
    clauses
}
