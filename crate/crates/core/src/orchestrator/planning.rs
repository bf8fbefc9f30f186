use std::collections::BTreeSet;

use super::agents::{parse_description, parse_io_spec, parse_pieces, parse_plan, parse_yes};
use super::{CallPurpose, Orchestrator, OrchestratorError};
use crate::plan::{granularity, topological_order, InteractionTemplate, Plan, Subtask, SubtaskStatus};
use crate::prompt::{fingerprint, IoSpec};
use crate::trace::EventKind;

impl Orchestrator<'_> {
    /// Uses the configured template, else asks the classifier; falls back to
    /// linear-chain when the answer is unusable.
    pub fn select_interaction_template(&self, task: &str) -> InteractionTemplate {
        if let Some(t) = self.cfg.template {
            self.sink.record(EventKind::TemplateSelected { template: t, source: "config".into() });
            return t;
        }
        let prompt = self.prompts.template_selection(task);
        let chosen = self
            .ask(CallPurpose::TemplateSelection, None, &prompt)
            .ok()
            .and_then(|answer| InteractionTemplate::parse(&answer));
        let (template, source) = match chosen {
            Some(t) => (t, "classifier"),
            None => {
                self.warn("template-fallback", None, "classifier answer unusable; using linear-chain");
                (InteractionTemplate::LinearChain, "fallback")
            }
        };
        self.sink.record(EventKind::TemplateSelected { template, source: source.into() });
        template
    }

    /// Planner call: task → subtask DAG. Re-asks up to `planner_reasks`
    /// times on unparseable or cyclic output.
    pub fn decompose_task(&self, task: &str, template: InteractionTemplate) -> Result<Plan, OrchestratorError> {
        if task.trim().is_empty() {
            return Err(OrchestratorError::PlanningFailure { attempts: 0, reason: "empty task".into() });
        }
        let attempts = self.cfg.planner_reasks + 1;
        let mut last_error: Option<String> = None;
        for _ in 0..attempts {
            let prompt = self.prompts.planner(task, template, last_error.as_deref());
            let answer = match self.ask(CallPurpose::Planning, None, &prompt) {
                Ok(a) => a,
                Err(e) => {
                    last_error = Some(e.to_string());
                    continue;
                }
            };
            match self.build_plan(task, template, &answer, &fingerprint(&prompt)) {
                Ok((plan, defaulted)) => {
                    for id in defaulted {
                        self.warn("io-spec-defaulted", Some(&id), "missing or invalid io_spec; using free-text");
                    }
                    self.sink.record(EventKind::PlanCreated { plan: plan.clone() });
                    return Ok(plan);
                }
                Err(reason) => {
                    self.warn("plan-rejected", None, reason.clone());
                    last_error = Some(reason);
                }
            }
        }
        Err(OrchestratorError::PlanningFailure { attempts, reason: last_error.unwrap_or_else(|| "no answer".into()) })
    }

    fn build_plan(
        &self,
        task: &str,
        template: InteractionTemplate,
        answer: &str,
        planner_fp: &str,
    ) -> Result<(Plan, Vec<String>), String> {
        let reply = parse_plan(answer).ok_or_else(|| "reply is not a plan".to_string())?;
        let ids: Vec<String> = reply
            .subtasks
            .iter()
            .enumerate()
            .map(|(i, s)| s.id.clone().filter(|id| !id.trim().is_empty()).unwrap_or_else(|| format!("s{}", i + 1)))
            .collect();
        let defaults = template.default_dependencies(&ids);
        let mut defaulted = Vec::new();
        let mut subtasks = Vec::with_capacity(ids.len());
        for ((planned, id), default_deps) in reply.subtasks.into_iter().zip(&ids).zip(defaults) {
            if planned.description.trim().is_empty() {
                return Err(format!("subtask {id} has an empty description"));
            }
            let io_spec = match parse_io_spec(planned.io_spec.as_ref()) {
                Some(spec) => spec,
                None => {
                    defaulted.push(id.clone());
                    IoSpec::free_text()
                }
            };
            let dependencies: BTreeSet<String> = match planned.dependencies {
                Some(deps) => deps.into_iter().collect(),
                None => default_deps,
            };
            subtasks.push(Subtask { dependencies, io_spec, ..Subtask::new(id.clone(), planned.description.trim()) });
        }
        let plan = Plan::new(task, subtasks, template, planner_fp).map_err(|e| e.to_string())?;
        Ok((plan, defaulted))
    }

    /// Splits subtasks coarser than 2·target and merges adjacent pairs finer
    /// than target/2. Subtasks that cannot be brought into the band are left
    /// as they are and flagged with an `unoptimizable` warning.
    pub fn optimize_subtasks(&self, plan: &Plan, target: f64) -> Plan {
        let (lo, hi) = (target / 2.0, 2.0 * target);
        let mut current = plan.clone();

        let mut i = 0;
        while i < current.subtasks.len() {
            let sub = current.subtasks[i].clone();
            if sub.status != SubtaskStatus::Pending || sub.granularity <= hi {
                i += 1;
                continue;
            }
            match self.try_split(&current, &sub, target, hi) {
                Some(next) => {
                    let added = next.subtasks.len() - current.subtasks.len();
                    current = next;
                    i += added + 1;
                }
                None => {
                    self.warn("unoptimizable", Some(&sub.id), format!("granularity {} above {hi}", sub.granularity));
                    i += 1;
                }
            }
        }

        let mut i = 0;
        while i + 1 < current.subtasks.len() {
            let (a, b) = (current.subtasks[i].clone(), current.subtasks[i + 1].clone());
            let mergeable = a.status == SubtaskStatus::Pending
                && b.status == SubtaskStatus::Pending
                && a.granularity < lo
                && b.granularity < lo;
            if mergeable {
                if let Some(next) = self.try_merge(&current, &a, &b, lo, hi) {
                    current = next;
                    continue;
                }
            }
            i += 1;
        }
        for s in &current.subtasks {
            if s.granularity < lo && s.status == SubtaskStatus::Pending {
                self.warn("unoptimizable", Some(&s.id), format!("granularity {} below {lo}", s.granularity));
            }
        }

        if current != *plan {
            self.sink.record(EventKind::PlanOptimized { plan: current.clone() });
        }
        current
    }

    fn try_split(&self, plan: &Plan, sub: &Subtask, target: f64, hi: f64) -> Option<Plan> {
        let answer = self
            .ask(CallPurpose::SubtaskSplit, Some(&sub.id), &self.prompts.splitter(&plan.task_description, sub, target))
            .ok()?;
        let Some(pieces) = parse_pieces(&answer) else {
            self.warn("split-rejected", Some(&sub.id), "splitter reply unusable");
            return None;
        };
        if pieces.iter().any(|p| granularity(p) > hi) {
            self.warn("split-rejected", Some(&sub.id), "a piece is still too coarse");
            return None;
        }
        let covered = self
            .ask(CallPurpose::CoverageCheck, Some(&sub.id), &self.prompts.coverage(&sub.description, &pieces))
            .map(|a| parse_yes(&a))
            .unwrap_or(false);
        if !covered {
            self.warn("split-rejected", Some(&sub.id), "pieces do not cover the original");
            return None;
        }

        let ids: Vec<String> = (1..=pieces.len()).map(|k| format!("{}.{k}", sub.id)).collect();
        let last = ids.last().expect("at least two pieces").clone();
        let mut replacement = Vec::with_capacity(pieces.len());
        for (k, (id, text)) in ids.iter().zip(&pieces).enumerate() {
            let mut piece = Subtask::new(id.clone(), text.clone());
            piece.dependencies = if k == 0 { sub.dependencies.clone() } else { [ids[k - 1].clone()].into() };
            piece.io_spec = if k + 1 == pieces.len() { sub.io_spec.clone() } else { IoSpec::free_text() };
            replacement.push(piece);
        }
        let mut subtasks = Vec::with_capacity(plan.subtasks.len() + pieces.len() - 1);
        for s in &plan.subtasks {
            if s.id == sub.id {
                subtasks.extend(replacement.iter().cloned());
            } else {
                let mut s = s.clone();
                if s.dependencies.remove(&sub.id) {
                    s.dependencies.insert(last.clone());
                }
                subtasks.push(s);
            }
        }
        self.reassemble(plan, subtasks, &sub.id)
    }

    fn try_merge(&self, plan: &Plan, a: &Subtask, b: &Subtask, lo: f64, hi: f64) -> Option<Plan> {
        let answer = self
            .ask(CallPurpose::SubtaskMerge, Some(&a.id), &self.prompts.merger(&plan.task_description, a, b))
            .ok()?;
        let description = parse_description(&answer)?;
        let g = granularity(&description);
        if g > hi || g < lo {
            self.warn("merge-rejected", Some(&a.id), format!("merged granularity {g} outside [{lo}, {hi}]"));
            return None;
        }
        let merged_id = format!("{}+{}", a.id, b.id);
        let mut merged = Subtask::new(merged_id.clone(), description);
        merged.dependencies =
            a.dependencies.union(&b.dependencies).filter(|d| **d != a.id && **d != b.id).cloned().collect();
        merged.io_spec = b.io_spec.clone();
        let mut subtasks = Vec::with_capacity(plan.subtasks.len() - 1);
        for s in &plan.subtasks {
            if s.id == a.id {
                subtasks.push(merged.clone());
            } else if s.id != b.id {
                let mut s = s.clone();
                let touched = s.dependencies.remove(&a.id) | s.dependencies.remove(&b.id);
                if touched {
                    s.dependencies.insert(merged_id.clone());
                }
                subtasks.push(s);
            }
        }
        self.reassemble(plan, subtasks, &a.id)
    }

    fn reassemble(&self, plan: &Plan, subtasks: Vec<Subtask>, around: &str) -> Option<Plan> {
        match topological_order(subtasks) {
            Ok(subtasks) => Some(Plan { subtasks, ..plan.clone() }),
            Err(e) => {
                self.warn("restructure-rejected", Some(around), e.to_string());
                None
            }
        }
    }
}
