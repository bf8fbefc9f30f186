//! Plans and subtasks produced by the planner.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::IoSpec;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("duplicate subtask id {0}")]
    DuplicateId(String),
    #[error("subtask {from} depends on unknown subtask {to}")]
    UnknownDependency { from: String, to: String },
    #[error("dependency cycle through {0}")]
    Cycle(String),
    #[error("subtask order is not topological at {0}")]
    NotTopological(String),
    #[error("plan has no subtasks")]
    Empty,
    #[error("subtask {id}: illegal status transition {from} -> {to}")]
    IllegalTransition { id: String, from: SubtaskStatus, to: SubtaskStatus },
    #[error("unknown subtask {0}")]
    UnknownSubtask(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SubtaskStatus {
    #[default]
    Pending,
    StablePromptReady,
    ExecutedOk,
    ExecutedFailed,
    Reformulated,
}

impl SubtaskStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SubtaskStatus::Pending => "pending",
            SubtaskStatus::StablePromptReady => "stable-prompt-ready",
            SubtaskStatus::ExecutedOk => "executed-ok",
            SubtaskStatus::ExecutedFailed => "executed-failed",
            SubtaskStatus::Reformulated => "reformulated",
        }
    }

    pub fn is_executed(self) -> bool {
        matches!(self, SubtaskStatus::ExecutedOk | SubtaskStatus::ExecutedFailed)
    }

    /// Allowed moves. A failed subtask re-enters the gate after requirement
    /// augmentation, a reformulated one after a strategy shift.
    pub fn can_transition_to(self, next: SubtaskStatus) -> bool {
        use SubtaskStatus::*;
        matches!(
            (self, next),
            (Pending, StablePromptReady)
                | (StablePromptReady, ExecutedOk)
                | (StablePromptReady, ExecutedFailed)
                | (ExecutedFailed, Reformulated)
                | (ExecutedFailed, StablePromptReady)
                | (Reformulated, StablePromptReady)
        )
    }
}

impl fmt::Display for SubtaskStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Interaction structure used to wire subtasks when the planner leaves
/// dependencies implicit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InteractionTemplate {
    #[default]
    LinearChain,
    FanOutFanIn,
    ReviewLoop,
}

impl InteractionTemplate {
    pub const ALL: [InteractionTemplate; 3] =
        [InteractionTemplate::LinearChain, InteractionTemplate::FanOutFanIn, InteractionTemplate::ReviewLoop];

    pub fn as_str(self) -> &'static str {
        match self {
            InteractionTemplate::LinearChain => "linear-chain",
            InteractionTemplate::FanOutFanIn => "fan-out-fan-in",
            InteractionTemplate::ReviewLoop => "review-loop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim().trim_matches(|c: char| c == '"' || c == '.').to_ascii_lowercase();
        Self::ALL.into_iter().find(|t| t.as_str() == s || t.as_str().replace('-', " ") == s)
    }

    /// Role line given to the executor of the subtask at `index` of `count`.
    pub fn role_for(self, index: usize, count: usize) -> &'static str {
        match self {
            InteractionTemplate::LinearChain => "executor agent in a sequential chain",
            InteractionTemplate::FanOutFanIn => {
                if index == 0 {
                    "coordinator agent that prepares shared inputs"
                } else if index + 1 == count && count > 2 {
                    "aggregator agent that merges parallel results"
                } else {
                    "worker agent in a parallel branch"
                }
            }
            InteractionTemplate::ReviewLoop => {
                if index + 1 == count && count > 1 {
                    "reviewer agent that checks the preceding work"
                } else {
                    "author agent whose work will be reviewed"
                }
            }
        }
    }

    /// Default dependencies for `ids` (in plan order) under this template.
    pub fn default_dependencies(self, ids: &[String]) -> Vec<BTreeSet<String>> {
        let n = ids.len();
        (0..n)
            .map(|i| match self {
                InteractionTemplate::LinearChain => {
                    if i == 0 {
                        BTreeSet::new()
                    } else {
                        [ids[i - 1].clone()].into()
                    }
                }
                InteractionTemplate::FanOutFanIn => {
                    if i == 0 {
                        BTreeSet::new()
                    } else if i + 1 == n && n > 2 {
                        ids[1..n - 1].iter().cloned().collect()
                    } else {
                        [ids[0].clone()].into()
                    }
                }
                InteractionTemplate::ReviewLoop => {
                    if i == 0 {
                        BTreeSet::new()
                    } else if i + 1 == n {
                        ids[..i].iter().cloned().collect()
                    } else {
                        [ids[i - 1].clone()].into()
                    }
                }
            })
            .collect()
    }
}

impl fmt::Display for InteractionTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Scope of a subtask description, in atomic actions.
///
/// Counts clauses separated by `.`, `;`, `!`, `?`, newlines or the word
/// "then". Never less than 1.
pub fn granularity(description: &str) -> f64 {
    let count = description
        .split(['.', ';', '!', '?', '\n'])
        .flat_map(|s| split_on_then(s))
        .filter(|c| c.chars().any(char::is_alphanumeric))
        .count();
    count.max(1) as f64
}

fn split_on_then(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut rest = s;
    loop {
        let lower = rest.to_ascii_lowercase();
        match find_word(&lower, "then") {
            Some(i) => {
                parts.push(&rest[..i]);
                rest = &rest[i + 4..];
            }
            None => {
                parts.push(rest);
                return parts;
            }
        }
    }
}

fn find_word(haystack: &str, word: &str) -> Option<usize> {
    let bytes = haystack.as_bytes();
    let mut from = 0;
    while let Some(off) = haystack[from..].find(word) {
        let i = from + off;
        let before = i == 0 || !bytes[i - 1].is_ascii_alphanumeric();
        let j = i + word.len();
        let after = j >= bytes.len() || !bytes[j].is_ascii_alphanumeric();
        if before && after {
            return Some(i);
        }
        from = i + 1;
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subtask {
    pub id: String,
    pub description: String,
    pub granularity: f64,
    #[serde(default)]
    pub dependencies: BTreeSet<String>,
    #[serde(default)]
    pub io_spec: IoSpec,
    #[serde(default)]
    pub status: SubtaskStatus,
    /// Constraints and details injected by the plan updater; rendered into
    /// the Knowledge component.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub injected: Vec<String>,
}

impl Subtask {
    pub fn new(id: impl Into<String>, description: impl Into<String>) -> Self {
        let description = description.into();
        Subtask {
            id: id.into(),
            granularity: granularity(&description),
            description,
            dependencies: BTreeSet::new(),
            io_spec: IoSpec::free_text(),
            status: SubtaskStatus::Pending,
            injected: Vec::new(),
        }
    }

    pub fn with_dependencies<I, S>(mut self, deps: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.dependencies = deps.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_io_spec(mut self, spec: IoSpec) -> Self {
        self.io_spec = spec;
        self
    }

    pub fn set_description(&mut self, description: impl Into<String>) {
        self.description = description.into();
        self.granularity = granularity(&self.description);
    }

    pub fn transition(&mut self, next: SubtaskStatus) -> Result<(), PlanError> {
        if !self.status.can_transition_to(next) {
            return Err(PlanError::IllegalTransition { id: self.id.clone(), from: self.status, to: next });
        }
        self.status = next;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub task_description: String,
    pub subtasks: Vec<Subtask>,
    pub interaction_template: InteractionTemplate,
    /// Fingerprint of the planner prompt that produced this plan.
    pub created_from: String,
}

impl Plan {
    /// Builds a plan, reordering subtasks into a stable topological order.
    pub fn new(
        task_description: impl Into<String>,
        subtasks: Vec<Subtask>,
        interaction_template: InteractionTemplate,
        created_from: impl Into<String>,
    ) -> Result<Self, PlanError> {
        let subtasks = topological_order(subtasks)?;
        Ok(Plan {
            task_description: task_description.into(),
            subtasks,
            interaction_template,
            created_from: created_from.into(),
        })
    }

    pub fn get(&self, id: &str) -> Option<&Subtask> {
        self.subtasks.iter().find(|s| s.id == id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Subtask> {
        self.subtasks.iter_mut().find(|s| s.id == id)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.subtasks.iter().position(|s| s.id == id)
    }

    /// Subtasks that list `id` as a direct dependency.
    pub fn dependents(&self, id: &str) -> Vec<&Subtask> {
        self.subtasks.iter().filter(|s| s.dependencies.contains(id)).collect()
    }

    /// Checks ids, dependency references, acyclicity and that the stored
    /// order is topological.
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.subtasks.is_empty() {
            return Err(PlanError::Empty);
        }
        check_graph(&self.subtasks)?;
        let mut seen = BTreeSet::new();
        for s in &self.subtasks {
            if s.dependencies.iter().any(|d| !seen.contains(d)) {
                return Err(PlanError::NotTopological(s.id.clone()));
            }
            seen.insert(s.id.clone());
        }
        Ok(())
    }
}

fn check_graph(subtasks: &[Subtask]) -> Result<(), PlanError> {
    let mut ids = BTreeSet::new();
    for s in subtasks {
        if !ids.insert(s.id.as_str()) {
            return Err(PlanError::DuplicateId(s.id.clone()));
        }
    }
    for s in subtasks {
        for d in &s.dependencies {
            if !ids.contains(d.as_str()) {
                return Err(PlanError::UnknownDependency { from: s.id.clone(), to: d.clone() });
            }
        }
    }
    Ok(())
}

/// Kahn's algorithm, breaking ties by original position.
pub fn topological_order(subtasks: Vec<Subtask>) -> Result<Vec<Subtask>, PlanError> {
    if subtasks.is_empty() {
        return Err(PlanError::Empty);
    }
    check_graph(&subtasks)?;
    let position: HashMap<&str, usize> = subtasks.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut indegree: Vec<usize> = subtasks.iter().map(|s| s.dependencies.len()).collect();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); subtasks.len()];
    for (i, s) in subtasks.iter().enumerate() {
        for d in &s.dependencies {
            children[position[d.as_str()]].push(i);
        }
    }
    let mut ready: BTreeMap<usize, ()> =
        indegree.iter().enumerate().filter(|(_, d)| **d == 0).map(|(i, _)| (i, ())).collect();
    let mut order = Vec::with_capacity(subtasks.len());
    while let Some((&i, _)) = ready.iter().next() {
        ready.remove(&i);
        order.push(i);
        for &c in &children[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c, ());
            }
        }
    }
    if order.len() != subtasks.len() {
        let stuck = (0..subtasks.len()).find(|i| !order.contains(i)).unwrap_or(0);
        return Err(PlanError::Cycle(subtasks[stuck].id.clone()));
    }
    let mut slots: Vec<Option<Subtask>> = subtasks.into_iter().map(Some).collect();
    Ok(order.into_iter().map(|i| slots[i].take().expect("each index once")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn granularity_counts_clauses() {
        assert_eq!(granularity("Load the file."), 1.0);
        assert_eq!(granularity("Load the file. Clean it; then plot it."), 3.0);
        assert_eq!(granularity("Authenticate then fetch rows\nthen write a report"), 3.0);
        assert_eq!(granularity("Strengthen the thenar muscles."), 1.0);
        assert_eq!(granularity(""), 1.0);
    }

    #[test]
    fn reorders_topologically() {
        let subs = vec![
            Subtask::new("c", "c").with_dependencies(["b"]),
            Subtask::new("a", "a"),
            Subtask::new("b", "b").with_dependencies(["a"]),
        ];
        let plan = Plan::new("t", subs, InteractionTemplate::LinearChain, "fp").unwrap();
        let ids: Vec<&str> = plan.subtasks.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        plan.validate().unwrap();
    }

    #[test]
    fn rejects_cycles_and_unknown_deps() {
        let cyc =
            vec![Subtask::new("a", "a").with_dependencies(["b"]), Subtask::new("b", "b").with_dependencies(["a"])];
        assert!(matches!(topological_order(cyc), Err(PlanError::Cycle(_))));
        let unknown = vec![Subtask::new("a", "a").with_dependencies(["zz"])];
        assert!(matches!(topological_order(unknown), Err(PlanError::UnknownDependency { .. })));
        let dup = vec![Subtask::new("a", "a"), Subtask::new("a", "b")];
        assert!(matches!(topological_order(dup), Err(PlanError::DuplicateId(_))));
    }

    #[test]
    fn status_transitions() {
        let mut s = Subtask::new("a", "do it");
        assert!(s.transition(SubtaskStatus::ExecutedOk).is_err());
        s.transition(SubtaskStatus::StablePromptReady).unwrap();
        s.transition(SubtaskStatus::ExecutedFailed).unwrap();
        s.transition(SubtaskStatus::Reformulated).unwrap();
        s.transition(SubtaskStatus::StablePromptReady).unwrap();
        s.transition(SubtaskStatus::ExecutedOk).unwrap();
        assert!(s.transition(SubtaskStatus::Reformulated).is_err());
    }

    #[test]
    fn template_defaults_are_acyclic() {
        let ids: Vec<String> = (1..=5).map(|i| format!("s{i}")).collect();
        for t in InteractionTemplate::ALL {
            let deps = t.default_dependencies(&ids);
            let subs: Vec<Subtask> = ids
                .iter()
                .zip(deps)
                .map(|(id, d)| Subtask { dependencies: d, ..Subtask::new(id.clone(), "x") })
                .collect();
            let plan = Plan::new("t", subs, t, "fp").unwrap();
            plan.validate().unwrap();
        }
        let fan = InteractionTemplate::FanOutFanIn.default_dependencies(&ids);
        assert_eq!(fan[4].len(), 3);
        assert_eq!(InteractionTemplate::parse("Fan out fan in"), Some(InteractionTemplate::FanOutFanIn));
    }
}
