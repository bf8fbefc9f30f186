//! Prompt texts for the control agents and parsers for their replies.
//!
//! Each control prompt opens with a fixed `# <Agent>` header line so that
//! backends (and scripted fixtures) can tell the roles apart.

use serde::Deserialize;

use super::extract_json;
use crate::metrics::StabilityScore;
use crate::plan::{InteractionTemplate, Plan, Subtask};
use crate::prompt::{IoSpec, ModularPrompt, PromptComponentKind};

pub const TEMPLATE_HEADER: &str = "# Template selection";
pub const PLANNER_HEADER: &str = "# Planner";
pub const SPLITTER_HEADER: &str = "# Subtask splitter";
pub const MERGER_HEADER: &str = "# Subtask merger";
pub const COVERAGE_HEADER: &str = "# Coverage check";
pub const KNOWLEDGE_HEADER: &str = "# Domain knowledge";
pub const REVIEW_HEADER: &str = "# Stability review";
pub const FAILURE_REVIEW_HEADER: &str = "# Failure review";
pub const SUMMARIZER_HEADER: &str = "# Summarizer";
pub const UPDATE_SUCCESS_HEADER: &str = "# Plan update: success";
pub const UPDATE_FAILURE_HEADER: &str = "# Plan update: failure";

/// Builders for every control-agent prompt.
#[derive(Debug, Clone, Copy, Default)]
pub struct ControlPrompts;

fn plan_listing(plan: &Plan) -> String {
    plan.subtasks
        .iter()
        .map(|s| {
            let deps: Vec<&str> = s.dependencies.iter().map(String::as_str).collect();
            format!(
                "- {} [{}] (after: {}): {}",
                s.id,
                s.status,
                if deps.is_empty() { "-".into() } else { deps.join(", ") },
                s.description
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

impl ControlPrompts {
    pub fn template_selection(&self, task: &str) -> String {
        let names: Vec<&str> = InteractionTemplate::ALL.iter().map(|t| t.as_str()).collect();
        format!(
            "{TEMPLATE_HEADER}\nClassify the task into one interaction template: {}.\nAnswer with the template name only.\n\nTask: {task}\n",
            names.join(", ")
        )
    }

    pub fn planner(&self, task: &str, template: InteractionTemplate, previous_error: Option<&str>) -> String {
        let mut p = format!(
            "{PLANNER_HEADER}\nDecompose the task into subtasks for a {template} workflow.\n\
             Reply with JSON: {{\"subtasks\": [{{\"id\": \"s1\", \"description\": \"...\", \
             \"dependencies\": [], \"io_spec\": {{\"output_format\": \"free-text|json-object|code-block|numeric\", \
             \"required_keys\": [], \"output_constraint\": \"...\"}}}}]}}\n\nTask: {task}\n"
        );
        if let Some(err) = previous_error {
            p.push_str(&format!("\nYour previous plan was rejected: {err}. Reply with a corrected plan.\n"));
        }
        p
    }

    pub fn splitter(&self, task: &str, sub: &Subtask, target: f64) -> String {
        format!(
            "{SPLITTER_HEADER}\nThe subtask below is too coarse (about {} actions; target {target}).\n\
             Split it into smaller sequential subtasks.\nReply with JSON: {{\"subtasks\": [{{\"description\": \"...\"}}]}}\n\n\
             Task: {task}\nSubtask {}: {}\n",
            sub.granularity, sub.id, sub.description
        )
    }

    pub fn merger(&self, task: &str, a: &Subtask, b: &Subtask) -> String {
        format!(
            "{MERGER_HEADER}\nThe two subtasks below are too fine-grained. Merge them into one.\n\
             Reply with JSON: {{\"description\": \"...\"}}\n\nTask: {task}\nSubtask {}: {}\nSubtask {}: {}\n",
            a.id, a.description, b.id, b.description
        )
    }

    pub fn coverage(&self, original: &str, pieces: &[String]) -> String {
        let listing: Vec<String> = pieces.iter().enumerate().map(|(i, p)| format!("{}. {p}", i + 1)).collect();
        format!(
            "{COVERAGE_HEADER}\nDo the pieces together cover exactly the original subtask? Answer yes or no.\n\n\
             Original: {original}\nPieces:\n{}\n",
            listing.join("\n")
        )
    }

    pub fn knowledge(&self, task: &str, sub: &Subtask) -> String {
        format!(
            "{KNOWLEDGE_HEADER}\nRecall domain facts, conventions and pitfalls relevant to the subtask. \
             Use only what you already know.\n\nTask: {task}\nSubtask {}: {}\n",
            sub.id, sub.description
        )
    }

    pub fn stability_review(
        &self,
        prompt: &ModularPrompt,
        samples: &[String],
        score_value: f64,
        tau: f64,
        stability: Option<&StabilityScore>,
    ) -> String {
        let mut p = format!(
            "{REVIEW_HEADER}\nRepeated runs of the prompt below disagree (stability {score_value:.4} < {tau}).\n\
             Name the one component responsible (role, requirements, knowledge or history) and rewrite it.\n\
             Reply with JSON: {{\"component\": \"requirements\", \"replacement\": \"...\"}}\n\
             For requirements, give one clause per line or a JSON list.\n\n--- prompt ---\n{}\n--- samples ---\n",
            prompt.render()
        );
        for (i, s) in samples.iter().enumerate() {
            p.push_str(&format!("[{}] {}\n", i + 1, s));
        }
        if let Some(st) = stability {
            p.push_str("--- pairwise cosine distances ---\n");
            for d in &st.pair_distances {
                p.push_str(&format!("({}, {}) {:.4}\n", d.i + 1, d.j + 1, d.distance));
            }
        }
        p
    }

    pub fn failure_review(&self, sub_id: &str, prompt: &ModularPrompt, output: Option<&str>, reason: &str) -> String {
        format!(
            "{FAILURE_REVIEW_HEADER}\nSubtask {sub_id} failed: {reason}.\n\
             If a missing constraint caused the failure, state the requirement to add.\n\
             Reply with JSON: {{\"requirement\": \"...\"}}\n\n--- prompt ---\n{}\n--- output ---\n{}\n",
            prompt.render(),
            output.unwrap_or("(none)")
        )
    }

    pub fn summarizer(&self, plan: &Plan, sub: &Subtask, raw_output: &str) -> String {
        format!(
            "{SUMMARIZER_HEADER}\nDistill the output of subtask {} into a short structured summary that keeps \
             only what later subtasks need.\n\nGlobal task: {}\nPlan:\n{}\n\nSubtask {}: {}\n--- output ---\n{raw_output}\n",
            sub.id,
            plan.task_description,
            plan_listing(plan),
            sub.id,
            sub.description
        )
    }

    pub fn update_success(&self, plan: &Plan, sub: &Subtask, output: &str) -> String {
        format!(
            "{UPDATE_SUCCESS_HEADER}\nSubtask {} succeeded. State the structural patterns, technical details or \
             constraints that remaining subtasks must follow.\nReply with JSON: {{\"payload\": \"...\"}}\n\n\
             Global task: {}\nPlan:\n{}\n\nSubtask {}: {}\n--- output ---\n{output}\n",
            sub.id,
            plan.task_description,
            plan_listing(plan),
            sub.id,
            sub.description
        )
    }

    pub fn update_failure(&self, plan: &Plan, sub: &Subtask, reason: &str) -> String {
        format!(
            "{UPDATE_FAILURE_HEADER}\nSubtask {} failed ({reason}). Propose a different strategy: a reformulated \
             description for it and any notes for the subtasks that follow.\n\
             Reply with JSON: {{\"description\": \"...\", \"payload\": \"...\"}}\n\n\
             Global task: {}\nPlan:\n{}\n\nSubtask {}: {}\n",
            sub.id,
            plan.task_description,
            plan_listing(plan),
            sub.id,
            sub.description
        )
    }
}

#[derive(Debug, Deserialize)]
pub(crate) struct PlannerReply {
    pub subtasks: Vec<PlannedSubtask>,
}

#[derive(Debug, Deserialize)]
pub(crate) struct PlannedSubtask {
    #[serde(default)]
    pub id: Option<String>,
    pub description: String,
    #[serde(default)]
    pub dependencies: Option<Vec<String>>,
    #[serde(default)]
    pub io_spec: Option<serde_json::Value>,
}

pub(crate) fn parse_plan(text: &str) -> Option<PlannerReply> {
    extract_json::<PlannerReply>(text).filter(|p| !p.subtasks.is_empty())
}

/// Parses an io_spec value; `None` when absent or invalid.
pub(crate) fn parse_io_spec(value: Option<&serde_json::Value>) -> Option<IoSpec> {
    value.and_then(|v| serde_json::from_value(v.clone()).ok())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl OneOrMany {
    fn into_vec(self) -> Vec<String> {
        match self {
            OneOrMany::One(s) => vec![s],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Deserialize)]
struct ReviewReply {
    component: OneOrMany,
    replacement: OneOrMany,
}

/// A reviewer's chosen component and its replacement text.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Revision {
    pub component: PromptComponentKind,
    pub replacement: String,
}

/// Accepts one or several component names; several are resolved by
/// [`PromptComponentKind::review_priority`].
pub(crate) fn parse_review(text: &str) -> Option<Revision> {
    let reply: ReviewReply = extract_json(text)?;
    let component = reply
        .component
        .into_vec()
        .iter()
        .filter_map(|c| PromptComponentKind::parse_loose(c))
        .min_by_key(|k| k.review_priority())?;
    let replacement = reply.replacement.into_vec().join("\n");
    if replacement.trim().is_empty() {
        return None;
    }
    Some(Revision { component, replacement })
}

#[derive(Deserialize)]
struct AugmentReply {
    #[serde(alias = "requirements")]
    requirement: OneOrMany,
}

/// New requirement clauses; empty clauses are dropped.
pub(crate) fn parse_augmentation(text: &str) -> Vec<String> {
    let clauses = match extract_json::<AugmentReply>(text) {
        Some(r) => r.requirement.into_vec(),
        None => vec![text.to_string()],
    };
    clauses.into_iter().map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect()
}

#[derive(Deserialize)]
struct PiecesReply {
    subtasks: Vec<Piece>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Piece {
    Text(String),
    Object { description: String },
}

pub(crate) fn parse_pieces(text: &str) -> Option<Vec<String>> {
    let reply: PiecesReply = extract_json(text)?;
    let pieces: Vec<String> = reply
        .subtasks
        .into_iter()
        .map(|p| match p {
            Piece::Text(t) => t,
            Piece::Object { description } => description,
        })
        .map(|d| d.trim().to_string())
        .collect();
    (pieces.len() >= 2 && pieces.iter().all(|p| !p.is_empty())).then_some(pieces)
}

#[derive(Deserialize)]
struct DescriptionReply {
    description: String,
}

pub(crate) fn parse_description(text: &str) -> Option<String> {
    extract_json::<DescriptionReply>(text).map(|d| d.description.trim().to_string()).filter(|d| !d.is_empty())
}

pub(crate) fn parse_yes(text: &str) -> bool {
    text.trim().to_ascii_lowercase().starts_with("yes")
}

#[derive(Deserialize)]
pub(crate) struct SuccessReply {
    #[serde(default)]
    pub payload: String,
    #[serde(default)]
    pub targets: Option<Vec<String>>,
}

#[derive(Deserialize)]
pub(crate) struct FailureReply {
    pub description: String,
    #[serde(default)]
    pub payload: String,
    #[serde(default)]
    pub targets: Option<Vec<String>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn review_parsing() {
        let r = parse_review(r#"{"component": "q", "replacement": ["Return JSON.", "Use key answer."]}"#).unwrap();
        assert_eq!(r.component, PromptComponentKind::Requirements);
        assert_eq!(r.replacement, "Return JSON.\nUse key answer.");
        let tie = parse_review(r#"{"component": ["history", "role", "knowledge"], "replacement": "x"}"#).unwrap();
        assert_eq!(tie.component, PromptComponentKind::Knowledge);
        assert!(parse_review(r#"{"component": "tone", "replacement": "x"}"#).is_none());
        assert!(parse_review(r#"{"component": "role", "replacement": "  "}"#).is_none());
        assert!(parse_review("the requirements are vague").is_none());
    }

    #[test]
    fn augmentation_parsing() {
        assert_eq!(
            parse_augmentation(r#"{"requirement": "Answer with a number only."}"#),
            ["Answer with a number only."]
        );
        assert_eq!(parse_augmentation(r#"{"requirements": ["a", " ", "b"]}"#), ["a", "b"]);
        assert!(parse_augmentation(r#"{"requirement": ""}"#).is_empty());
        assert_eq!(parse_augmentation("Use JSON."), ["Use JSON."]);
    }

    #[test]
    fn pieces_parsing() {
        assert_eq!(parse_pieces(r#"{"subtasks": [{"description": "a"}, "b"]}"#).unwrap(), ["a", "b"]);
        assert!(parse_pieces(r#"{"subtasks": [{"description": "only one"}]}"#).is_none());
        assert!(parse_yes(" Yes, they do."));
        assert!(!parse_yes("no"));
    }
}
