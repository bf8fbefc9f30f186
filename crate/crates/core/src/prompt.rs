//! Modular prompts and I/O stream constraints.
//!
//! A [`ModularPrompt`] is split into four components (role, requirements,
//! knowledge, history) plus an [`IoSpec`]. Prompts are immutable values: the
//! only way to obtain a changed prompt is [`ModularPrompt::replace_component`],
//! which bumps the revision counter.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Placeholder rendered for empty sections.
pub const EMPTY_SECTION: &str = "none";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("invalid component {kind}: {reason}")]
    InvalidComponent { kind: PromptComponentKind, reason: String },
    #[error("invalid io spec: {0}")]
    InvalidIoSpec(String),
}

/// One of the four replaceable sections of a [`ModularPrompt`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptComponentKind {
    Role,
    Requirements,
    Knowledge,
    History,
}

impl PromptComponentKind {
    pub const ALL: [PromptComponentKind; 4] = [
        PromptComponentKind::Role,
        PromptComponentKind::Requirements,
        PromptComponentKind::Knowledge,
        PromptComponentKind::History,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptComponentKind::Role => "role",
            PromptComponentKind::Requirements => "requirements",
            PromptComponentKind::Knowledge => "knowledge",
            PromptComponentKind::History => "history",
        }
    }

    /// Section header used by [`ModularPrompt::render`].
    pub fn header(self) -> &'static str {
        match self {
            PromptComponentKind::Role => "## Role",
            PromptComponentKind::Requirements => "## Requirements",
            PromptComponentKind::Knowledge => "## Knowledge",
            PromptComponentKind::History => "## History",
        }
    }

    /// Lenient parse used on reviewer output ("q", "Requirements", "task requirements", ...).
    pub fn parse_loose(s: &str) -> Option<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "r" | "role" | "role definition" => Some(Self::Role),
            "q" | "requirements" | "requirement" | "task requirements" => Some(Self::Requirements),
            "k" | "knowledge" | "domain knowledge" => Some(Self::Knowledge),
            "h" | "history" | "context" | "context/history" => Some(Self::History),
            _ => None,
        }
    }

    /// Tie-break priority when a reviewer names several components: lower wins.
    pub fn review_priority(self) -> u8 {
        match self {
            PromptComponentKind::Requirements => 0,
            PromptComponentKind::Knowledge => 1,
            PromptComponentKind::Role => 2,
            PromptComponentKind::History => 3,
        }
    }
}

impl fmt::Display for PromptComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    #[default]
    FreeText,
    JsonObject,
    CodeBlock,
    Numeric,
}

impl OutputFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            OutputFormat::FreeText => "free-text",
            OutputFormat::JsonObject => "json-object",
            OutputFormat::CodeBlock => "code-block",
            OutputFormat::Numeric => "numeric",
        }
    }
}

impl fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Admissible output set of a subtask: format plus content constraints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawIoSpec")]
pub struct IoSpec {
    pub input_schema: BTreeMap<String, String>,
    pub output_constraint: String,
    pub output_format: OutputFormat,
    pub required_keys: Vec<String>,
}

#[derive(Deserialize)]
struct RawIoSpec {
    #[serde(default)]
    input_schema: BTreeMap<String, String>,
    #[serde(default)]
    output_constraint: String,
    #[serde(default)]
    output_format: OutputFormat,
    #[serde(default)]
    required_keys: Vec<String>,
}

impl TryFrom<RawIoSpec> for IoSpec {
    type Error = PromptError;

    fn try_from(raw: RawIoSpec) -> Result<Self, Self::Error> {
        let spec = IoSpec {
            input_schema: raw.input_schema,
            output_constraint: raw.output_constraint,
            output_format: raw.output_format,
            required_keys: raw.required_keys,
        };
        spec.check()?;
        Ok(spec)
    }
}

impl Default for IoSpec {
    fn default() -> Self {
        Self::free_text()
    }
}

impl IoSpec {
    pub fn free_text() -> Self {
        IoSpec {
            input_schema: BTreeMap::new(),
            output_constraint: String::new(),
            output_format: OutputFormat::FreeText,
            required_keys: Vec::new(),
        }
    }

    pub fn numeric() -> Self {
        IoSpec { output_format: OutputFormat::Numeric, ..Self::free_text() }
    }

    pub fn code_block() -> Self {
        IoSpec { output_format: OutputFormat::CodeBlock, ..Self::free_text() }
    }

    pub fn json_object<I, S>(required_keys: I) -> Result<Self, PromptError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let spec = IoSpec {
            output_format: OutputFormat::JsonObject,
            required_keys: required_keys.into_iter().map(Into::into).collect(),
            ..Self::free_text()
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn with_constraint(mut self, constraint: impl Into<String>) -> Self {
        self.output_constraint = constraint.into();
        self
    }

    pub fn with_input(mut self, field: impl Into<String>, ty: impl Into<String>) -> Self {
        self.input_schema.insert(field.into(), ty.into());
        self
    }

    fn check(&self) -> Result<(), PromptError> {
        if self.output_format == OutputFormat::JsonObject {
            if self.required_keys.is_empty() {
                return Err(PromptError::InvalidIoSpec("json-object output must declare required keys".into()));
            }
            if self.required_keys.iter().any(|k| k.trim().is_empty()) {
                return Err(PromptError::InvalidIoSpec("empty required key".into()));
            }
        }
        Ok(())
    }

    fn render(&self, out: &mut String) {
        out.push_str("## I/O Spec\n");
        if self.input_schema.is_empty() {
            out.push_str("Input: none\n");
        } else {
            let fields: Vec<String> = self.input_schema.iter().map(|(k, v)| format!("{k} ({v})")).collect();
            out.push_str(&format!("Input: {}\n", fields.join(", ")));
        }
        out.push_str(&format!("Output format: {}\n", self.output_format));
        if !self.required_keys.is_empty() {
            out.push_str(&format!("Required keys: {}\n", self.required_keys.join(", ")));
        }
        if !self.output_constraint.trim().is_empty() {
            out.push_str(&format!("Output constraint: {}\n", self.output_constraint.trim()));
        }
    }
}

/// Why an output fell outside the admissible set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum ValidationFailure {
    FormatMismatch { expected: OutputFormat },
    MissingKey { key: String },
    NonNumeric,
}

impl fmt::Display for ValidationFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationFailure::FormatMismatch { expected } => {
                write!(f, "format-mismatch (expected {expected})")
            }
            ValidationFailure::MissingKey { key } => write!(f, "missing-key ({key})"),
            ValidationFailure::NonNumeric => f.write_str("non-numeric"),
        }
    }
}

/// Checks `output` against the format constraints of `spec`.
///
/// Content constraints written as prose in `output_constraint` are not
/// interpreted here.
pub fn validate_output(output: &str, spec: &IoSpec) -> Result<(), ValidationFailure> {
    let trimmed = output.trim();
    match spec.output_format {
        OutputFormat::FreeText => {
            if trimmed.is_empty() {
                return Err(ValidationFailure::FormatMismatch { expected: OutputFormat::FreeText });
            }
            Ok(())
        }
        OutputFormat::Numeric => match trimmed.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(()),
            _ => Err(ValidationFailure::NonNumeric),
        },
        OutputFormat::CodeBlock => {
            let fences = trimmed.matches("```").count();
            if fences >= 2 {
                Ok(())
            } else {
                Err(ValidationFailure::FormatMismatch { expected: OutputFormat::CodeBlock })
            }
        }
        OutputFormat::JsonObject => {
            let body = strip_code_fence(trimmed);
            let value: serde_json::Value = serde_json::from_str(body)
                .map_err(|_| ValidationFailure::FormatMismatch { expected: OutputFormat::JsonObject })?;
            let obj =
                value.as_object().ok_or(ValidationFailure::FormatMismatch { expected: OutputFormat::JsonObject })?;
            for key in &spec.required_keys {
                if !obj.contains_key(key) {
                    return Err(ValidationFailure::MissingKey { key: key.clone() });
                }
            }
            Ok(())
        }
    }
}

/// Removes a surrounding markdown fence (```json ... ```), if any.
pub(crate) fn strip_code_fence(s: &str) -> &str {
    let s = s.trim();
    if let Some(rest) = s.strip_prefix("```") {
        let rest = match rest.find('\n') {
            Some(i) => &rest[i + 1..],
            None => rest,
        };
        return rest.trim_end().strip_suffix("```").unwrap_or(rest).trim();
    }
    s
}

/// A prompt decomposed into role, requirements, knowledge and history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPrompt")]
pub struct ModularPrompt {
    role: String,
    requirements: Vec<String>,
    knowledge: String,
    history: String,
    io_spec: IoSpec,
    revision: u32,
}

#[derive(Deserialize)]
struct RawPrompt {
    role: String,
    #[serde(default)]
    requirements: Vec<String>,
    #[serde(default)]
    knowledge: String,
    #[serde(default)]
    history: String,
    #[serde(default)]
    io_spec: IoSpec,
    #[serde(default)]
    revision: u32,
}

impl TryFrom<RawPrompt> for ModularPrompt {
    type Error = PromptError;

    fn try_from(raw: RawPrompt) -> Result<Self, Self::Error> {
        let mut p = ModularPrompt::new(raw.role, raw.requirements, raw.knowledge, raw.history, raw.io_spec)?;
        p.revision = raw.revision;
        Ok(p)
    }
}

impl ModularPrompt {
    pub fn new(
        role: impl Into<String>,
        requirements: Vec<String>,
        knowledge: impl Into<String>,
        history: impl Into<String>,
        io_spec: IoSpec,
    ) -> Result<Self, PromptError> {
        let role = role.into();
        check_role(&role)?;
        check_requirements(&requirements)?;
        Ok(ModularPrompt {
            role,
            requirements,
            knowledge: knowledge.into(),
            history: history.into(),
            io_spec,
            revision: 0,
        })
    }

    pub fn role(&self) -> &str {
        &self.role
    }

    pub fn requirements(&self) -> &[String] {
        &self.requirements
    }

    pub fn knowledge(&self) -> &str {
        &self.knowledge
    }

    pub fn history(&self) -> &str {
        &self.history
    }

    pub fn io_spec(&self) -> &IoSpec {
        &self.io_spec
    }

    pub fn revision(&self) -> u32 {
        self.revision
    }

    /// Text of one component as it would be edited by a reviewer.
    /// Requirements are joined one clause per line.
    pub fn component_text(&self, kind: PromptComponentKind) -> String {
        match kind {
            PromptComponentKind::Role => self.role.clone(),
            PromptComponentKind::Requirements => self.requirements.join("\n"),
            PromptComponentKind::Knowledge => self.knowledge.clone(),
            PromptComponentKind::History => self.history.clone(),
        }
    }

    /// Returns a copy with one component replaced and the revision bumped.
    ///
    /// For [`PromptComponentKind::Requirements`] the new value is the full
    /// clause list, one clause per non-blank line.
    pub fn replace_component(&self, kind: PromptComponentKind, new_value: &str) -> Result<ModularPrompt, PromptError> {
        let mut next = self.clone();
        match kind {
            PromptComponentKind::Role => {
                check_role(new_value)?;
                next.role = new_value.to_string();
            }
            PromptComponentKind::Requirements => {
                next.requirements = split_clauses(new_value);
            }
            PromptComponentKind::Knowledge => next.knowledge = new_value.to_string(),
            PromptComponentKind::History => next.history = new_value.to_string(),
        }
        next.revision = self.revision + 1;
        Ok(next)
    }

    /// Replace the requirements with an explicit clause list.
    pub fn replace_requirements(&self, clauses: Vec<String>) -> Result<ModularPrompt, PromptError> {
        check_requirements(&clauses)?;
        let mut next = self.clone();
        next.requirements = clauses;
        next.revision = self.revision + 1;
        Ok(next)
    }

    /// Deterministic rendering: Role, Requirements, Knowledge, History, I/O Spec.
    pub fn render(&self) -> String {
        let mut out = String::new();
        section(&mut out, PromptComponentKind::Role.header(), &self.role);
        out.push_str(PromptComponentKind::Requirements.header());
        out.push('\n');
        if self.requirements.is_empty() {
            out.push_str(EMPTY_SECTION);
            out.push('\n');
        } else {
            for (i, clause) in self.requirements.iter().enumerate() {
                out.push_str(&format!("{}. {}\n", i + 1, clause));
            }
        }
        out.push('\n');
        section(&mut out, PromptComponentKind::Knowledge.header(), &self.knowledge);
        section(&mut out, PromptComponentKind::History.header(), &self.history);
        self.io_spec.render(&mut out);
        out
    }

    /// Hex SHA-256 of the rendered text.
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.render())
    }
}

/// Free function form of [`ModularPrompt::render`].
pub fn render_prompt(p: &ModularPrompt) -> String {
    p.render()
}

/// Hex SHA-256 of arbitrary text.
pub fn fingerprint(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn section(out: &mut String, header: &str, body: &str) {
    out.push_str(header);
    out.push('\n');
    let body = body.trim();
    out.push_str(if body.is_empty() { EMPTY_SECTION } else { body });
    out.push_str("\n\n");
}

fn check_role(role: &str) -> Result<(), PromptError> {
    if role.trim().is_empty() {
        return Err(PromptError::InvalidComponent {
            kind: PromptComponentKind::Role,
            reason: "role must be non-empty".into(),
        });
    }
    Ok(())
}

fn check_requirements(clauses: &[String]) -> Result<(), PromptError> {
    if clauses.iter().any(|c| c.trim().is_empty()) {
        return Err(PromptError::InvalidComponent {
            kind: PromptComponentKind::Requirements,
            reason: "requirement clauses must be non-empty".into(),
        });
    }
    Ok(())
}

fn split_clauses(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect()
}
