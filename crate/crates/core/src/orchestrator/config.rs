use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendDescriptor, Script};
use crate::plan::InteractionTemplate;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("tau must lie in (0, 1], got {0}")]
    Tau(f64),
    #[error("sample_count must be at least 2, got {0}")]
    SampleCount(u32),
    #[error("max_iterations must be at least 1")]
    MaxIterations,
    #[error("{0} must be positive")]
    NotPositive(&'static str),
    #[error("task description is empty")]
    EmptyTask,
    #[error("backend: {0}")]
    Backend(String),
}

/// Stability gate parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    pub tau: f64,
    pub sample_count: u32,
    pub max_iterations: u32,
    pub reviewer_temperature: f64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig { tau: 0.7, sample_count: 5, max_iterations: 5, reviewer_temperature: 0.0 }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(ConfigError::Tau(self.tau));
        }
        if self.sample_count < 2 {
            return Err(ConfigError::SampleCount(self.sample_count));
        }
        if self.max_iterations < 1 {
            return Err(ConfigError::MaxIterations);
        }
        if !(self.reviewer_temperature >= 0.0) {
            return Err(ConfigError::NotPositive("reviewer_temperature"));
        }
        Ok(())
    }
}

/// Signal used by the stability gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StabilityMetric {
    /// Mean pairwise cosine similarity of output embeddings.
    #[default]
    Semantic,
    /// exp(−KL) of smoothed unigram distributions.
    Kl,
}

/// Ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModuleToggles {
    pub subtask_optimizer: bool,
    pub reviewer: bool,
    pub plan_updater: bool,
    pub domain_knowledge: bool,
    pub metric: StabilityMetric,
}

impl Default for ModuleToggles {
    fn default() -> Self {
        ModuleToggles {
            subtask_optimizer: true,
            reviewer: true,
            plan_updater: true,
            domain_knowledge: true,
            metric: StabilityMetric::Semantic,
        }
    }
}

/// Module names accepted by `--disable`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Module {
    SubtaskOptimizer,
    Reviewer,
    PlanUpdater,
}

impl Module {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "subtask-optimizer" => Some(Module::SubtaskOptimizer),
            "reviewer" => Some(Module::Reviewer),
            "plan-updater" => Some(Module::PlanUpdater),
            _ => None,
        }
    }
}

impl ModuleToggles {
    pub fn disable(&mut self, module: Module) {
        match module {
            Module::SubtaskOptimizer => self.subtask_optimizer = false,
            Module::Reviewer => self.reviewer = false,
            Module::PlanUpdater => self.plan_updater = false,
        }
    }
}

/// How a final output is judged against a reference answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ReferenceMatch {
    /// Equal after collapsing whitespace.
    Exact,
    /// Leading numbers agree within `tolerance`.
    Numeric { tolerance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCheck {
    pub answer: String,
    #[serde(rename = "match", default = "exact")]
    pub matching: ReferenceMatch,
}

fn exact() -> ReferenceMatch {
    ReferenceMatch::Exact
}

/// Everything a pipeline run needs. Serialized verbatim into trace headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<InteractionTemplate>,
    #[serde(default)]
    pub refinement: RefinementConfig,
    #[serde(default = "default_augmentation_retries")]
    pub augmentation_retries: u32,
    #[serde(default = "default_reasks")]
    pub planner_reasks: u32,
    #[serde(default = "default_reasks")]
    pub review_reasks: u32,
    #[serde(default = "default_target_granularity")]
    pub target_granularity: f64,
    #[serde(default = "default_kl_alpha")]
    pub kl_alpha: f64,
    #[serde(default = "default_execution_temperature")]
    pub execution_temperature: f64,
    #[serde(default)]
    pub toggles: ModuleToggles,
    #[serde(default = "BackendDescriptor::scripted")]
    pub generator: BackendDescriptor,
    #[serde(default = "BackendDescriptor::hash_embedder")]
    pub embedder: BackendDescriptor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<Script>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceCheck>,
    #[serde(default)]
    pub seed: u64,
}

fn default_augmentation_retries() -> u32 {
    2
}
fn default_reasks() -> u32 {
    2
}
fn default_target_granularity() -> f64 {
    2.0
}
fn default_kl_alpha() -> f64 {
    1.0
}
fn default_execution_temperature() -> f64 {
    1.0
}

impl PipelineConfig {
    pub fn new(task: impl Into<String>) -> Self {
        PipelineConfig {
            task: task.into(),
            template: None,
            refinement: RefinementConfig::default(),
            augmentation_retries: default_augmentation_retries(),
            planner_reasks: default_reasks(),
            review_reasks: default_reasks(),
            target_granularity: default_target_granularity(),
            kl_alpha: default_kl_alpha(),
            execution_temperature: default_execution_temperature(),
            toggles: ModuleToggles::default(),
            generator: BackendDescriptor::scripted(),
            embedder: BackendDescriptor::hash_embedder(),
            script: None,
            reference: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.task.trim().is_empty() {
            return Err(ConfigError::EmptyTask);
        }
        self.refinement.validate()?;
        if !(self.target_granularity > 0.0) {
            return Err(ConfigError::NotPositive("target_granularity"));
        }
        if !(self.kl_alpha > 0.0) {
            return Err(ConfigError::NotPositive("kl_alpha"));
        }
        if !(self.execution_temperature >= 0.0) {
            return Err(ConfigError::NotPositive("execution_temperature"));
        }
        self.generator.validate().map_err(|e| ConfigError::Backend(e.to_string()))?;
        self.embedder.validate().map_err(|e| ConfigError::Backend(e.to_string()))?;
        Ok(())
    }
}
