//! Text generation and embedding backends.
//!
//! Everything above this module talks to [`Generator`] and [`Embedder`]. The
//! HTTP implementations speak the OpenAI-compatible wire format; the scripted
//! generator and the hash embedder are deterministic stand-ins for offline
//! runs and tests.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::EmbeddingVector;

mod hash_embed;
mod http;
mod scripted;

pub use hash_embed::{hash_features, HashEmbedder, HASH_EMBEDDING_DIM};
pub use http::{HttpEmbedder, HttpGenerator, API_KEY_ENV};
pub use scripted::{Matcher, Outcome, SamplingMode, Script, ScriptedBehavior, ScriptedGenerator};

/// Sampling temperature for stability measurement.
pub const STABILITY_TEMPERATURE: f64 = 1.0;
/// Temperature for planner, reviewer, summarizer and other control calls.
pub const CONTROL_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("no scripted behavior for prompt {fingerprint}")]
    UnknownPrompt { fingerprint: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("empty input")]
    EmptyInput,
    #[error("empty text at index {0}")]
    EmptyText(usize),
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("scripted failure: {0}")]
    Scripted(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt_text: String,
    pub temperature: f64,
    pub sample_count: u32,
    pub max_tokens: u32,
}

impl GenerationRequest {
    pub fn new(prompt_text: impl Into<String>, temperature: f64, sample_count: u32) -> Self {
        GenerationRequest { prompt_text: prompt_text.into(), temperature, sample_count, max_tokens: DEFAULT_MAX_TOKENS }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.sample_count < 1 {
            return Err(BackendError::InvalidRequest("sample_count must be >= 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(BackendError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.max_tokens < 1 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// Draws `sample_count` outputs for a prompt.
pub trait Generator: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, BackendError>;
}

/// Maps texts to embedding vectors of a common dimension.
pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError>;
}

impl<T: Generator + ?Sized> Generator for &T {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, BackendError> {
        (**self).generate(request)
    }
}

impl<T: Generator + ?Sized> Generator for Box<T> {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, BackendError> {
        (**self).generate(request)
    }
}

impl<T: Embedder + ?Sized> Embedder for &T {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        (**self).embed(texts)
    }
}

impl<T: Embedder + ?Sized> Embedder for Box<T> {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        (**self).embed(texts)
    }
}

pub(crate) fn check_texts(texts: &[String]) -> Result<(), BackendError> {
    if texts.is_empty() {
        return Err(BackendError::EmptyInput);
    }
    if let Some(i) = texts.iter().position(|t| t.is_empty()) {
        return Err(BackendError::EmptyText(i));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Http,
    Scripted,
    HashEmbedder,
}

/// How to reach a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_max_inflight")]
    pub max_inflight: u32,
    #[serde(default = "default_backoff_ms")]
    pub retry_backoff_ms: u64,
}

fn default_timeout_ms() -> u64 {
    60_000
}
fn default_max_retries() -> u32 {
    3
}
fn default_max_inflight() -> u32 {
    4
}
fn default_backoff_ms() -> u64 {
    250
}

impl BackendDescriptor {
    pub fn scripted() -> Self {
        Self::of_kind(BackendKind::Scripted)
    }

    pub fn hash_embedder() -> Self {
        Self::of_kind(BackendKind::HashEmbedder)
    }

    pub fn http(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        BackendDescriptor {
            endpoint_url: Some(endpoint_url.into()),
            model_name: Some(model_name.into()),
            ..Self::of_kind(BackendKind::Http)
        }
    }

    fn of_kind(kind: BackendKind) -> Self {
        BackendDescriptor {
            kind,
            endpoint_url: None,
            model_name: None,
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            max_inflight: default_max_inflight(),
            retry_backoff_ms: default_backoff_ms(),
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_inflight < 1 {
            return Err(BackendError::Config("max_inflight must be >= 1".into()));
        }
        if self.kind == BackendKind::Http && (self.endpoint_url.is_none() || self.model_name.is_none()) {
            return Err(BackendError::Config("http backend needs endpoint_url and model_name".into()));
        }
        Ok(())
    }

    /// Builds a generator. Scripted backends need a script.
    /// `run_seed` only affects scripted generators.
    pub fn build_generator(&self, script: Option<Script>, run_seed: u64) -> Result<Box<dyn Generator>, BackendError> {
        self.validate()?;
        match self.kind {
            BackendKind::Http => Ok(Box::new(HttpGenerator::new(self.clone())?)),
            BackendKind::Scripted => {
                let script = script.ok_or_else(|| BackendError::Config("scripted generator needs a script".into()))?;
                Ok(Box::new(ScriptedGenerator::new(script)?.with_run_seed(run_seed)))
            }
            BackendKind::HashEmbedder => Err(BackendError::Config("hash-embedder cannot generate text".into())),
        }
    }

    pub fn build_embedder(&self) -> Result<Box<dyn Embedder>, BackendError> {
        self.validate()?;
        match self.kind {
            BackendKind::Http => Ok(Box::new(HttpEmbedder::new(self.clone())?)),
            BackendKind::HashEmbedder => Ok(Box::new(HashEmbedder)),
            BackendKind::Scripted => Err(BackendError::Config("use hash-embedder for offline embeddings".into())),
        }
    }
}
