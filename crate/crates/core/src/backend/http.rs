use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::{check_texts, BackendDescriptor, BackendError, Embedder, GenerationRequest, Generator};
use crate::metrics::EmbeddingVector;

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "PROMPTOR_API_KEY";

const MAX_BACKOFF: Duration = Duration::from_secs(10);

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    n: u32,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

/// Counting semaphore bounding concurrent requests.
struct InflightLimit {
    max: u32,
    current: Mutex<u32>,
    freed: Condvar,
}

struct Permit<'a>(&'a InflightLimit);

impl InflightLimit {
    fn new(max: u32) -> Self {
        InflightLimit { max: max.max(1), current: Mutex::new(0), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.current.lock().expect("inflight lock");
        while *n >= self.max {
            n = self.freed.wait(n).expect("inflight lock");
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.current.lock().expect("inflight lock");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// Shared POST-with-retry machinery.
struct Transport {
    descriptor: BackendDescriptor,
    client: reqwest::blocking::Client,
    limit: InflightLimit,
    api_key: Option<String>,
}

enum AttemptError {
    Retryable(String),
    Fatal(BackendError),
}

impl Transport {
    fn new(descriptor: BackendDescriptor) -> Result<Self, BackendError> {
        descriptor.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(descriptor.timeout())
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Transport {
            limit: InflightLimit::new(descriptor.max_inflight),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            descriptor,
            client,
        })
    }

    fn model(&self) -> &str {
        self.descriptor.model_name.as_deref().unwrap_or_default()
    }

    fn url(&self, path: &str) -> String {
        let base = self.descriptor.endpoint_url.as_deref().unwrap_or_default();
        format!("{}/{}", base.trim_end_matches('/'), path)
    }

    fn attempt(&self, url: &str, body: &[u8]) -> Result<String, AttemptError> {
        let _permit = self.limit.acquire();
        let mut req =
            self.client.post(url).header(reqwest::header::CONTENT_TYPE, "application/json").body(body.to_vec());
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| AttemptError::Retryable(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| AttemptError::Retryable(e.to_string()))?;
        if status.is_success() {
            Ok(text)
        } else if status.is_server_error() || status.as_u16() == 429 {
            Err(AttemptError::Retryable(format!("status {status}: {text}")))
        } else {
            Err(AttemptError::Fatal(BackendError::Status { status: status.as_u16(), body: text }))
        }
    }

    /// POSTs `body`, retrying transient failures up to `max_retries` times.
    fn post(&self, path: &str, body: &[u8]) -> Result<String, BackendError> {
        let url = self.url(path);
        let attempts = self.descriptor.max_retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.attempt(&url, body) {
                Ok(text) => return Ok(text),
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Retryable(msg)) => {
                    warn!("{url}: attempt {attempt}/{attempts} failed: {msg}");
                    last = msg;
                    if attempt < attempts {
                        let factor = 1u32 << (attempt - 1).min(16);
                        let wait = Duration::from_millis(self.descriptor.retry_backoff_ms) * factor;
                        thread::sleep(wait.min(MAX_BACKOFF));
                    }
                }
            }
        }
        Err(BackendError::Transport { attempts, message: last })
    }
}

/// OpenAI-compatible `POST {endpoint}/chat/completions` client.
pub struct HttpGenerator {
    transport: Transport,
}

impl HttpGenerator {
    pub fn new(descriptor: BackendDescriptor) -> Result<Self, BackendError> {
        Ok(HttpGenerator { transport: Transport::new(descriptor)? })
    }

    /// Exact request body sent for `request`.
    pub fn request_body(&self, request: &GenerationRequest, n: u32) -> Vec<u8> {
        chat_body(self.transport.model(), request, n)
    }
}

fn chat_body(model: &str, request: &GenerationRequest, n: u32) -> Vec<u8> {
    let body = ChatRequest {
        model,
        messages: [ChatMessage { role: "user", content: &request.prompt_text }],
        temperature: request.temperature,
        n,
        max_tokens: request.max_tokens,
    };
    serde_json::to_vec(&body).expect("request serializes")
}

impl Generator for HttpGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, BackendError> {
        request.validate()?;
        let mut outputs = Vec::with_capacity(request.sample_count as usize);
        // Some servers ignore `n`; keep asking for the remainder.
        while outputs.len() < request.sample_count as usize {
            let missing = request.sample_count - outputs.len() as u32;
            let body = chat_body(self.transport.model(), request, missing);
            let text = self.transport.post("chat/completions", &body)?;
            let parsed: ChatResponse = serde_json::from_str(&text).map_err(|e| BackendError::Decode(e.to_string()))?;
            if parsed.choices.is_empty() {
                return Err(BackendError::Decode("response has no choices".into()));
            }
            debug!("received {} choice(s)", parsed.choices.len());
            outputs.extend(parsed.choices.into_iter().map(|c| c.message.content.unwrap_or_default()));
        }
        outputs.truncate(request.sample_count as usize);
        Ok(outputs)
    }
}

/// OpenAI-compatible `POST {endpoint}/embeddings` client.
pub struct HttpEmbedder {
    transport: Transport,
}

impl HttpEmbedder {
    pub fn new(descriptor: BackendDescriptor) -> Result<Self, BackendError> {
        Ok(HttpEmbedder { transport: Transport::new(descriptor)? })
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        check_texts(texts)?;
        let body = serde_json::to_vec(&EmbeddingRequest { model: self.transport.model(), input: texts })
            .expect("request serializes");
        let text = self.transport.post("embeddings", &body)?;
        let parsed: EmbeddingResponse = serde_json::from_str(&text).map_err(|e| BackendError::Decode(e.to_string()))?;
        if parsed.data.len() != texts.len() {
            return Err(BackendError::Decode(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        let vectors = parsed
            .data
            .into_iter()
            .map(|d| EmbeddingVector::new(d.embedding).map_err(|e| BackendError::Decode(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        if vectors.windows(2).any(|w| w[0].dim() != w[1].dim()) {
            return Err(BackendError::Decode("embeddings of differing dimension".into()));
        }
        Ok(vectors)
    }
}
