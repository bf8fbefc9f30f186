use std::collections::HashMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, GenerationRequest, Generator};
use crate::prompt::fingerprint;

/// Which prompts a behavior answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Matcher {
    /// Exact hex SHA-256 of the prompt text.
    Fingerprint(String),
    /// Prompt text starts with this prefix.
    Prefix(String),
    /// Prompt text contains every listed fragment.
    ContainsAll(Vec<String>),
    /// Matches anything.
    Any,
}

impl Matcher {
    pub fn contains<I, S>(fragments: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Matcher::ContainsAll(fragments.into_iter().map(Into::into).collect())
    }

    fn matches(&self, text: &str, fp: &str) -> bool {
        match self {
            Matcher::Fingerprint(f) => f == fp,
            Matcher::Prefix(p) => text.starts_with(p.as_str()),
            Matcher::ContainsAll(parts) => parts.iter().all(|p| text.contains(p.as_str())),
            Matcher::Any => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// Independent weighted draws, seeded by (seed, fingerprint, call index).
    #[default]
    Weighted,
    /// Walks the outcome list in order, continuing across calls.
    Cycle,
}

/// A weighted set of canned outputs for the prompts a [`Matcher`] selects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedBehavior {
    #[serde(rename = "match")]
    pub matcher: Matcher,
    #[serde(default)]
    pub outcomes: Vec<Outcome>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: SamplingMode,
    /// Every call fails with a scripted error instead of answering.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fail: bool,
}

impl ScriptedBehavior {
    /// Always answers `text`.
    pub fn point(matcher: Matcher, text: impl Into<String>) -> Self {
        ScriptedBehavior {
            matcher,
            outcomes: vec![Outcome { text: text.into(), probability: Some(1.0) }],
            seed: 0,
            mode: SamplingMode::Weighted,
            fail: false,
        }
    }

    pub fn weighted<I, S>(matcher: Matcher, outcomes: I, seed: u64) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        ScriptedBehavior {
            matcher,
            outcomes: outcomes.into_iter().map(|(t, p)| Outcome { text: t.into(), probability: Some(p) }).collect(),
            seed,
            mode: SamplingMode::Weighted,
            fail: false,
        }
    }

    pub fn cycle<I, S>(matcher: Matcher, texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedBehavior {
            matcher,
            outcomes: texts.into_iter().map(|t| Outcome { text: t.into(), probability: None }).collect(),
            seed: 0,
            mode: SamplingMode::Cycle,
            fail: false,
        }
    }

    pub fn failing(matcher: Matcher) -> Self {
        ScriptedBehavior { matcher, outcomes: Vec::new(), seed: 0, mode: SamplingMode::Weighted, fail: true }
    }

    /// Normalized weights. Missing probabilities mean "uniform".
    fn weights(&self) -> Result<Vec<f64>, BackendError> {
        if self.fail {
            return Ok(Vec::new());
        }
        if self.outcomes.is_empty() {
            return Err(BackendError::Config("scripted behavior needs at least one outcome".into()));
        }
        let given: Vec<Option<f64>> = self.outcomes.iter().map(|o| o.probability).collect();
        if given.iter().all(Option::is_none) {
            let k = self.outcomes.len() as f64;
            return Ok(vec![1.0 / k; self.outcomes.len()]);
        }
        let ps: Vec<f64> = given
            .into_iter()
            .map(|p| p.ok_or_else(|| BackendError::Config("give all probabilities or none".into())))
            .collect::<Result<_, _>>()?;
        if ps.iter().any(|p| !(*p >= 0.0)) {
            return Err(BackendError::Config("negative outcome probability".into()));
        }
        let total: f64 = ps.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(BackendError::Config(format!("outcome probabilities sum to {total}, not 1")));
        }
        Ok(ps)
    }
}

/// Ordered behaviors; the first whose matcher accepts the prompt answers it.
/// Fingerprint matchers are checked before all others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Script {
    pub behaviors: Vec<ScriptedBehavior>,
}

impl Script {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, behavior: ScriptedBehavior) -> Self {
        self.behaviors.push(behavior);
        self
    }

    pub fn push(&mut self, behavior: ScriptedBehavior) {
        self.behaviors.push(behavior);
    }
}

struct Compiled {
    behavior: ScriptedBehavior,
    cumulative: Vec<f64>,
}

/// Deterministic generator driven by a [`Script`].
pub struct ScriptedGenerator {
    behaviors: Vec<Compiled>,
    // (behavior index, fingerprint) -> (calls so far, samples so far)
    counters: Mutex<HashMap<(usize, String), (u64, u64)>>,
    log: Mutex<Vec<GenerationRequest>>,
    run_seed: u64,
}

impl ScriptedGenerator {
    pub fn new(script: Script) -> Result<Self, BackendError> {
        let mut behaviors = Vec::with_capacity(script.behaviors.len());
        for behavior in script.behaviors {
            let weights = behavior.weights()?;
            let mut acc = 0.0;
            let cumulative = weights
                .iter()
                .map(|w| {
                    acc += w;
                    acc
                })
                .collect();
            behaviors.push(Compiled { behavior, cumulative });
        }
        Ok(ScriptedGenerator {
            behaviors,
            counters: Mutex::new(HashMap::new()),
            log: Mutex::new(Vec::new()),
            run_seed: 0,
        })
    }

    /// Mixes a per-run seed into every weighted draw.
    pub fn with_run_seed(mut self, seed: u64) -> Self {
        self.run_seed = seed;
        self
    }

    /// Every request seen so far, in call order.
    pub fn requests(&self) -> Vec<GenerationRequest> {
        self.log.lock().expect("log lock").clone()
    }

    fn select(&self, text: &str, fp: &str) -> Option<usize> {
        let exact =
            self.behaviors.iter().position(|c| matches!(&c.behavior.matcher, Matcher::Fingerprint(f) if f == fp));
        exact.or_else(|| self.behaviors.iter().position(|c| c.behavior.matcher.matches(text, fp)))
    }
}

fn substream_seed(seed: u64, run_seed: u64, fp: &str, call_index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(run_seed.to_be_bytes());
    h.update(fp.as_bytes());
    h.update(call_index.to_be_bytes());
    let digest = h.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(head)
}

impl Generator for ScriptedGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, BackendError> {
        request.validate()?;
        self.log.lock().expect("log lock").push(request.clone());
        let fp = fingerprint(&request.prompt_text);
        let idx = self
            .select(&request.prompt_text, &fp)
            .ok_or_else(|| BackendError::UnknownPrompt { fingerprint: fp.clone() })?;
        let compiled = &self.behaviors[idx];
        let b = &compiled.behavior;
        if b.fail {
            return Err(BackendError::Scripted(format!("behavior {idx} always fails")));
        }
        let n = request.sample_count as u64;
        let (call_index, offset) = {
            let mut counters = self.counters.lock().expect("counter lock");
            let entry = counters.entry((idx, fp.clone())).or_insert((0, 0));
            let current = *entry;
            entry.0 += 1;
            entry.1 += n;
            current
        };
        let k = b.outcomes.len() as u64;
        let outputs = match b.mode {
            SamplingMode::Cycle => (0..n).map(|s| b.outcomes[((offset + s) % k) as usize].text.clone()).collect(),
            SamplingMode::Weighted => {
                let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(b.seed, self.run_seed, &fp, call_index));
                (0..n)
                    .map(|_| {
                        let u: f64 = rng.random();
                        let pick = compiled.cumulative.iter().position(|c| u < *c).unwrap_or(b.outcomes.len() - 1);
                        b.outcomes[pick].text.clone()
                    })
                    .collect()
            }
        };
        Ok(outputs)
    }
}
