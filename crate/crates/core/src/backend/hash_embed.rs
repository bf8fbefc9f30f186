use sha2::{Digest, Sha256};

use super::{check_texts, BackendError, Embedder};
use crate::metrics::EmbeddingVector;

pub const HASH_EMBEDDING_DIM: usize = 64;

const NEGATORS: [&str; 5] = ["not", "no", "never", "nor", "cannot"];

/// Deterministic offline embedder: a hashed bag of negation-scoped tokens.
///
/// Tokens are lowercased and stripped of surrounding punctuation. Tokens
/// that follow a negator ("not", "no", "never", "nor", "cannot", "…n't") up
/// to the end of the clause are prefixed with `not_`. Each feature adds one
/// count to bucket `sha256(feature)[..8] mod 64`. A text with no features
/// maps to the first basis vector so the norm is always positive.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashEmbedder;

impl HashEmbedder {
    pub fn embed_one(text: &str) -> EmbeddingVector {
        let mut counts = vec![0.0; HASH_EMBEDDING_DIM];
        for feature in hash_features(text) {
            counts[bucket(&feature)] += 1.0;
        }
        if counts.iter().all(|c| *c == 0.0) {
            counts[0] = 1.0;
        }
        EmbeddingVector::new(counts).expect("fixed non-empty finite vector")
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        check_texts(texts)?;
        Ok(texts.iter().map(|t| Self::embed_one(t)).collect())
    }
}

fn bucket(feature: &str) -> usize {
    let digest = Sha256::digest(feature.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    (u64::from_be_bytes(head) % HASH_EMBEDDING_DIM as u64) as usize
}

/// Feature strings hashed by [`HashEmbedder`], in text order.
pub fn hash_features(text: &str) -> Vec<String> {
    let mut features = Vec::new();
    let mut negated = false;
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        let clause_ends = lower.ends_with(['.', ',', ';', '!', '?', ':']);
        let token = lower.trim_matches(|c: char| !c.is_alphanumeric());
        if !token.is_empty() {
            if negated {
                features.push(format!("not_{token}"));
            } else {
                features.push(token.to_string());
            }
            if NEGATORS.contains(&token) || token.ends_with("n't") || token.ends_with("nt'") {
                negated = true;
            }
        }
        if clause_ends {
            negated = false;
        }
    }
    features
}
