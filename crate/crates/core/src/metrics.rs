//! Output-consistency metrics.
//!
//! Semantic stability is one minus the mean pairwise cosine distance of the
//! embeddings of N sampled outputs. A token-level alternative (symmetrized
//! KL over smoothed unigram distributions) is provided for comparison.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("empty vector")]
    EmptyVector,
    #[error("need at least 2 samples, got {0}")]
    InsufficientSamples(usize),
    #[error("empty output at index {0}")]
    EmptyOutput(usize),
    #[error("smoothing alpha must be positive, got {0}")]
    InvalidAlpha(f64),
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("correlation undefined for a constant series")]
    UndefinedCorrelation,
    #[error("non-finite value in input")]
    NonFinite,
}

/// An embedding φ(y) of one output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(components: Vec<f64>) -> Result<Self, MetricError> {
        if components.is_empty() {
            return Err(MetricError::EmptyVector);
        }
        if components.iter().any(|c| !c.is_finite()) {
            return Err(MetricError::NonFinite);
        }
        Ok(EmbeddingVector(components))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn components(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_squared(&self) -> f64 {
        self.0.iter().map(|a| a * a).sum()
    }

    pub fn scaled(&self, factor: f64) -> EmbeddingVector {
        EmbeddingVector(self.0.iter().map(|a| a * factor).collect())
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

/// d = 1 − v·w / (‖v‖‖w‖), clamped to [0, 2].
pub fn cosine_distance(v: &EmbeddingVector, w: &EmbeddingVector) -> Result<f64, MetricError> {
    if v.dim() != w.dim() {
        return Err(MetricError::DimensionMismatch(v.dim(), w.dim()));
    }
    let (nv, nw) = (v.norm_squared(), w.norm_squared());
    if nv == 0.0 || nw == 0.0 {
        return Err(MetricError::ZeroNorm);
    }
    let cos = v.dot(w) / (nv * nw).sqrt();
    Ok((1.0 - cos).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairDistance {
    pub i: usize,
    pub j: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityScore {
    pub value: f64,
    pub sample_count: usize,
    pub pair_distances: Vec<PairDistance>,
}

impl StabilityScore {
    pub fn mean_distance(&self) -> f64 {
        1.0 - self.value
    }
}

/// S = 1 − mean over i<j of cosine distance.
///
/// Distances are summed in sorted order so the value is bit-identical under
/// any permutation of `vectors`.
pub fn semantic_stability(vectors: &[EmbeddingVector]) -> Result<StabilityScore, MetricError> {
    let n = vectors.len();
    if n < 2 {
        return Err(MetricError::InsufficientSamples(n));
    }
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push(PairDistance { i, j, distance: cosine_distance(&vectors[i], &vectors[j])? });
        }
    }
    let mut sorted: Vec<f64> = pairs.iter().map(|p| p.distance).collect();
    sorted.sort_by(f64::total_cmp);
    let sum: f64 = sorted.iter().sum();
    let value = 1.0 - 2.0 * sum / (n * (n - 1)) as f64;
    Ok(StabilityScore { value, sample_count: n, pair_distances: pairs })
}

/// Whitespace split, lowercased.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Add-alpha smoothed unigram distribution over a fixed vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probabilities: BTreeMap<String, f64>,
    smoothing_alpha: f64,
}

impl TokenDistribution {
    /// p(t) = (count(t) + α) / (len + α·|V|) for every t in `vocabulary`.
    pub fn smoothed(tokens: &[String], vocabulary: &BTreeSet<String>, alpha: f64) -> Result<Self, MetricError> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(MetricError::InvalidAlpha(alpha));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
        let denom = tokens.len() as f64 + alpha * vocabulary.len() as f64;
        let probabilities = vocabulary
            .iter()
            .map(|t| {
                let c = counts.get(t.as_str()).copied().unwrap_or(0) as f64;
                (t.clone(), (c + alpha) / denom)
            })
            .collect();
        Ok(TokenDistribution { probabilities, smoothing_alpha: alpha })
    }

    pub fn probability(&self, token: &str) -> Option<f64> {
        self.probabilities.get(token).copied()
    }

    pub fn smoothing_alpha(&self) -> f64 {
        self.smoothing_alpha
    }

    /// KL(self ‖ other); both must share a vocabulary.
    pub fn kl_divergence(&self, other: &TokenDistribution) -> f64 {
        self.probabilities
            .iter()
            .map(|(t, p)| {
                let q = other.probabilities[t];
                p * (p / q).ln()
            })
            .sum()
    }
}

/// Mean over pairs of ½(KL(P‖Q) + KL(Q‖P)) on smoothed unigram
/// distributions built over the union vocabulary of all outputs.
pub fn kl_stability(outputs: &[String], alpha: f64) -> Result<f64, MetricError> {
    let n = outputs.len();
    if n < 2 {
        return Err(MetricError::InsufficientSamples(n));
    }
    let tokenized: Vec<Vec<String>> = outputs.iter().map(|o| tokenize(o)).collect();
    if let Some(i) = tokenized.iter().position(Vec::is_empty) {
        return Err(MetricError::EmptyOutput(i));
    }
    let vocabulary: BTreeSet<String> = tokenized.iter().flatten().cloned().collect();
    let dists =
        tokenized.iter().map(|t| TokenDistribution::smoothed(t, &vocabulary, alpha)).collect::<Result<Vec<_>, _>>()?;
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let sym = 0.5 * (dists[i].kl_divergence(&dists[j]) + dists[j].kl_divergence(&dists[i]));
            total += sym.max(0.0);
        }
    }
    Ok(total * 2.0 / (n * (n - 1)) as f64)
}

/// Sample Pearson correlation coefficient.
pub fn pearson_correlation(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(MetricError::InsufficientSamples(xs.len()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let constant = |v: &[f64]| v.iter().all(|a| *a == v[0]);
    if constant(xs) || constant(ys) || sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::UndefinedCorrelation);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(c: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(c.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_distance(&ev(&[1.0, 0.0]), &ev(&[1.0, 0.0])).unwrap()).abs() < 1e-12);
        assert!((cosine_distance(&ev(&[1.0, 0.0]), &ev(&[0.0, 1.0])).unwrap() - 1.0).abs() < 1e-12);
        let d = cosine_distance(&ev(&[1.0, 1.0]), &ev(&[1.0, 0.0])).unwrap();
        assert!((d - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-9);
        assert!((cosine_distance(&ev(&[1.0, 0.0]), &ev(&[-1.0, 0.0])).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(cosine_distance(&ev(&[1.0]), &ev(&[1.0, 0.0])), Err(MetricError::DimensionMismatch(1, 2)));
        assert_eq!(cosine_distance(&ev(&[0.0, 0.0]), &ev(&[1.0, 0.0])), Err(MetricError::ZeroNorm));
        assert_eq!(EmbeddingVector::new(vec![]), Err(MetricError::EmptyVector));
    }

    #[test]
    fn stability_examples() {
        let same = vec![ev(&[0.3, 0.4]); 3];
        assert!((semantic_stability(&same).unwrap().value - 1.0).abs() < 1e-9);
        let s = semantic_stability(&[ev(&[1.0, 0.0]), ev(&[1.0, 0.0]), ev(&[0.0, 1.0])]).unwrap();
        assert!((s.value - 1.0 / 3.0).abs() < 1e-9);
        let ds: Vec<f64> = s.pair_distances.iter().map(|p| p.distance).collect();
        assert_eq!(ds, vec![0.0, 1.0, 1.0]);
        assert_eq!(semantic_stability(&[ev(&[1.0])]), Err(MetricError::InsufficientSamples(1)));
        assert_eq!(semantic_stability(&[ev(&[1.0, 0.0]), ev(&[0.0, 0.0])]), Err(MetricError::ZeroNorm));
    }

    #[test]
    fn kl_examples() {
        let same = vec!["a b".to_string(), "A  b".to_string()];
        assert_eq!(kl_stability(&same, 1.0).unwrap(), 0.0);
        // P = (3/4, 1/4), Q = (1/4, 3/4): KL(P‖Q) = KL(Q‖P) = ½·ln 3.
        let opposite = vec!["a a".to_string(), "b b".to_string()];
        let expected = 0.5 * 3f64.ln();
        assert!((kl_stability(&opposite, 1.0).unwrap() - expected).abs() < 1e-12);
        assert_eq!(kl_stability(&["x".into(), " ".into()], 1.0), Err(MetricError::EmptyOutput(1)));
        assert_eq!(kl_stability(&["x".into()], 1.0), Err(MetricError::InsufficientSamples(1)));
        assert!(matches!(kl_stability(&same, 0.0), Err(MetricError::InvalidAlpha(_))));
    }

    #[test]
    fn smoothed_distribution_sums_to_one() {
        let tokens = tokenize("the cat saw the dog");
        let vocab: BTreeSet<String> = tokenize("the cat saw dog bird").into_iter().collect();
        let d = TokenDistribution::smoothed(&tokens, &vocab, 0.5).unwrap();
        let total: f64 = vocab.iter().map(|t| d.probability(t).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(vocab.iter().all(|t| d.probability(t).unwrap() > 0.0));
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson_correlation(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson_correlation(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson_correlation(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), Err(MetricError::UndefinedCorrelation));
        assert_eq!(pearson_correlation(&[1.0], &[1.0, 2.0]), Err(MetricError::LengthMismatch(1, 2)));
    }

    fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, dim)
            .prop_filter("non-zero", |v| v.iter().map(|a| a * a).sum::<f64>() > 1e-6)
    }

    proptest! {
        #[test]
        fn cosine_properties(v in vec_strategy(6), w in vec_strategy(6), c in 0.01f64..100.0) {
            let (v, w) = (ev(&v), ev(&w));
            let d = cosine_distance(&v, &w).unwrap();
            prop_assert_eq!(d, cosine_distance(&w, &v).unwrap());
            prop_assert!((0.0..=2.0).contains(&d));
            prop_assert!(cosine_distance(&v, &v).unwrap().abs() < 1e-12);
            prop_assert!((cosine_distance(&v.scaled(c), &w).unwrap() - d).abs() < 1e-12);
        }

        #[test]
        fn stability_permutation_invariant(vs in prop::collection::vec(vec_strategy(4), 2..7), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let vs: Vec<EmbeddingVector> = vs.iter().map(|v| ev(v)).collect();
            let mut shuffled = vs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = semantic_stability(&vs).unwrap();
            let b = semantic_stability(&shuffled).unwrap();
            prop_assert_eq!(a.value, b.value);
            prop_assert!((-1.0..=1.0).contains(&a.value));
            prop_assert_eq!(a.pair_distances.len(), vs.len() * (vs.len() - 1) / 2);
        }

        #[test]
        fn kl_nonnegative_and_zero_on_identical(words in prop::collection::vec("[a-d]{1,2}", 1..8), other in prop::collection::vec("[e-f]{1,2}", 1..4), alpha in 0.1f64..3.0) {
            let text = words.join(" ");
            let mut rev = words.clone();
            rev.reverse();
            let same = vec![text.clone(), rev.join(" ")];
            prop_assert_eq!(kl_stability(&same, alpha).unwrap(), 0.0);
            let mixed = vec![text.clone(), format!("{} {}", text, other.join(" "))];
            prop_assert!(kl_stability(&mixed, alpha).unwrap() > 0.0);
        }
    }
}
