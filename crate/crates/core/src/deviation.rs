//! Scalar aggregation model of a planner/executor system and the tail bound
//! on its deviation.
//!
//! Each executor output is encoded as a scalar x_i and combined into
//! s = Σ u_i v_i x_i. For independent centred outputs,
//!
//! ```text
//! P(|s − ŝ| ≥ ε) ≤ 2·exp(−ε² / (2 Σ (u_i v_i)² Var(x_i)))
//! ```
//!
//! [`simulate_deviation_tails`] estimates the left-hand side by Monte Carlo so
//! the bound can be checked empirically.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Embedder};

/// Trials per RNG substream. Substream `c` covers trials `[c·CHUNK, (c+1)·CHUNK)`.
pub const CHUNK_TRIALS: u64 = 8192;

/// Identifier of the sampling scheme recorded in every report.
pub const GENERATOR_ID: &str = "chacha8-stream-per-chunk-8192";

#[derive(Debug, Error)]
pub enum DeviationError {
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("epsilon must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("trials must be at least 1")]
    ZeroTrials,
    #[error("unsupported distribution family {0:?}")]
    UnsupportedFamily(String),
    #[error("invalid agent output model: {0}")]
    InvalidModel(String),
    #[error("aggregation vectors must be non-empty and of equal length")]
    InvalidSpec,
    #[error("cannot encode output: {0}")]
    EncodeFailure(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Aggregation weights u, v over n agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct AggregationSpec {
    u: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Deserialize)]
struct RawSpec {
    u: Vec<f64>,
    v: Vec<f64>,
}

impl TryFrom<RawSpec> for AggregationSpec {
    type Error = DeviationError;
    fn try_from(raw: RawSpec) -> Result<Self, Self::Error> {
        AggregationSpec::new(raw.u, raw.v)
    }
}

impl AggregationSpec {
    pub fn new(u: Vec<f64>, v: Vec<f64>) -> Result<Self, DeviationError> {
        if u.is_empty() || u.len() != v.len() {
            return Err(DeviationError::InvalidSpec);
        }
        Ok(AggregationSpec { u, v })
    }

    /// u = v = (1, …, 1).
    pub fn ones(n: usize) -> Result<Self, DeviationError> {
        Self::new(vec![1.0; n], vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    /// Per-agent products u_i·v_i.
    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.u.iter().zip(&self.v).map(|(a, b)| a * b)
    }
}

/// s = Σ u_i v_i x_i, summed in ascending index order.
pub fn aggregate(x: &[f64], spec: &AggregationSpec) -> Result<f64, DeviationError> {
    if x.len() != spec.len() {
        return Err(DeviationError::LengthMismatch { expected: spec.len(), got: x.len() });
    }
    let mut s = 0.0;
    for (w, xi) in spec.weights().zip(x) {
        s += w * xi;
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistributionFamily {
    Gaussian,
    UniformBounded,
}

impl DistributionFamily {
    pub fn parse(s: &str) -> Result<Self, DeviationError> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "uniform-bounded" => Ok(Self::UniformBounded),
            other => Err(DeviationError::UnsupportedFamily(other.to_string())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::UniformBounded => "uniform-bounded",
        }
    }
}

/// Sampling law of one executor's scalar output. `mean` is the intended
/// output x̂_i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel")]
pub struct AgentOutputModel {
    pub mean: f64,
    pub variance: f64,
    pub family: DistributionFamily,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bounds: Option<(f64, f64)>,
}

#[derive(Deserialize)]
struct RawModel {
    #[serde(default)]
    mean: Option<f64>,
    #[serde(default)]
    variance: Option<f64>,
    family: String,
    #[serde(default)]
    bounds: Option<(f64, f64)>,
}

impl TryFrom<RawModel> for AgentOutputModel {
    type Error = DeviationError;

    fn try_from(raw: RawModel) -> Result<Self, Self::Error> {
        match DistributionFamily::parse(&raw.family)? {
            DistributionFamily::Gaussian => AgentOutputModel::gaussian(
                raw.mean.ok_or_else(|| DeviationError::InvalidModel("gaussian needs mean".into()))?,
                raw.variance.ok_or_else(|| DeviationError::InvalidModel("gaussian needs variance".into()))?,
            ),
            DistributionFamily::UniformBounded => {
                let (lo, hi) =
                    raw.bounds.ok_or_else(|| DeviationError::InvalidModel("uniform-bounded needs bounds".into()))?;
                let model = AgentOutputModel::uniform(lo, hi)?;
                if let Some(var) = raw.variance {
                    if (var - model.variance).abs() > 1e-9 * model.variance.max(1.0) {
                        return Err(DeviationError::InvalidModel(format!(
                            "variance {var} disagrees with bounds, expected {}",
                            model.variance
                        )));
                    }
                }
                if let Some(mean) = raw.mean {
                    if (mean - model.mean).abs() > 1e-9 * model.mean.abs().max(1.0) {
                        return Err(DeviationError::InvalidModel("uniform mean must be the midpoint".into()));
                    }
                }
                Ok(model)
            }
        }
    }
}

impl AgentOutputModel {
    pub fn gaussian(mean: f64, variance: f64) -> Result<Self, DeviationError> {
        if !(variance >= 0.0 && variance.is_finite() && mean.is_finite()) {
            return Err(DeviationError::InvalidModel(format!("variance {variance}")));
        }
        Ok(AgentOutputModel { mean, variance, family: DistributionFamily::Gaussian, bounds: None })
    }

    /// Uniform on [lo, hi], centred on its midpoint.
    pub fn uniform(lo: f64, hi: f64) -> Result<Self, DeviationError> {
        if !(lo < hi && lo.is_finite() && hi.is_finite()) {
            return Err(DeviationError::InvalidModel(format!("bounds ({lo}, {hi})")));
        }
        Ok(AgentOutputModel {
            mean: 0.5 * (lo + hi),
            variance: (hi - lo).powi(2) / 12.0,
            family: DistributionFamily::UniformBounded,
            bounds: Some((lo, hi)),
        })
    }

    fn sampler(&self) -> Sampler {
        match (self.family, self.bounds) {
            (DistributionFamily::UniformBounded, Some((lo, hi))) => {
                Sampler::Uniform(Uniform::new_inclusive(lo, hi).expect("validated bounds"))
            }
            _ => Sampler::Gaussian { mean: self.mean, sd: self.variance.sqrt() },
        }
    }
}

enum Sampler {
    Gaussian { mean: f64, sd: f64 },
    Uniform(Uniform<f64>),
}

impl Sampler {
    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            Sampler::Gaussian { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
            Sampler::Uniform(u) => u.sample(rng),
        }
    }
}

/// D = Σ (u_i v_i)² Var(x_i).
pub fn deviation_variance(spec: &AggregationSpec, variances: &[f64]) -> Result<f64, DeviationError> {
    if variances.len() != spec.len() {
        return Err(DeviationError::LengthMismatch { expected: spec.len(), got: variances.len() });
    }
    if variances.iter().any(|v| !(*v >= 0.0)) {
        return Err(DeviationError::InvalidModel("negative variance".into()));
    }
    Ok(spec.weights().zip(variances).map(|(w, var)| w * w * var).sum())
}

/// min(1, 2·exp(−ε²/(2D))); 0 when D = 0.
pub fn deviation_bound(spec: &AggregationSpec, variances: &[f64], epsilon: f64) -> Result<f64, DeviationError> {
    if !(epsilon > 0.0) {
        return Err(DeviationError::InvalidEpsilon(epsilon));
    }
    let d = deviation_variance(spec, variances)?;
    if d == 0.0 {
        return Ok(0.0);
    }
    Ok((2.0 * (-epsilon * epsilon / (2.0 * d)).exp()).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub n: usize,
    pub epsilon: f64,
    pub analytic_bound: f64,
    pub empirical_tail: f64,
    pub exceedances: u64,
    pub trials: u64,
    pub seed: u64,
    pub generator: String,
}

impl DeviationReport {
    /// Three-sigma Monte-Carlo margin around the bound b: 3·√(b(1−b)/trials).
    pub fn noise_margin(&self) -> f64 {
        let b = self.analytic_bound;
        3.0 * (b * (1.0 - b) / self.trials as f64).sqrt()
    }

    pub fn respects_bound(&self) -> bool {
        self.empirical_tail <= self.analytic_bound + self.noise_margin()
    }
}

fn check_inputs(
    models: &[AgentOutputModel],
    spec: &AggregationSpec,
    epsilons: &[f64],
    trials: u64,
) -> Result<(), DeviationError> {
    if models.len() != spec.len() {
        return Err(DeviationError::LengthMismatch { expected: spec.len(), got: models.len() });
    }
    if trials == 0 {
        return Err(DeviationError::ZeroTrials);
    }
    if let Some(e) = epsilons.iter().find(|e| !(**e > 0.0)) {
        return Err(DeviationError::InvalidEpsilon(*e));
    }
    Ok(())
}

/// Exceedance counts per epsilon for one substream.
fn run_chunk(
    samplers: &[Sampler],
    means: &[f64],
    weights: &[f64],
    epsilons: &[f64],
    seed: u64,
    chunk: u64,
    trials: u64,
) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk);
    let mut counts = vec![0u64; epsilons.len()];
    for _ in 0..trials {
        let mut dev = 0.0;
        for ((s, m), w) in samplers.iter().zip(means).zip(weights) {
            dev += w * (s.draw(&mut rng) - m);
        }
        let dev = dev.abs();
        for (c, e) in counts.iter_mut().zip(epsilons) {
            if dev >= *e {
                *c += 1;
            }
        }
    }
    counts
}

fn chunk_sizes(trials: u64) -> Vec<(u64, u64)> {
    let chunks = trials.div_ceil(CHUNK_TRIALS);
    (0..chunks).map(|c| (c, CHUNK_TRIALS.min(trials - c * CHUNK_TRIALS))).collect()
}

fn simulate(
    models: &[AgentOutputModel],
    spec: &AggregationSpec,
    epsilons: &[f64],
    trials: u64,
    seed: u64,
    parallel: bool,
) -> Result<Vec<DeviationReport>, DeviationError> {
    check_inputs(models, spec, epsilons, trials)?;
    let samplers: Vec<Sampler> = models.iter().map(AgentOutputModel::sampler).collect();
    let means: Vec<f64> = models.iter().map(|m| m.mean).collect();
    let weights: Vec<f64> = spec.weights().collect();
    let variances: Vec<f64> = models.iter().map(|m| m.variance).collect();
    let chunks = chunk_sizes(trials);
    let run = |&(c, t): &(u64, u64)| run_chunk(&samplers, &means, &weights, epsilons, seed, c, t);
    let per_chunk: Vec<Vec<u64>> =
        if parallel { chunks.par_iter().map(run).collect() } else { chunks.iter().map(run).collect() };
    let mut totals = vec![0u64; epsilons.len()];
    for counts in per_chunk {
        for (t, c) in totals.iter_mut().zip(counts) {
            *t += c;
        }
    }
    epsilons
        .iter()
        .zip(totals)
        .map(|(&epsilon, exceedances)| {
            Ok(DeviationReport {
                n: models.len(),
                epsilon,
                analytic_bound: deviation_bound(spec, &variances, epsilon)?,
                empirical_tail: exceedances as f64 / trials as f64,
                exceedances,
                trials,
                seed,
                generator: GENERATOR_ID.to_string(),
            })
        })
        .collect()
}

/// Monte-Carlo estimate of P(|s − ŝ| ≥ ε) for each ε, sharing draws across
/// the epsilon list.
pub fn simulate_deviation_tails(
    models: &[AgentOutputModel],
    spec: &AggregationSpec,
    epsilons: &[f64],
    trials: u64,
    seed: u64,
) -> Result<Vec<DeviationReport>, DeviationError> {
    simulate(models, spec, epsilons, trials, seed, false)
}

/// Same result as [`simulate_deviation_tails`], with substreams spread over
/// the rayon pool.
pub fn simulate_deviation_tails_parallel(
    models: &[AgentOutputModel],
    spec: &AggregationSpec,
    epsilons: &[f64],
    trials: u64,
    seed: u64,
) -> Result<Vec<DeviationReport>, DeviationError> {
    simulate(models, spec, epsilons, trials, seed, true)
}

pub fn simulate_deviation_tail(
    models: &[AgentOutputModel],
    spec: &AggregationSpec,
    epsilon: f64,
    trials: u64,
    seed: u64,
) -> Result<DeviationReport, DeviationError> {
    Ok(simulate_deviation_tails(models, spec, &[epsilon], trials, seed)?.remove(0))
}

/// How an executor's text output becomes the scalar x_i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case")]
pub enum EncodingScheme {
    NumericParse,
    Length,
    EmbeddingProjection { axis: Vec<f64> },
}

pub fn encode_output(
    output: &str,
    scheme: &EncodingScheme,
    embedder: Option<&dyn Embedder>,
) -> Result<f64, DeviationError> {
    match scheme {
        EncodingScheme::NumericParse => leading_number(output)
            .ok_or_else(|| DeviationError::EncodeFailure(format!("no leading number in {output:?}"))),
        EncodingScheme::Length => Ok(output.split_whitespace().count() as f64),
        EncodingScheme::EmbeddingProjection { axis } => {
            let embedder = embedder
                .ok_or_else(|| DeviationError::EncodeFailure("embedding projection needs an embedder".into()))?;
            let vector = embedder.embed(&[output.to_string()])?.remove(0);
            if vector.dim() != axis.len() {
                return Err(DeviationError::LengthMismatch { expected: vector.dim(), got: axis.len() });
            }
            Ok(vector.components().iter().zip(axis).map(|(a, b)| a * b).sum())
        }
    }
}

/// Parses an optionally signed decimal (with optional exponent) at the start
/// of `text`, ignoring leading whitespace.
pub(crate) fn leading_number(text: &str) -> Option<f64> {
    let s = text.trim_start();
    let b = s.as_bytes();
    let mut i = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        i += 1;
    }
    let int_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    let mut digits = i - int_start;
    if i < b.len() && b[i] == b'.' {
        let frac_start = i + 1;
        let mut j = frac_start;
        while j < b.len() && b[j].is_ascii_digit() {
            j += 1;
        }
        if j > frac_start || digits > 0 {
            digits += j - frac_start;
            i = j;
        }
    }
    if digits == 0 {
        return None;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        let mut j = i + 1;
        if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
            j += 1;
        }
        let exp_start = j;
        while j < b.len() && b[j].is_ascii_digit() {
            j += 1;
        }
        if j > exp_start {
            i = j;
        }
    }
    s[..i].parse().ok()
}

/// Input of the `simulate-bound` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub models: Vec<AgentOutputModel>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub trials: u64,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn run(&self) -> Result<Vec<DeviationReport>, DeviationError> {
        let spec = AggregationSpec::new(self.u.clone(), self.v.clone())?;
        simulate_deviation_tails_parallel(&self.models, &spec, &self.epsilons, self.trials, self.seed)
    }
}

/// CSV with columns n, epsilon, analytic_bound, empirical_tail, trials, seed.
pub fn write_reports_csv<W: Write>(reports: &[DeviationReport], out: W) -> Result<(), DeviationError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "epsilon", "analytic_bound", "empirical_tail", "trials", "seed"])?;
    for r in reports {
        w.write_record([
            r.n.to_string(),
            r.epsilon.to_string(),
            r.analytic_bound.to_string(),
            r.empirical_tail.to_string(),
            r.trials.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One cell family of the fixed verification grid.
#[derive(Debug, Clone)]
pub struct GridCase {
    pub family: DistributionFamily,
    pub models: Vec<AgentOutputModel>,
    pub spec: AggregationSpec,
    pub epsilons: Vec<f64>,
}

/// Agent counts of the verification grid.
pub const GRID_AGENT_COUNTS: [usize; 4] = [1, 2, 5, 10];
/// Epsilons of the verification grid, as multiples of √D.
pub const GRID_EPSILON_MULTIPLES: [f64; 8] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0];

/// The fixed (n × ε × family) grid used to check the bound.
///
/// Agent i (0-based) has weights u_i = 1 + i/4, v_i = 1/(1 + i/2). Gaussian
/// agents have mean i and variance 1 + i/2; uniform agents are centred on i
/// with half-width 1 + i/4. With n = 1 the gaussian case is the standard
/// normal with u = v = 1, so its ε = 2 cell is the two-sided 2σ tail.
pub fn verification_grid() -> Vec<GridCase> {
    let mut cases = Vec::new();
    for family in [DistributionFamily::Gaussian, DistributionFamily::UniformBounded] {
        for n in GRID_AGENT_COUNTS {
            let models: Vec<AgentOutputModel> = (0..n)
                .map(|i| {
                    let i = i as f64;
                    match family {
                        DistributionFamily::Gaussian => AgentOutputModel::gaussian(i, 1.0 + 0.5 * i),
                        DistributionFamily::UniformBounded => {
                            let h = 1.0 + 0.25 * i;
                            AgentOutputModel::uniform(i - h, i + h)
                        }
                    }
                    .expect("grid models are valid")
                })
                .collect();
            let u = (0..n).map(|i| 1.0 + 0.25 * i as f64).collect();
            let v = (0..n).map(|i| 1.0 / (1.0 + 0.5 * i as f64)).collect();
            let spec = AggregationSpec::new(u, v).expect("grid spec is valid");
            let variances: Vec<f64> = models.iter().map(|m| m.variance).collect();
            let sd = deviation_variance(&spec, &variances).expect("lengths agree").sqrt();
            let epsilons = GRID_EPSILON_MULTIPLES.iter().map(|k| k * sd).collect();
            cases.push(GridCase { family, models, spec, epsilons });
        }
    }
    cases
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_examples() {
        let spec = AggregationSpec::ones(2).unwrap();
        assert_eq!(aggregate(&[0.5, 0.25], &spec).unwrap(), 0.75);
        let zero = AggregationSpec::new(vec![0.0; 3], vec![2.0; 3]).unwrap();
        assert_eq!(aggregate(&[1.0, -7.0, 3.5], &zero).unwrap(), 0.0);
        assert!(matches!(aggregate(&[1.0], &spec), Err(DeviationError::LengthMismatch { .. })));
        assert!(AggregationSpec::new(vec![1.0], vec![]).is_err());
        assert!(AggregationSpec::new(vec![], vec![]).is_err());
    }

    #[test]
    fn bound_examples() {
        let spec = AggregationSpec::ones(1).unwrap();
        let b = deviation_bound(&spec, &[1.0], 2.0).unwrap();
        assert!((b - 2.0 * (-2.0f64).exp()).abs() < 1e-12);
        assert!((b - 0.270671).abs() < 1e-6);
        assert_eq!(deviation_bound(&AggregationSpec::ones(3).unwrap(), &[0.0; 3], 0.1).unwrap(), 0.0);
        assert_eq!(deviation_bound(&spec, &[1.0], 0.1).unwrap(), 1.0);
        assert!(matches!(deviation_bound(&spec, &[1.0], 0.0), Err(DeviationError::InvalidEpsilon(_))));
        assert!(matches!(deviation_bound(&spec, &[1.0], -1.0), Err(DeviationError::InvalidEpsilon(_))));
    }

    #[test]
    fn zero_variance_never_deviates() {
        let models = vec![AgentOutputModel::gaussian(3.0, 0.0).unwrap(); 2];
        let spec = AggregationSpec::ones(2).unwrap();
        for eps in [1e-9, 0.1, 5.0] {
            let r = simulate_deviation_tail(&models, &spec, eps, 1000, 1).unwrap();
            assert_eq!(r.empirical_tail, 0.0);
            assert_eq!(r.analytic_bound, 0.0);
        }
    }

    #[test]
    fn model_validation() {
        assert!(AgentOutputModel::gaussian(0.0, -1.0).is_err());
        assert!(AgentOutputModel::uniform(1.0, 1.0).is_err());
        let u = AgentOutputModel::uniform(-1.0, 3.0).unwrap();
        assert_eq!(u.mean, 1.0);
        assert!((u.variance - 16.0 / 12.0).abs() < 1e-15);
        let bad = r#"{"family":"cauchy","mean":0,"variance":1}"#;
        assert!(serde_json::from_str::<AgentOutputModel>(bad).unwrap_err().to_string().contains("unsupported"));
        let ok = r#"{"family":"uniform-bounded","bounds":[0,2]}"#;
        assert_eq!(serde_json::from_str::<AgentOutputModel>(ok).unwrap(), AgentOutputModel::uniform(0.0, 2.0).unwrap());
        let wrong_var = r#"{"family":"uniform-bounded","bounds":[0,2],"variance":5}"#;
        assert!(serde_json::from_str::<AgentOutputModel>(wrong_var).is_err());
    }

    #[test]
    fn simulation_errors() {
        let spec = AggregationSpec::ones(2).unwrap();
        let one = vec![AgentOutputModel::gaussian(0.0, 1.0).unwrap()];
        assert!(matches!(simulate_deviation_tail(&one, &spec, 1.0, 10, 0), Err(DeviationError::LengthMismatch { .. })));
        let two = vec![one[0].clone(), one[0].clone()];
        assert!(matches!(simulate_deviation_tail(&two, &spec, 1.0, 0, 0), Err(DeviationError::ZeroTrials)));
        assert!(matches!(simulate_deviation_tail(&two, &spec, 0.0, 10, 0), Err(DeviationError::InvalidEpsilon(_))));
    }

    #[test]
    fn parallel_matches_sequential() {
        let case = &verification_grid()[6];
        let trials = 3 * CHUNK_TRIALS + 17;
        let a = simulate_deviation_tails(&case.models, &case.spec, &case.epsilons, trials, 99).unwrap();
        let b = simulate_deviation_tails_parallel(&case.models, &case.spec, &case.epsilons, trials, 99).unwrap();
        assert_eq!(a, b);
        let single = simulate_deviation_tail(&case.models, &case.spec, case.epsilons[3], trials, 99).unwrap();
        assert_eq!(single, a[3]);
        assert_eq!(a[0].generator, GENERATOR_ID);
    }

    #[test]
    fn leading_numbers() {
        assert_eq!(leading_number("42 apples"), Some(42.0));
        assert_eq!(leading_number("  -3.5e2x"), Some(-350.0));
        assert_eq!(leading_number(".5"), Some(0.5));
        assert_eq!(leading_number("7."), Some(7.0));
        assert_eq!(leading_number("1e"), Some(1.0));
        assert_eq!(leading_number("apples 42"), None);
        assert_eq!(leading_number("-"), None);
        assert_eq!(encode_output("42 apples", &EncodingScheme::NumericParse, None).unwrap(), 42.0);
        assert_eq!(encode_output("a b c", &EncodingScheme::Length, None).unwrap(), 3.0);
        assert!(matches!(
            encode_output("none", &EncodingScheme::NumericParse, None),
            Err(DeviationError::EncodeFailure(_))
        ));
    }

    #[test]
    fn csv_layout() {
        let spec = AggregationSpec::ones(1).unwrap();
        let models = vec![AgentOutputModel::gaussian(0.0, 1.0).unwrap()];
        let reports = simulate_deviation_tails(&models, &spec, &[1.0, 2.0], 100, 5).unwrap();
        let mut buf = Vec::new();
        write_reports_csv(&reports, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("n,epsilon,analytic_bound,empirical_tail,trials,seed"));
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn grid_shape() {
        let grid = verification_grid();
        assert_eq!(grid.len(), 8);
        assert!(grid.iter().all(|c| c.epsilons.len() == 8));
        let first = &grid[0];
        assert_eq!(first.models, vec![AgentOutputModel::gaussian(0.0, 1.0).unwrap()]);
        assert_eq!(first.epsilons[3], 2.0);
    }
}
