//! MC-dropout predictive distributions, epistemic entropy, and the
//! uncertainty-based data-relation score used for helper selection.
//!
//! A helper's relation to a client combines two terms: the residue of the
//! normalized predictive entropy over the client's unlabeled data (EN) and
//! the helper's accuracy on the client's labeled data (TA), weighted by the
//! client's labeled ratio. Entropies are in nats throughout; the maximum
//! C-class entropy is `ln C`.

use crate::data::{ClientDataset, LabeledExample};
use crate::error::{Error, Result};
use crate::nn::{forward, ForwardMode, ModelParams};
use crate::rng::derive_seed;
use serde::{Deserialize, Serialize};

/// A probability vector with its Shannon entropy (nats).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    probs: Vec<f64>,
    entropy: f64,
}

/// `-sum p ln p` with the `0 ln 0 = 0` convention.
pub fn shannon_entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum()
}

impl PredictiveDistribution {
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Domain("empty probability vector".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Numeric("invalid probability entry".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        let entropy = shannon_entropy(&probs);
        Ok(PredictiveDistribution { probs, entropy })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn entropy(&self) -> f64 {
        self.entropy
    }

    pub fn class_count(&self) -> usize {
        self.probs.len()
    }

    /// Most likely class; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Which components of the relation score drive selection and aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationMode {
    /// Entropy residue only (EN).
    EntropyOnly,
    /// Labeled-set accuracy only (TA).
    AccuracyOnly,
    /// Convex combination of both (EN + TA), the full method.
    Combined,
}

impl AblationMode {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "en" => Ok(AblationMode::EntropyOnly),
            "ta" => Ok(AblationMode::AccuracyOnly),
            "en+ta" => Ok(AblationMode::Combined),
            other => Err(Error::Config(format!(
                "unknown ablation mode '{other}', expected en, ta, or en+ta"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationMode::EntropyOnly => "en",
            AblationMode::AccuracyOnly => "ta",
            AblationMode::Combined => "en+ta",
        }
    }
}

/// Data-relation score of a helper for a client, with both components kept
/// for ablation studies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrScore {
    pub value: f64,
    pub entropy_term: f64,
    pub accuracy_term: f64,
    pub evaluated_round: u64,
}

impl CorrScore {
    /// `(1 - mu) * entropy_term + mu * accuracy_term`.
    pub fn combine(labeled_ratio: f64, entropy_term: f64, accuracy_term: f64) -> Self {
        CorrScore {
            value: (1.0 - labeled_ratio) * entropy_term + labeled_ratio * accuracy_term,
            entropy_term,
            accuracy_term,
            evaluated_round: 0,
        }
    }

    /// Score used for ranking and weighting under the given ablation mode.
    pub fn for_mode(&self, mode: AblationMode) -> f64 {
        match mode {
            AblationMode::EntropyOnly => self.entropy_term,
            AblationMode::AccuracyOnly => self.accuracy_term,
            AblationMode::Combined => self.value,
        }
    }
}

/// MC-dropout prediction: the mean of `samples` dropout forward passes, with
/// per-pass seeds derived from `seed` and the pass index.
pub fn mc_predict(
    params: &ModelParams,
    x: &[f64],
    samples: usize,
    seed: u64,
) -> Result<PredictiveDistribution> {
    if samples == 0 {
        return Err(Error::Domain("MC sample count must be >= 1".into()));
    }
    let class_count = params.spec().class_count();
    let mut mean = vec![0.0; class_count];
    for t in 0..samples {
        let pass = forward(
            params,
            x,
            ForwardMode::DropoutSample(derive_seed(seed, &[t as u64])),
        )?;
        for (m, &p) in mean.iter_mut().zip(pass.probs()) {
            *m += p;
        }
    }
    for m in &mut mean {
        *m /= samples as f64;
    }
    PredictiveDistribution::from_probs(mean)
}

/// Summed predictive entropy of a helper model over an unlabeled set.
/// Per-point seeds derive from `seed` and the point index. An empty set sums
/// to zero.
pub fn dataset_uncertainty(
    helper: &ModelParams,
    unlabeled: &[Vec<f64>],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, x) in unlabeled.iter().enumerate() {
        total += mc_predict(helper, x, samples, derive_seed(seed, &[i as u64]))?.entropy();
    }
    Ok(total)
}

/// Residue of the normalized mean entropy:
/// `1 - (total_entropy / set_size) / ln C`, clamped to `[0, 1]`.
pub fn normalized_residue(total_entropy: f64, set_size: usize, class_count: usize) -> f64 {
    assert!(set_size >= 1, "normalized_residue needs a nonempty set");
    assert!(class_count >= 2);
    let mean = total_entropy / set_size as f64;
    let residue = 1.0 - mean / (class_count as f64).ln();
    residue.clamp(0.0, 1.0)
}

/// Fraction of labeled examples the helper classifies correctly under the
/// deterministic forward pass. Empty sets score 0 by convention (their
/// weight in the combined score is 0).
pub fn helper_accuracy(helper: &ModelParams, labeled: &[LabeledExample]) -> Result<f64> {
    if labeled.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for example in labeled {
        let pred = forward(helper, &example.features, ForwardMode::Deterministic)?;
        if pred.argmax() == example.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labeled.len() as f64)
}

/// Relation score of helper `w_j` for the owning client, from precomputed
/// per-point MC predictions over the client's unlabeled set.
///
/// An empty unlabeled set takes entropy term 0 by convention; its weight
/// `1 - mu_k` is then 0 and the convention never reaches the combined value.
pub fn corr_from_predictions(
    client: &ClientDataset,
    helper: &ModelParams,
    per_point: &[PredictiveDistribution],
) -> Result<CorrScore> {
    if per_point.len() != client.unlabeled_features().len() {
        return Err(Error::Consistency(format!(
            "{} predictions vs {} unlabeled points",
            per_point.len(),
            client.unlabeled_features().len()
        )));
    }
    let entropy_term = if per_point.is_empty() {
        0.0
    } else {
        let total: f64 = per_point.iter().map(|p| p.entropy()).sum();
        normalized_residue(total, per_point.len(), client.class_count())
    };
    let accuracy_term = helper_accuracy(helper, client.labeled())?;
    Ok(CorrScore::combine(
        client.labeled_ratio(),
        entropy_term,
        accuracy_term,
    ))
}

/// Relation score of helper `w_j` for the owning client, computing the MC
/// predictions from scratch.
pub fn corr(
    client: &ClientDataset,
    helper: &ModelParams,
    samples: usize,
    seed: u64,
) -> Result<CorrScore> {
    let per_point: Result<Vec<PredictiveDistribution>> = client
        .unlabeled_features()
        .iter()
        .enumerate()
        .map(|(i, x)| mc_predict(helper, x, samples, derive_seed(seed, &[i as u64])))
        .collect();
    corr_from_predictions(client, helper, &per_point?)
}
