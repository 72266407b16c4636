//! Evaluation metrics that need no embedding model: n-gram diversity,
//! provider-scored coherence and repetition counts. All n-grams are over
//! token ids of the continuation.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::provider::{DistributionSource, ProviderError};
use crate::TokenId;

/// Orders aggregated by [`diversity`].
pub const DIVERSITY_ORDERS: [usize; 3] = [2, 3, 4];

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("diversity needs at least 5 tokens, got {0}")]
    TooShort(usize),
    #[error("sequence is empty")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NgramRatio {
    pub n: usize,
    pub unique: usize,
    pub total: usize,
}

impl NgramRatio {
    pub fn ratio(&self) -> f64 {
        self.unique as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub per_n: Vec<NgramRatio>,
    /// Product of the unique/total ratios for n = 2, 3, 4.
    pub div: f64,
}

fn distinct_ngrams(tokens: &[TokenId], n: usize) -> usize {
    tokens.windows(n).collect::<HashSet<_>>().len()
}

pub fn diversity(tokens: &[TokenId]) -> Result<DiversityReport, MetricError> {
    if tokens.len() < 5 {
        return Err(MetricError::TooShort(tokens.len()));
    }
    let per_n: Vec<NgramRatio> = DIVERSITY_ORDERS
        .iter()
        .map(|&n| NgramRatio {
            n,
            unique: distinct_ngrams(tokens, n),
            total: tokens.len() - n + 1,
        })
        .collect();
    let div = per_n.iter().map(NgramRatio::ratio).product();
    Ok(DiversityReport { per_n, div })
}

/// Mean log-likelihood per token of `continuation` given `prompt`, in nats,
/// under the scoring source.
pub fn coherence<S: DistributionSource + ?Sized>(
    source: &S,
    prompt: &[TokenId],
    continuation: &[TokenId],
) -> Result<f64, ProviderError> {
    source.score_continuation(prompt, continuation)
}

/// Highest occurrence count of any single n-gram, for n = 1..=4. Orders
/// longer than the sequence are omitted.
pub fn repetition_profile(tokens: &[TokenId]) -> Result<BTreeMap<usize, usize>, MetricError> {
    if tokens.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut profile = BTreeMap::new();
    for n in 1..=4.min(tokens.len()) {
        let mut counts: HashMap<&[TokenId], usize> = HashMap::new();
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_default() += 1;
        }
        profile.insert(n, counts.into_values().max().unwrap_or(0));
    }
    Ok(profile)
}
