//! Scalar uncertainty math: Shannon entropy of a next-token distribution,
//! the exponentially weighted global entropy, windowed medians and the
//! clamped `arctanh` deviation map.
//!
//! All entropies are in nats.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::TokenId;

/// Absolute tolerance on `Σ p = 1` accepted by [`Distribution`].
pub const SUM_TOLERANCE: f64 = 1e-6;

/// Distance from ±1 at which the `arctanh` argument is clamped.
pub const ARCTANH_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistributionError {
    #[error("distribution needs at least 2 outcomes, got {0}")]
    TooSmall(usize),
    #[error("probability at position {index} is invalid: {value}")]
    InvalidEntry { index: usize, value: f64 },
    #[error("probabilities sum to {0}, expected 1 within {SUM_TOLERANCE}")]
    BadSum(f64),
    #[error("token id list has {ids} entries but {probs} probabilities were given")]
    IdMismatch { ids: usize, probs: usize },
    #[error("all weights are zero")]
    ZeroMass,
}

/// A probability vector over next-token outcomes.
///
/// Positions are either dense (position `i` is token `i`) or carry an
/// explicit token id list. When `has_tail` is set, the last position is a
/// synthetic bucket holding the residual mass of a truncated provider
/// response; it counts as an outcome for entropy but is never selectable.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
    ids: Option<Vec<TokenId>>,
    has_tail: bool,
}

impl Distribution {
    /// Dense distribution where position `i` is token `i`.
    pub fn new(probs: Vec<f64>) -> Result<Self, DistributionError> {
        let dist = Self {
            probs,
            ids: None,
            has_tail: false,
        };
        dist.validate()?;
        Ok(dist)
    }

    /// Normalizes nonnegative weights into a dense distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self, DistributionError> {
        Self::new(normalize(weights)?)
    }

    /// Sparse distribution over explicit token ids, optionally followed by a
    /// tail bucket with `tail_mass`.
    pub fn with_ids(
        ids: Vec<TokenId>,
        mut probs: Vec<f64>,
        tail_mass: Option<f64>,
    ) -> Result<Self, DistributionError> {
        if ids.len() != probs.len() {
            return Err(DistributionError::IdMismatch {
                ids: ids.len(),
                probs: probs.len(),
            });
        }
        let has_tail = tail_mass.is_some();
        if let Some(mass) = tail_mass {
            probs.push(mass);
        }
        let dist = Self {
            probs,
            ids: Some(ids),
            has_tail,
        };
        dist.validate()?;
        Ok(dist)
    }

    fn validate(&self) -> Result<(), DistributionError> {
        if self.probs.len() < 2 {
            return Err(DistributionError::TooSmall(self.probs.len()));
        }
        let mut sum = 0.0;
        for (index, &value) in self.probs.iter().enumerate() {
            if !(value.is_finite() && value >= 0.0) {
                return Err(DistributionError::InvalidEntry { index, value });
            }
            sum += value;
        }
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(DistributionError::BadSum(sum));
        }
        Ok(())
    }

    /// Number of outcomes, including the tail bucket if present. This is the
    /// `|V|` used in the `ln |V|` normalizer.
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn has_tail(&self) -> bool {
        self.has_tail
    }

    /// `ln |V|` in nats.
    pub fn vocab_log(&self) -> f64 {
        (self.probs.len() as f64).ln()
    }

    /// Token at `pos`, or `None` for the tail bucket.
    pub fn token_at(&self, pos: usize) -> Option<TokenId> {
        if self.has_tail && pos + 1 == self.probs.len() {
            return None;
        }
        match &self.ids {
            Some(ids) => ids.get(pos).copied(),
            None => (pos < self.probs.len()).then_some(pos as TokenId),
        }
    }

    /// Probability of `token`, zero if it is not part of the support.
    pub fn prob_of(&self, token: TokenId) -> f64 {
        match &self.ids {
            None => {
                let pos = token as usize;
                if self.has_tail && pos + 1 == self.probs.len() {
                    0.0
                } else {
                    self.probs.get(pos).copied().unwrap_or(0.0)
                }
            }
            Some(ids) => ids
                .iter()
                .position(|&id| id == token)
                .map_or(0.0, |pos| self.probs[pos]),
        }
    }

    /// Selectable `(token, probability)` pairs in position order.
    pub fn selectable(&self) -> impl Iterator<Item = (TokenId, f64)> + '_ {
        let n = self.probs.len() - usize::from(self.has_tail);
        (0..n).map(move |pos| {
            let id = match &self.ids {
                Some(ids) => ids[pos],
                None => pos as TokenId,
            };
            (id, self.probs[pos])
        })
    }

    /// The `k` most probable selectable tokens, ordered by descending
    /// probability with ties broken by lowest token id. Returns the whole
    /// selectable support when it has fewer than `k` tokens.
    pub fn top_k(&self, k: usize) -> Vec<(TokenId, f64)> {
        let mut all: Vec<(TokenId, f64)> = self.selectable().collect();
        let k = k.min(all.len());
        if k == 0 {
            return Vec::new();
        }
        if k < all.len() {
            all.select_nth_unstable_by(k - 1, rank_order);
            all.truncate(k);
        }
        all.sort_unstable_by(rank_order);
        all
    }

    /// Selectable tokens sorted by descending probability, ties by id.
    pub fn ranked(&self) -> Vec<(TokenId, f64)> {
        let mut all: Vec<(TokenId, f64)> = self.selectable().collect();
        all.sort_unstable_by(rank_order);
        all
    }
}

/// Descending probability, then ascending token id.
pub(crate) fn rank_order(a: &(TokenId, f64), b: &(TokenId, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Normalizes nonnegative finite weights to sum to one.
pub fn normalize(weights: &[f64]) -> Result<Vec<f64>, DistributionError> {
    let mut sum = 0.0;
    for (index, &value) in weights.iter().enumerate() {
        if !(value.is_finite() && value >= 0.0) {
            return Err(DistributionError::InvalidEntry { index, value });
        }
        sum += value;
    }
    if sum <= 0.0 {
        return Err(DistributionError::ZeroMass);
    }
    Ok(weights.iter().map(|w| w / sum).collect())
}

/// Shannon entropy `−Σ p ln p` of `probs` in nats, with `0·ln 0 = 0`.
pub fn entropy_of(probs: &[f64]) -> f64 {
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    // rounding can leave a one-hot row at -0.0 or a hair below zero
    h.max(0.0)
}

/// Local entropy `H(X)_t` of a validated distribution.
pub fn local_entropy(dist: &Distribution) -> f64 {
    entropy_of(dist.probs())
}

/// Incremental exponentially weighted mean
/// `Σ λ^{t−i} h_i / Σ λ^{t−i}`, updated in O(1) per observation.
///
/// Kept in mean form, `m ← m + (h − m) / D_t` with `D_t = λ D_{t−1} + 1`,
/// which is algebraically the ratio above and stays exact on constant input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ewma {
    lambda: f64,
    mean: f64,
    den: f64,
}

impl Ewma {
    pub fn new(lambda: f64) -> Self {
        assert!(
            lambda > 0.0 && lambda <= 1.0,
            "decay must lie in (0, 1], got {lambda}"
        );
        Self {
            lambda,
            mean: 0.0,
            den: 0.0,
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Adds an observation and returns the updated mean.
    pub fn push(&mut self, value: f64) -> f64 {
        self.den = self.lambda * self.den + 1.0;
        self.mean += (value - self.mean) / self.den;
        self.mean
    }

    /// Current mean, `None` before the first observation.
    pub fn value(&self) -> Option<f64> {
        (self.den > 0.0).then_some(self.mean)
    }

    /// `Σ λ^{t−i} h_i`.
    pub fn weighted_num(&self) -> f64 {
        self.mean * self.den
    }

    /// `Σ λ^{t−i}`.
    pub fn weighted_den(&self) -> f64 {
        self.den
    }
}

/// Rolling history of local entropies plus the global-entropy EWMA.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyTrace {
    history: Vec<f64>,
    ewma: Ewma,
    vocab_log: f64,
}

impl EntropyTrace {
    pub fn new(lambda: f64) -> Self {
        Self {
            history: Vec::new(),
            ewma: Ewma::new(lambda),
            vocab_log: f64::NAN,
        }
    }

    /// Appends `h_local` and returns `H_glob,t` at the new step.
    pub fn push_and_global(&mut self, h_local: f64) -> f64 {
        self.history.push(h_local);
        self.ewma.push(h_local)
    }

    /// Records `ln |V|` of the distribution most recently observed.
    pub fn set_vocab_log(&mut self, vocab_log: f64) {
        self.vocab_log = vocab_log;
    }

    pub fn vocab_log(&self) -> f64 {
        self.vocab_log
    }

    pub fn global_entropy(&self) -> Option<f64> {
        self.ewma.value()
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn lambda(&self) -> f64 {
        self.ewma.lambda()
    }

    pub fn ewma(&self) -> &Ewma {
        &self.ewma
    }
}

/// Median of `values`; an even count yields the midpoint of the central
/// pair. `None` for an empty slice.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut buf = values.to_vec();
    median_in_place(&mut buf)
}

/// Median that reorders `buf` instead of allocating.
pub fn median_in_place(buf: &mut [f64]) -> Option<f64> {
    let n = buf.len();
    if n == 0 {
        return None;
    }
    buf.sort_unstable_by(f64::total_cmp);
    Some(if n % 2 == 1 {
        buf[n / 2]
    } else {
        0.5 * (buf[n / 2 - 1] + buf[n / 2])
    })
}

/// Median of the last `min(w, len)` values of `history`.
///
/// Callers wanting `med(H_{t−w:t−1})` pass the history without the
/// current step.
pub fn window_median(history: &[f64], w: usize) -> Option<f64> {
    assert!(w >= 1, "window must be at least 1");
    let start = history.len().saturating_sub(w);
    median(&history[start..])
}

/// `arctanh(numerator / scale)` with the ratio clamped to
/// `[−1 + 1e−6, 1 − 1e−6]`, so the result is always finite.
pub fn bounded_arctanh(numerator: f64, scale: f64) -> f64 {
    debug_assert!(scale > 0.0, "scale must be positive");
    let bound = 1.0 - ARCTANH_MARGIN;
    let x = numerator / scale;
    // evaluated on |x| so the result is exactly odd
    x.abs().min(bound).atanh().copysign(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn entropy_examples() {
        let uniform = Distribution::new(vec![0.25; 4]).unwrap();
        assert_abs_diff_eq!(local_entropy(&uniform), 4f64.ln(), epsilon = 1e-12);
        let one_hot = Distribution::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(local_entropy(&one_hot), 0.0);
        let half = Distribution::new(vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(local_entropy(&half), 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn invalid_distributions_are_rejected() {
        assert!(matches!(
            Distribution::new(vec![1.2, -0.2]),
            Err(DistributionError::InvalidEntry { index: 1, .. })
        ));
        assert!(matches!(
            Distribution::new(vec![0.5, 0.4]),
            Err(DistributionError::BadSum(_))
        ));
        assert!(matches!(
            Distribution::new(vec![1.0]),
            Err(DistributionError::TooSmall(1))
        ));
        assert!(Distribution::new(vec![0.5, 0.5 + 5e-7]).is_ok());
    }

    #[test]
    fn tail_bucket_is_not_selectable() {
        let d = Distribution::with_ids(vec![7, 3], vec![0.5, 0.3], Some(0.2)).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.token_at(2), None);
        assert_eq!(d.top_k(10), vec![(7, 0.5), (3, 0.3)]);
        assert_eq!(d.prob_of(3), 0.3);
        assert_eq!(d.prob_of(99), 0.0);
    }

    #[test]
    fn top_k_breaks_ties_by_lowest_id() {
        let d = Distribution::new(vec![0.2, 0.3, 0.2, 0.3]).unwrap();
        assert_eq!(d.top_k(3), vec![(1, 0.3), (3, 0.3), (0, 0.2)]);
    }

    #[test]
    fn global_entropy_examples() {
        let mut trace = EntropyTrace::new(0.5);
        trace.push_and_global(1.0);
        // (0.5·1 + 1·2) / 1.5
        assert_abs_diff_eq!(trace.push_and_global(2.0), 1.666667, epsilon = 1e-6);

        let mut flat = EntropyTrace::new(1.0);
        for h in [1.0, 2.0, 3.0] {
            flat.push_and_global(h);
        }
        assert_abs_diff_eq!(flat.global_entropy().unwrap(), 2.0, epsilon = 1e-12);

        let mut constant = EntropyTrace::new(0.91);
        for _ in 0..3 {
            assert_abs_diff_eq!(constant.push_and_global(0.7), 0.7, epsilon = 1e-12);
        }
    }

    #[test]
    fn median_examples() {
        assert_eq!(window_median(&[3.0, 1.0, 2.0], 3), Some(2.0));
        assert_eq!(window_median(&[1.0, 2.0, 3.0, 4.0], 4), Some(2.5));
        assert_eq!(window_median(&[5.0, 5.0, 9.0], 2), Some(7.0));
        assert_eq!(window_median(&[], 3), None);
    }

    #[test]
    fn bounded_arctanh_examples() {
        assert_eq!(bounded_arctanh(0.0, 3.0), 0.0);
        assert_abs_diff_eq!(bounded_arctanh(1.5, 3.0), 0.549306, epsilon = 1e-6);
        let saturated = bounded_arctanh(6.0, 3.0);
        assert!(saturated.is_finite());
        assert_abs_diff_eq!(saturated, 7.2543, epsilon = 1e-4);
    }

    fn direct_global(history: &[f64], lambda: f64) -> f64 {
        let t = history.len();
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, h) in history.iter().enumerate() {
            let w = lambda.powi((t - 1 - i) as i32);
            num += w * h;
            den += w;
        }
        num / den
    }

    #[test]
    fn incremental_matches_direct_summation_on_long_histories() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for &lambda in &[0.5, 0.91, 0.95, 0.99, 1.0] {
            let history: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..5.0)).collect();
            let mut trace = EntropyTrace::new(lambda);
            for (t, &h) in history.iter().enumerate() {
                let g = trace.push_and_global(h);
                if t % 997 == 0 || t + 1 == history.len() {
                    let direct = direct_global(&history[..=t], lambda);
                    assert!(
                        (g - direct).abs() < 1e-9,
                        "λ={lambda} t={t}: {g} vs {direct}"
                    );
                }
            }
        }
    }

    proptest! {
        #[test]
        fn entropy_is_bounded(weights in prop::collection::vec(0.0f64..10.0, 2..64)) {
            prop_assume!(weights.iter().sum::<f64>() > 1e-9);
            let d = Distribution::from_weights(&weights).unwrap();
            let h = local_entropy(&d);
            prop_assert!(h >= 0.0);
            prop_assert!(h <= d.vocab_log() + 1e-12);
        }

        #[test]
        fn global_entropy_is_a_convex_combination(
            history in prop::collection::vec(0.0f64..6.0, 1..200),
            lambda in 0.01f64..=1.0,
        ) {
            let mut trace = EntropyTrace::new(lambda);
            for &h in &history {
                trace.push_and_global(h);
            }
            let g = trace.global_entropy().unwrap();
            let lo = history.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(g >= lo - 1e-12 && g <= hi + 1e-12);
            prop_assert!(trace.ewma().weighted_den() > 0.0);
        }

        #[test]
        fn equal_weights_give_arithmetic_mean(history in prop::collection::vec(0.0f64..6.0, 1..300)) {
            let mut trace = EntropyTrace::new(1.0);
            for &h in &history {
                trace.push_and_global(h);
            }
            let mean = history.iter().sum::<f64>() / history.len() as f64;
            prop_assert!((trace.global_entropy().unwrap() - mean).abs() < 1e-9);
        }

        #[test]
        fn bounded_arctanh_is_odd_monotone_and_finite(a in -1e6f64..1e6, b in -1e6f64..1e6, s in 1e-3f64..20.0) {
            let fa = bounded_arctanh(a, s);
            prop_assert!(fa.is_finite());
            prop_assert_eq!(bounded_arctanh(-a, s), -fa);
            if a <= b {
                prop_assert!(fa <= bounded_arctanh(b, s));
            }
        }
    }
}
