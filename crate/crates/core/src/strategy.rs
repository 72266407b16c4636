//! The shared decoding-strategy interface, GUARD's adapter to it, and the
//! reference baselines: greedy, temperature, top-k, top-p, typical and
//! contrastive search.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::{local_entropy, rank_order, Distribution};
use crate::guard::{guard_select, GuardConfig, GuardError, GuardState, StepDiagnostics};
use crate::provider::Representations;
use crate::TokenId;

/// Slack on cumulative-mass cutoffs, so `0.5 + 0.3` reaches `p = 0.8`.
const MASS_SLACK: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum StrategyError {
    #[error("strategy {strategy} unavailable: {reason}")]
    Unavailable {
        strategy: &'static str,
        reason: String,
    },
    #[error("invalid strategy parameter: {0}")]
    InvalidParameter(String),
    #[error("distribution has no selectable token with positive probability")]
    EmptySupport,
    #[error("representation for token {0} is zero or missing")]
    BadRepresentation(TokenId),
    #[error(transparent)]
    Guard(#[from] GuardError),
}

/// Outcome of one selection step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub token: TokenId,
    /// Present for GUARD only.
    pub diagnostics: Option<StepDiagnostics>,
}

impl Selection {
    fn plain(token: TokenId) -> Self {
        Self {
            token,
            diagnostics: None,
        }
    }
}

pub trait Strategy: Send {
    fn name(&self) -> &'static str;

    /// Resets per-stream state for a new generation starting from `prompt`.
    fn begin(
        &mut self,
        _prompt: &[TokenId],
        _reps: Option<&dyn Representations>,
    ) -> Result<(), StrategyError> {
        Ok(())
    }

    fn select(
        &mut self,
        dist: &Distribution,
        reps: Option<&dyn Representations>,
    ) -> Result<Selection, StrategyError>;
}

/// Strategy selection plus exactly the parameters relevant to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategyConfig {
    Greedy,
    Temperature { tau: f64, seed: u64 },
    TopK { k: usize, seed: u64 },
    TopP { p: f64, seed: u64 },
    Typical { typical_tau: f64, seed: u64 },
    ContrastiveSearch { cs_k: usize, cs_alpha: f64 },
    Guard(GuardConfig),
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self::Guard(GuardConfig::default())
    }
}

impl StrategyConfig {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Greedy => "greedy",
            Self::Temperature { .. } => "temperature",
            Self::TopK { .. } => "top_k",
            Self::TopP { .. } => "top_p",
            Self::Typical { .. } => "typical",
            Self::ContrastiveSearch { .. } => "contrastive_search",
            Self::Guard(_) => "guard",
        }
    }

    pub fn needs_representations(&self) -> bool {
        matches!(self, Self::ContrastiveSearch { .. })
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        let bad = |m: String| Err(StrategyError::InvalidParameter(m));
        match *self {
            Self::Temperature { tau, .. } if !(tau > 0.0 && tau.is_finite()) => {
                bad(format!("tau must be positive, got {tau}"))
            }
            Self::TopK { k: 0, .. } => bad("k must be ≥ 1".into()),
            Self::TopP { p, .. } if !(p > 0.0 && p <= 1.0) => {
                bad(format!("p must be in (0, 1], got {p}"))
            }
            Self::Typical { typical_tau, .. } if !(typical_tau > 0.0 && typical_tau <= 1.0) => {
                bad(format!("typical_tau must be in (0, 1], got {typical_tau}"))
            }
            Self::ContrastiveSearch { cs_k, cs_alpha } => {
                if cs_k == 0 {
                    bad("cs_k must be ≥ 1".into())
                } else if !(0.0..=1.0).contains(&cs_alpha) {
                    bad(format!("cs_alpha must be in [0, 1], got {cs_alpha}"))
                } else {
                    Ok(())
                }
            }
            Self::Guard(ref cfg) => Ok(cfg.validate()?),
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Strategy>, StrategyError> {
        self.validate()?;
        Ok(match *self {
            Self::Greedy => Box::new(Greedy),
            Self::Temperature { tau, seed } => Box::new(Temperature::new(tau, seed)),
            Self::TopK { k, seed } => Box::new(TopK::new(k, seed)),
            Self::TopP { p, seed } => Box::new(TopP::new(p, seed)),
            Self::Typical { typical_tau, seed } => Box::new(Typical::new(typical_tau, seed)),
            Self::ContrastiveSearch { cs_k, cs_alpha } => {
                Box::new(ContrastiveSearch::new(cs_k, cs_alpha))
            }
            Self::Guard(ref cfg) => Box::new(Guard::new(cfg.clone())),
        })
    }
}

/// Argmax probability, ties to the lowest token id.
pub fn greedy_select(dist: &Distribution) -> Result<TokenId, StrategyError> {
    dist.selectable()
        .min_by(rank_order)
        .map(|(t, _)| t)
        .ok_or(StrategyError::EmptySupport)
}

/// Samples from `support` proportionally to its weights.
fn sample(support: &[(TokenId, f64)], rng: &mut ChaCha8Rng) -> Result<TokenId, StrategyError> {
    let index =
        WeightedIndex::new(support.iter().map(|s| s.1)).map_err(|_| StrategyError::EmptySupport)?;
    Ok(support[index.sample(rng)].0)
}

fn positive_ranked(dist: &Distribution) -> Vec<(TokenId, f64)> {
    let mut ranked = dist.ranked();
    ranked.retain(|&(_, p)| p > 0.0);
    ranked
}

/// Support of temperature sampling: weights `p^(1/τ)` relative to the
/// most likely token, computed in log space so small `τ` does not underflow.
pub fn temperature_support(dist: &Distribution, tau: f64) -> Vec<(TokenId, f64)> {
    let ranked = positive_ranked(dist);
    let Some(&(_, p_max)) = ranked.first() else {
        return ranked;
    };
    let log_max = p_max.ln();
    ranked
        .into_iter()
        .map(|(t, p)| (t, ((p.ln() - log_max) / tau).exp()))
        .filter(|&(_, w)| w > 0.0)
        .collect()
}

pub fn temperature_sample(
    dist: &Distribution,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TokenId, StrategyError> {
    sample(&temperature_support(dist, tau), rng)
}

/// The `k` most probable tokens with positive probability.
pub fn top_k_support(dist: &Distribution, k: usize) -> Vec<(TokenId, f64)> {
    let mut top = dist.top_k(k);
    top.retain(|&(_, p)| p > 0.0);
    top
}

pub fn top_k_sample(
    dist: &Distribution,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TokenId, StrategyError> {
    sample(&top_k_support(dist, k), rng)
}

/// Smallest prefix of the descending-probability ranking whose mass
/// reaches `p`.
pub fn top_p_support(dist: &Distribution, p: f64) -> Vec<(TokenId, f64)> {
    prefix_with_mass(positive_ranked(dist), p)
}

fn prefix_with_mass(ranked: Vec<(TokenId, f64)>, target: f64) -> Vec<(TokenId, f64)> {
    let mut cumulative = 0.0;
    let mut keep = ranked.len();
    for (i, &(_, p)) in ranked.iter().enumerate() {
        cumulative += p;
        if cumulative >= target - MASS_SLACK {
            keep = i + 1;
            break;
        }
    }
    let mut ranked = ranked;
    ranked.truncate(keep);
    ranked
}

pub fn top_p_sample(
    dist: &Distribution,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TokenId, StrategyError> {
    sample(&top_p_support(dist, p), rng)
}

/// Tokens ranked by `|−ln p − H|` ascending (ties by id), truncated to the
/// smallest prefix with mass ≥ `typical_tau`.
pub fn typical_support(dist: &Distribution, typical_tau: f64) -> Vec<(TokenId, f64)> {
    let h = local_entropy(dist);
    let mut ranked = positive_ranked(dist);
    ranked.sort_by(|a, b| {
        let da = (-a.1.ln() - h).abs();
        let db = (-b.1.ln() - h).abs();
        da.total_cmp(&db).then(a.0.cmp(&b.0))
    });
    prefix_with_mass(ranked, typical_tau)
}

pub fn typical_sample(
    dist: &Distribution,
    typical_tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TokenId, StrategyError> {
    sample(&typical_support(dist, typical_tau), rng)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Greedy;

impl Strategy for Greedy {
    fn name(&self) -> &'static str {
        "greedy"
    }

    fn select(
        &mut self,
        dist: &Distribution,
        _: Option<&dyn Representations>,
    ) -> Result<Selection, StrategyError> {
        greedy_select(dist).map(Selection::plain)
    }
}

macro_rules! sampling_strategy {
    ($name:ident, $label:literal, $param:ident, $func:ident) => {
        #[derive(Debug, Clone)]
        pub struct $name {
            $param: f64,
            seed: u64,
            rng: ChaCha8Rng,
        }

        impl $name {
            pub fn new($param: f64, seed: u64) -> Self {
                Self {
                    $param,
                    seed,
                    rng: ChaCha8Rng::seed_from_u64(seed),
                }
            }
        }

        impl Strategy for $name {
            fn name(&self) -> &'static str {
                $label
            }

            fn begin(
                &mut self,
                _: &[TokenId],
                _: Option<&dyn Representations>,
            ) -> Result<(), StrategyError> {
                self.rng = ChaCha8Rng::seed_from_u64(self.seed);
                Ok(())
            }

            fn select(
                &mut self,
                dist: &Distribution,
                _: Option<&dyn Representations>,
            ) -> Result<Selection, StrategyError> {
                $func(dist, self.$param, &mut self.rng).map(Selection::plain)
            }
        }
    };
}

sampling_strategy!(Temperature, "temperature", tau, temperature_sample);
sampling_strategy!(TopP, "top_p", p, top_p_sample);
sampling_strategy!(Typical, "typical", typical_tau, typical_sample);

#[derive(Debug, Clone)]
pub struct TopK {
    k: usize,
    seed: u64,
    rng: ChaCha8Rng,
}

impl TopK {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Strategy for TopK {
    fn name(&self) -> &'static str {
        "top_k"
    }

    fn begin(
        &mut self,
        _: &[TokenId],
        _: Option<&dyn Representations>,
    ) -> Result<(), StrategyError> {
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok(())
    }

    fn select(
        &mut self,
        dist: &Distribution,
        _: Option<&dyn Representations>,
    ) -> Result<Selection, StrategyError> {
        top_k_sample(dist, self.k, &mut self.rng).map(Selection::plain)
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// One scored contrastive-search candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsCandidate {
    pub token: TokenId,
    pub prob: f64,
    pub max_similarity: f64,
    pub score: f64,
}

/// Contrastive search: `argmax (1−α)·p(v) − α·max_j cos(h_v, h_j)` over the
/// top-`k` candidates, where `h_j` are the representations of the context.
#[derive(Debug, Clone)]
pub struct ContrastiveSearch {
    k: usize,
    alpha: f64,
    context: Vec<(Vec<f32>, f32)>,
}

impl ContrastiveSearch {
    pub fn new(k: usize, alpha: f64) -> Self {
        Self {
            k,
            alpha,
            context: Vec::new(),
        }
    }

    pub fn context_len(&self) -> usize {
        self.context.len()
    }

    fn push_context(&mut self, v: &[f32], token: TokenId) -> Result<(), StrategyError> {
        let norm = dot(v, v).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(StrategyError::BadRepresentation(token));
        }
        self.context.push((v.to_vec(), norm));
        Ok(())
    }

    /// Scores the candidates without updating the context.
    pub fn score_candidates(
        &self,
        dist: &Distribution,
        reps: &dyn Representations,
    ) -> Result<Vec<CsCandidate>, StrategyError> {
        dist.top_k(self.k)
            .into_iter()
            .map(|(token, prob)| {
                let v = reps
                    .representation(token)
                    .ok_or(StrategyError::BadRepresentation(token))?;
                let norm = dot(v, v).sqrt();
                if !(norm > 0.0 && norm.is_finite()) {
                    return Err(StrategyError::BadRepresentation(token));
                }
                let max_similarity = self
                    .context
                    .iter()
                    .map(|(c, cn)| f64::from(dot(v, c) / (norm * cn)))
                    .fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s))))
                    .unwrap_or(0.0);
                Ok(CsCandidate {
                    token,
                    prob,
                    max_similarity,
                    score: (1.0 - self.alpha) * prob - self.alpha * max_similarity,
                })
            })
            .collect()
    }
}

impl Strategy for ContrastiveSearch {
    fn name(&self) -> &'static str {
        "contrastive_search"
    }

    fn begin(
        &mut self,
        prompt: &[TokenId],
        reps: Option<&dyn Representations>,
    ) -> Result<(), StrategyError> {
        self.context.clear();
        if let Some(reps) = reps {
            for &t in prompt {
                if let Some(v) = reps.representation(t) {
                    self.push_context(v, t)?;
                }
            }
        }
        Ok(())
    }

    fn select(
        &mut self,
        dist: &Distribution,
        reps: Option<&dyn Representations>,
    ) -> Result<Selection, StrategyError> {
        let reps = reps.ok_or_else(|| StrategyError::Unavailable {
            strategy: "contrastive_search",
            reason: "provider exposes no candidate representations".into(),
        })?;
        let best = self
            .score_candidates(dist, reps)?
            .into_iter()
            .reduce(|best, c| {
                if c.score > best.score || (c.score == best.score && c.token < best.token) {
                    c
                } else {
                    best
                }
            })
            .ok_or(StrategyError::EmptySupport)?;
        let v = reps
            .representation(best.token)
            .ok_or(StrategyError::BadRepresentation(best.token))?;
        self.push_context(v, best.token)?;
        Ok(Selection::plain(best.token))
    }
}

/// GUARD behind the shared interface.
#[derive(Debug, Clone)]
pub struct Guard {
    cfg: GuardConfig,
    state: GuardState,
}

impl Guard {
    pub fn new(cfg: GuardConfig) -> Self {
        let state = GuardState::new(&cfg);
        Self { cfg, state }
    }

    pub fn state(&self) -> &GuardState {
        &self.state
    }

    pub fn config(&self) -> &GuardConfig {
        &self.cfg
    }
}

impl Strategy for Guard {
    fn name(&self) -> &'static str {
        "guard"
    }

    fn begin(
        &mut self,
        _: &[TokenId],
        _: Option<&dyn Representations>,
    ) -> Result<(), StrategyError> {
        // prompt tokens contribute neither entropy nor counts
        self.state = GuardState::new(&self.cfg);
        Ok(())
    }

    fn select(
        &mut self,
        dist: &Distribution,
        _: Option<&dyn Representations>,
    ) -> Result<Selection, StrategyError> {
        let (token, diag) = guard_select(dist, &mut self.state, &self.cfg)?;
        Ok(Selection {
            token,
            diagnostics: Some(diag),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::RepresentationTable;
    use approx::assert_abs_diff_eq;

    fn d(p: &[f64]) -> Distribution {
        Distribution::new(p.to_vec()).unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(greedy_select(&d(&[0.0, 1.0, 0.0])).unwrap(), 1);
        assert_eq!(greedy_select(&d(&[0.25; 4])).unwrap(), 0);
        assert_eq!(greedy_select(&d(&[0.2, 0.5, 0.3])).unwrap(), 1);
    }

    #[test]
    fn tiny_temperature_is_greedy() {
        let dist = d(&[0.2, 0.35, 0.3, 0.15]);
        let mut r = rng(1);
        for _ in 0..200 {
            assert_eq!(temperature_sample(&dist, 1e-4, &mut r).unwrap(), 1);
        }
        let one_hot = d(&[0.0, 0.0, 1.0]);
        assert_eq!(temperature_sample(&one_hot, 3.0, &mut r).unwrap(), 2);
    }

    #[test]
    fn top_k_one_is_greedy_and_top_p_truncates() {
        let dist = d(&[0.15, 0.5, 0.3, 0.05]);
        let mut r = rng(2);
        for _ in 0..100 {
            assert_eq!(top_k_sample(&dist, 1, &mut r).unwrap(), 1);
        }
        let dist = d(&[0.5, 0.3, 0.15, 0.05]);
        let support = top_p_support(&dist, 0.8);
        assert_eq!(support.iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 1]);
        let total: f64 = support.iter().map(|s| s.1).sum();
        assert_abs_diff_eq!(support[0].1 / total, 0.625, epsilon = 1e-12);
        assert_abs_diff_eq!(support[1].1 / total, 0.375, epsilon = 1e-12);
        assert_eq!(top_p_support(&dist, 1.0).len(), 4);
    }

    #[test]
    fn typical_examples() {
        let support = typical_support(&d(&[0.6, 0.3, 0.1]), 0.2);
        assert_eq!(support, vec![(1, 0.3)]);
        assert_eq!(typical_support(&d(&[0.25; 4]), 0.5).len(), 2);
        assert_eq!(typical_support(&d(&[0.6, 0.3, 0.1]), 1.0).len(), 3);
    }

    #[test]
    fn sampling_is_reproducible() {
        for cfg in [
            StrategyConfig::Temperature { tau: 0.9, seed: 5 },
            StrategyConfig::TopK { k: 3, seed: 5 },
            StrategyConfig::TopP { p: 0.9, seed: 5 },
            StrategyConfig::Typical {
                typical_tau: 0.9,
                seed: 5,
            },
        ] {
            let dist = d(&[0.1, 0.2, 0.3, 0.25, 0.15]);
            let run = || {
                let mut s = cfg.build().unwrap();
                s.begin(&[0], None).unwrap();
                (0..50)
                    .map(|_| s.select(&dist, None).unwrap().token)
                    .collect::<Vec<_>>()
            };
            assert_eq!(run(), run(), "{}", cfg.name());
        }
    }

    #[test]
    fn truncation_supports_are_respected() {
        let dist = d(&[0.05, 0.4, 0.05, 0.3, 0.2]);
        let mut r = rng(9);
        for _ in 0..500 {
            assert!([1, 3].contains(&top_k_sample(&dist, 2, &mut r).unwrap()));
            assert!([1, 3].contains(&top_p_sample(&dist, 0.7, &mut r).unwrap()));
        }
    }

    fn table(vectors: Vec<Vec<f32>>) -> RepresentationTable {
        RepresentationTable {
            dim: vectors[0].len(),
            vectors,
        }
    }

    #[test]
    fn contrastive_alpha_zero_is_greedy_over_candidates() {
        let reps = table(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]);
        let mut cs = ContrastiveSearch::new(2, 0.0);
        cs.begin(&[1], Some(&reps)).unwrap();
        let sel = cs.select(&d(&[0.2, 0.5, 0.3]), Some(&reps)).unwrap();
        assert_eq!(sel.token, 1);
        assert_eq!(cs.context_len(), 2);
    }

    #[test]
    fn contrastive_penalty_dominates_at_alpha_one() {
        let reps = table(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut cs = ContrastiveSearch::new(2, 1.0);
        cs.begin(&[0], Some(&reps)).unwrap();
        // token 0 duplicates the context, token 1 is orthogonal
        assert_eq!(cs.select(&d(&[0.9, 0.1]), Some(&reps)).unwrap().token, 1);
    }

    #[test]
    fn contrastive_hand_case() {
        // context: e1. candidates 0:(0.5, e1), 1:(0.3, (0.6,0.8)), 2:(0.2, e2)
        // scores: 0.4·0.5 − 0.6·1 = −0.40; 0.4·0.3 − 0.6·0.6 = −0.24; 0.4·0.2 − 0 = 0.08
        let reps = table(vec![
            vec![1.0, 0.0],
            vec![0.6, 0.8],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
        ]);
        let mut cs = ContrastiveSearch::new(3, 0.6);
        cs.begin(&[3], Some(&reps)).unwrap();
        let dist = d(&[0.5, 0.3, 0.2, 0.0]);
        let scored = cs.score_candidates(&dist, &reps).unwrap();
        let s: Vec<f64> = scored.iter().map(|c| c.score).collect();
        assert_abs_diff_eq!(s[0], -0.40, epsilon = 1e-6);
        assert_abs_diff_eq!(s[1], -0.24, epsilon = 1e-6);
        assert_abs_diff_eq!(s[2], 0.08, epsilon = 1e-6);
        assert_eq!(cs.select(&dist, Some(&reps)).unwrap().token, 2);
    }

    #[test]
    fn contrastive_without_representations_is_unavailable() {
        let mut cs = ContrastiveSearch::new(2, 0.6);
        assert!(matches!(
            cs.select(&d(&[0.5, 0.5]), None),
            Err(StrategyError::Unavailable { .. })
        ));
    }

    #[test]
    fn parameter_validation() {
        assert!(StrategyConfig::Temperature { tau: 0.0, seed: 0 }
            .build()
            .is_err());
        assert!(StrategyConfig::TopK { k: 0, seed: 0 }.build().is_err());
        assert!(StrategyConfig::TopP { p: 1.5, seed: 0 }.build().is_err());
        assert!(StrategyConfig::Typical {
            typical_tau: 0.0,
            seed: 0
        }
        .build()
        .is_err());
        assert!(StrategyConfig::ContrastiveSearch {
            cs_k: 5,
            cs_alpha: 1.2
        }
        .build()
        .is_err());
        assert!(StrategyConfig::default().build().is_ok());
    }

    #[test]
    fn config_serde_carries_only_relevant_fields() {
        let cfg: StrategyConfig =
            serde_json::from_str(r#"{"kind":"top_p","p":0.9,"seed":3}"#).unwrap();
        assert_eq!(cfg, StrategyConfig::TopP { p: 0.9, seed: 3 });
        assert!(
            serde_json::from_str::<StrategyConfig>(r#"{"kind":"top_k","k":3,"p":0.9}"#).is_err()
        );
        let guard: StrategyConfig = serde_json::from_str(r#"{"kind":"guard","window":9}"#).unwrap();
        match guard {
            StrategyConfig::Guard(g) => assert_eq!((g.window, g.lambda), (9, 0.95)),
            other => panic!("{other:?}"),
        }
    }
}
