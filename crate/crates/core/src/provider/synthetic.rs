//! Deterministic first-order Markov language models used as test oracles
//! and benchmark substrates.
//!
//! Every model is materialized as an explicit transition table: row `a` is
//! the next-token distribution after token `a`. The model file is JSON:
//!
//! ```json
//! {
//!   "vocab_size": 3,
//!   "kind": { "type": "looping", "bias": 0.9 },
//!   "seed": 7,
//!   "eos_token": null,
//!   "max_context": null,
//!   "transitions": [[0.95, 0.03, 0.02], [0.01, 0.96, 0.03], [0.04, 0.01, 0.95]],
//!   "representations": { "dim": 2, "vectors": [[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]] }
//! }
//! ```
//!
//! `kind` is descriptive (`markov_table`, `looping`, `forced_chain`); the
//! table is authoritative. Floats are written in shortest round-trip form,
//! so `to_json` / `from_json` round-trip bit-exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Capabilities, DistributionSource, ProviderError, Representations};
use crate::entropy::{normalize, Distribution, SUM_TOLERANCE};
use crate::TokenId;

pub const MAX_SYNTHETIC_VOCAB: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TransitionKind {
    MarkovTable,
    /// Row `a` puts `bias` on repeating `a`, the rest on a random row.
    Looping {
        bias: f64,
    },
    /// Every row is one-hot on a fixed successor.
    ForcedChain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationTable {
    pub dim: usize,
    pub vectors: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    vocab_size: usize,
    kind: TransitionKind,
    seed: u64,
    #[serde(default)]
    eos_token: Option<TokenId>,
    #[serde(default)]
    max_context: Option<usize>,
    transitions: Vec<Vec<f64>>,
    #[serde(default)]
    representations: Option<RepresentationTable>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticModel {
    file: ModelFile,
    rows: Vec<Distribution>,
}

impl SyntheticModel {
    fn build(file: ModelFile) -> Result<Self, ProviderError> {
        let invalid = |msg: String| Err(ProviderError::InvalidInput(msg));
        let v = file.vocab_size;
        if !(2..=MAX_SYNTHETIC_VOCAB).contains(&v) {
            return invalid(format!(
                "synthetic vocab size must be in [2, {MAX_SYNTHETIC_VOCAB}], got {v}"
            ));
        }
        if file.transitions.len() != v {
            return invalid(format!(
                "expected {v} transition rows, got {}",
                file.transitions.len()
            ));
        }
        if let Some(eos) = file.eos_token {
            if eos as usize >= v {
                return invalid(format!("eos token {eos} outside vocabulary"));
            }
        }
        if let TransitionKind::Looping { bias } = file.kind {
            if !(0.0..=1.0).contains(&bias) {
                return invalid(format!("looping bias must be in [0, 1], got {bias}"));
            }
        }
        let mut rows = Vec::with_capacity(v);
        for (a, row) in file.transitions.iter().enumerate() {
            if row.len() != v {
                return invalid(format!("row {a} has {} entries, expected {v}", row.len()));
            }
            rows.push(
                Distribution::new(row.clone())
                    .map_err(|e| ProviderError::InvalidInput(format!("row {a}: {e}")))?,
            );
        }
        if let Some(reps) = &file.representations {
            if reps.vectors.len() != v || reps.dim == 0 {
                return invalid("representation table must hold one vector per token".into());
            }
            for (a, vec) in reps.vectors.iter().enumerate() {
                if vec.len() != reps.dim {
                    return invalid(format!("representation {a} has wrong dimension"));
                }
                if vec.iter().all(|&x| x == 0.0) || vec.iter().any(|x| !x.is_finite()) {
                    return invalid(format!("representation {a} is zero or non-finite"));
                }
            }
        }
        Ok(Self { file, rows })
    }

    /// Markov model from explicit rows.
    pub fn from_rows(rows: Vec<Vec<f64>>, seed: u64) -> Result<Self, ProviderError> {
        Self::build(ModelFile {
            vocab_size: rows.len(),
            kind: TransitionKind::MarkovTable,
            seed,
            eos_token: None,
            max_context: None,
            transitions: rows,
            representations: None,
        })
    }

    /// Random Markov model whose rows range from nearly flat to sharply
    /// peaked, with occasional one-hot rows.
    pub fn markov(vocab_size: usize, seed: u64) -> Result<Self, ProviderError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..vocab_size)
            .map(|_| {
                if rng.random_range(0..16) == 0 {
                    let mut row = vec![0.0; vocab_size];
                    row[rng.random_range(0..vocab_size)] = 1.0;
                    row
                } else {
                    random_row(&mut rng, vocab_size)
                }
            })
            .collect();
        Self::from_rows(rows, seed)
    }

    /// Model that repeats the previous token with probability `bias` (plus
    /// whatever the random base row assigns to it).
    pub fn looping(vocab_size: usize, bias: f64, seed: u64) -> Result<Self, ProviderError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..vocab_size)
            .map(|a| {
                let mut row: Vec<f64> = random_row(&mut rng, vocab_size)
                    .into_iter()
                    .map(|p| (1.0 - bias) * p)
                    .collect();
                row[a] += bias;
                row
            })
            .collect();
        Self::build(ModelFile {
            vocab_size,
            kind: TransitionKind::Looping { bias },
            seed,
            eos_token: None,
            max_context: None,
            transitions: rows,
            representations: None,
        })
    }

    /// Deterministic chain: after token `a` comes `successors[a]`.
    pub fn forced_chain(successors: &[TokenId]) -> Result<Self, ProviderError> {
        let v = successors.len();
        let mut rows = Vec::with_capacity(v);
        for &s in successors {
            if s as usize >= v {
                return Err(ProviderError::InvalidInput(format!(
                    "successor {s} outside vocabulary"
                )));
            }
            let mut row = vec![0.0; v];
            row[s as usize] = 1.0;
            rows.push(row);
        }
        Self::build(ModelFile {
            vocab_size: v,
            kind: TransitionKind::ForcedChain,
            seed: 0,
            eos_token: None,
            max_context: None,
            transitions: rows,
            representations: None,
        })
    }

    /// Forced chain `a → (a + 1) mod V`.
    pub fn forced_cycle(vocab_size: usize) -> Result<Self, ProviderError> {
        let successors: Vec<TokenId> = (0..vocab_size)
            .map(|a| ((a + 1) % vocab_size.max(1)) as TokenId)
            .collect();
        Self::forced_chain(&successors)
    }

    /// Attaches deterministic random unit vectors of dimension `dim`.
    pub fn with_representations(mut self, dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "representation dimension must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_7e57);
        let vectors = (0..self.file.vocab_size)
            .map(|_| loop {
                let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
                if norm > 1e-6 {
                    break v.into_iter().map(|x| x / norm).collect();
                }
            })
            .collect();
        self.file.representations = Some(RepresentationTable { dim, vectors });
        self
    }

    pub fn with_eos(mut self, eos: TokenId) -> Result<Self, ProviderError> {
        self.file.eos_token = Some(eos);
        Self::build(self.file)
    }

    pub fn with_max_context(mut self, max: usize) -> Self {
        self.file.max_context = Some(max);
        self
    }

    pub fn from_json(text: &str) -> Result<Self, ProviderError> {
        let file: ModelFile = serde_json::from_str(text)
            .map_err(|e| ProviderError::InvalidInput(format!("model file: {e}")))?;
        Self::build(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.file).expect("model file serializes")
    }

    pub fn kind(&self) -> &TransitionKind {
        &self.file.kind
    }

    pub fn seed(&self) -> u64 {
        self.file.seed
    }

    pub fn transitions(&self) -> &[Vec<f64>] {
        &self.file.transitions
    }

    /// Next-token row after `token`.
    pub fn row(&self, token: TokenId) -> Option<&Distribution> {
        self.rows.get(token as usize)
    }

    fn check_context(&self, context: &[TokenId]) -> Result<TokenId, ProviderError> {
        if let Some(max) = self.file.max_context {
            if context.len() > max {
                return Err(ProviderError::ContextOverflow {
                    len: context.len(),
                    max,
                });
            }
        }
        let last = *context
            .last()
            .ok_or_else(|| ProviderError::InvalidInput("empty context".into()))?;
        if last as usize >= self.file.vocab_size {
            return Err(ProviderError::InvalidInput(format!(
                "token {last} outside vocabulary of {}",
                self.file.vocab_size
            )));
        }
        Ok(last)
    }
}

/// Row with entries `u^e` for uniform `u` and a per-row integer exponent
/// `e ∈ [1, 8]`; larger `e` gives a sharper row. Only IEEE multiply and
/// divide are involved, so rows are identical on every platform.
fn random_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let exponent = rng.random_range(1..=8);
    let weights: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            (0..exponent).fold(1.0, |acc, _| acc * u)
        })
        .collect();
    let row = normalize(&weights).unwrap_or_else(|_| vec![1.0 / n as f64; n]);
    debug_assert!((row.iter().sum::<f64>() - 1.0).abs() < SUM_TOLERANCE);
    row
}

impl Representations for RepresentationTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn representation(&self, token: TokenId) -> Option<&[f32]> {
        self.vectors.get(token as usize).map(Vec::as_slice)
    }
}

impl DistributionSource for SyntheticModel {
    fn vocab_size(&self) -> usize {
        self.file.vocab_size
    }

    fn eos_token(&self) -> Option<TokenId> {
        self.file.eos_token
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            full_distribution: true,
            top_m_logprobs: None,
            representation_dim: self.file.representations.as_ref().map(|r| r.dim),
            echo_scoring: true,
        }
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<Distribution, ProviderError> {
        let last = self.check_context(context)?;
        Ok(self.rows[last as usize].clone())
    }

    fn representations(&self) -> Option<&dyn Representations> {
        self.file
            .representations
            .as_ref()
            .map(|r| r as &dyn Representations)
    }

    fn score_continuation(
        &self,
        prompt: &[TokenId],
        continuation: &[TokenId],
    ) -> Result<f64, ProviderError> {
        if continuation.is_empty() {
            return Err(ProviderError::InvalidInput("empty continuation".into()));
        }
        let mut context = prompt.to_vec();
        let mut total = 0.0;
        for &token in continuation {
            let last = self.check_context(&context)?;
            if token as usize >= self.file.vocab_size {
                return Err(ProviderError::InvalidInput(format!(
                    "token {token} outside vocabulary"
                )));
            }
            total += self.file.transitions[last as usize][token as usize].ln();
            context.push(token);
        }
        Ok(total / continuation.len() as f64)
    }
}
