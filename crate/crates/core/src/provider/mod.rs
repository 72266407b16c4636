//! Distribution sources: anything that can hand the decoder a next-token
//! distribution for a context.

mod remote;
mod synthetic;

pub use remote::{RemoteProvider, RemoteProviderConfig, API_KEY_ENV};
pub use synthetic::{RepresentationTable, SyntheticModel, TransitionKind};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::{Distribution, DistributionError};
use crate::TokenId;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("request failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("malformed provider response after {attempts} attempt(s): {message}")]
    Malformed { attempts: u32, message: String },
    #[error("context of {len} tokens exceeds provider maximum {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("provider does not support {0}")]
    Capability(&'static str),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
}

impl ProviderError {
    /// Whether retrying the same request may succeed.
    pub fn is_retriable(&self) -> bool {
        matches!(
            self,
            Self::Transport { .. } | Self::Timeout { .. } | Self::Malformed { .. }
        )
    }
}

/// What a source can provide beyond a next-token distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Capabilities {
    /// The distribution covers the whole vocabulary.
    pub full_distribution: bool,
    /// Only the top `M` log-probabilities are exposed; the rest of the mass
    /// lands in a tail bucket.
    pub top_m_logprobs: Option<usize>,
    /// Candidate representation vectors of this dimension are available.
    pub representation_dim: Option<usize>,
    /// The source can score a supplied continuation token by token.
    pub echo_scoring: bool,
}

/// Per-token representation vectors, used by contrastive search.
pub trait Representations: Send + Sync {
    fn dim(&self) -> usize;
    fn representation(&self, token: TokenId) -> Option<&[f32]>;
}

/// A next-token distribution provider.
///
/// Implementations must be shareable across concurrent generation streams.
pub trait DistributionSource: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn eos_token(&self) -> Option<TokenId> {
        None
    }

    fn capabilities(&self) -> Capabilities;

    fn next_distribution(&self, context: &[TokenId]) -> Result<Distribution, ProviderError>;

    fn representations(&self) -> Option<&dyn Representations> {
        None
    }

    /// Mean per-token log-likelihood of `continuation` given `prompt`,
    /// `(1/n) Σ ln p(x̂_i | prompt, x̂_<i)`.
    fn score_continuation(
        &self,
        _prompt: &[TokenId],
        _continuation: &[TokenId],
    ) -> Result<f64, ProviderError> {
        Err(ProviderError::Capability("continuation scoring"))
    }
}

impl<S: DistributionSource + ?Sized> DistributionSource for &S {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn eos_token(&self) -> Option<TokenId> {
        (**self).eos_token()
    }
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn next_distribution(&self, context: &[TokenId]) -> Result<Distribution, ProviderError> {
        (**self).next_distribution(context)
    }
    fn representations(&self) -> Option<&dyn Representations> {
        (**self).representations()
    }
    fn score_continuation(
        &self,
        prompt: &[TokenId],
        continuation: &[TokenId],
    ) -> Result<f64, ProviderError> {
        (**self).score_continuation(prompt, continuation)
    }
}
