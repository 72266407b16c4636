//! Model-agnostic decoding engine built around GUARD, a self-adaptive
//! strategy that sizes its candidate set and repetition penalty from the
//! drift between local and smoothed (global) next-token entropy.
//!
//! * [`entropy`]: Shannon entropy, the global-entropy EWMA, medians.
//! * [`guard`]: the GUARD selection step and its state.
//! * [`strategy`]: the shared strategy interface and baselines.
//! * [`provider`]: distribution sources (synthetic Markov models, remote
//!   completion servers).
//! * [`decode`]: the generation loop.
//! * [`metrics`]: n-gram diversity, coherence, repetition profile.
//! * [`stats`]: Monte Carlo checks of the global-entropy estimator.
//! * [`bench`]: strategy-only per-token overhead.
//! * [`trace`]: NDJSON step records.

pub mod bench;
pub mod decode;
pub mod entropy;
pub mod guard;
pub mod metrics;
pub mod provider;
pub mod stats;
pub mod strategy;
pub mod trace;

#[cfg(any(test, feature = "oracle"))]
pub mod reference;

/// Opaque token identifier.
pub type TokenId = u32;

pub use decode::{generate, generate_observed, generate_with, GenerationRun, RunStatus, Timings};
pub use entropy::{Distribution, EntropyTrace};
pub use guard::{guard_select, AlphaVariant, GuardConfig, GuardState, StepDiagnostics};
pub use provider::{DistributionSource, ProviderError, RemoteProvider, SyntheticModel};
pub use strategy::{Strategy, StrategyConfig, StrategyError};
