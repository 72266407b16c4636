//! The autoregressive loop: ask the source for a distribution, hand it to
//! the strategy, append the chosen token, repeat.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::guard::{GuardConfig, StepDiagnostics};
use crate::provider::DistributionSource;
use crate::strategy::{Guard, Selection, Strategy};
use crate::TokenId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    /// Ran to `max_tokens`.
    MaxTokens,
    /// The source's end-of-sequence token was chosen (and kept as the last
    /// token of the continuation).
    EndOfSequence,
    /// Aborted by a provider or strategy error; tokens so far are kept.
    Aborted { error: String },
}

/// Wall-clock split between the distribution source and the strategy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Timings {
    pub provider: Duration,
    pub strategy: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRun {
    pub prompt: Vec<TokenId>,
    pub strategy: &'static str,
    pub tokens: Vec<TokenId>,
    /// One entry per generated token for strategies that report diagnostics.
    pub diagnostics: Vec<StepDiagnostics>,
    pub timings: Timings,
    pub status: RunStatus,
}

impl GenerationRun {
    pub fn is_aborted(&self) -> bool {
        matches!(self.status, RunStatus::Aborted { .. })
    }
}

/// Generates up to `max_tokens` tokens after `prompt`.
pub fn generate_with<S: DistributionSource + ?Sized>(
    source: &S,
    prompt: &[TokenId],
    strategy: &mut dyn Strategy,
    max_tokens: usize,
) -> GenerationRun {
    generate_observed(source, prompt, strategy, max_tokens, &mut |_| {})
}

/// As [`generate_with`], calling `observe` after every selection.
pub fn generate_observed<S: DistributionSource + ?Sized>(
    source: &S,
    prompt: &[TokenId],
    strategy: &mut dyn Strategy,
    max_tokens: usize,
    observe: &mut dyn FnMut(&Selection),
) -> GenerationRun {
    let mut run = GenerationRun {
        prompt: prompt.to_vec(),
        strategy: strategy.name(),
        tokens: Vec::with_capacity(max_tokens),
        diagnostics: Vec::new(),
        timings: Timings::default(),
        status: RunStatus::MaxTokens,
    };
    if prompt.is_empty() {
        run.status = RunStatus::Aborted {
            error: "prompt must not be empty".into(),
        };
        return run;
    }
    let reps = source.representations();
    if let Err(e) = strategy.begin(prompt, reps) {
        run.status = RunStatus::Aborted {
            error: e.to_string(),
        };
        return run;
    }
    let eos = source.eos_token();
    let mut context = prompt.to_vec();

    for _ in 0..max_tokens {
        let started = Instant::now();
        let dist = source.next_distribution(&context);
        let fetched = Instant::now();
        run.timings.provider += fetched - started;
        let dist = match dist {
            Ok(d) => d,
            Err(e) => {
                run.status = RunStatus::Aborted {
                    error: e.to_string(),
                };
                return run;
            }
        };
        let selection = strategy.select(&dist, reps);
        run.timings.strategy += fetched.elapsed();
        let selection = match selection {
            Ok(s) => s,
            Err(e) => {
                run.status = RunStatus::Aborted {
                    error: e.to_string(),
                };
                return run;
            }
        };
        observe(&selection);
        run.tokens.push(selection.token);
        run.diagnostics.extend(selection.diagnostics);
        context.push(selection.token);
        if Some(selection.token) == eos {
            run.status = RunStatus::EndOfSequence;
            break;
        }
    }
    run
}

/// GUARD generation with `cfg.max_tokens` as the length limit.
pub fn generate<S: DistributionSource + ?Sized>(
    source: &S,
    prompt: &[TokenId],
    cfg: &GuardConfig,
) -> GenerationRun {
    if let Err(e) = cfg.validate() {
        return GenerationRun {
            prompt: prompt.to_vec(),
            strategy: "guard",
            tokens: Vec::new(),
            diagnostics: Vec::new(),
            timings: Timings::default(),
            status: RunStatus::Aborted {
                error: e.to_string(),
            },
        };
    }
    let mut guard = Guard::new(cfg.clone());
    generate_with(source, prompt, &mut guard, cfg.max_tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::Distribution;
    use crate::provider::{Capabilities, ProviderError, SyntheticModel};
    use crate::strategy::Greedy;

    #[test]
    fn forced_chain_is_followed() {
        let model = SyntheticModel::forced_cycle(6).unwrap();
        let run = generate(&model, &[4], &GuardConfig::default());
        assert_eq!(run.status, RunStatus::MaxTokens);
        assert_eq!(run.tokens.len(), 256);
        let expected: Vec<TokenId> = (0..256).map(|i| ((4 + 1 + i) % 6) as TokenId).collect();
        assert_eq!(run.tokens, expected);
        assert_eq!(run.diagnostics.len(), 256);
        assert!(run.timings.strategy > Duration::ZERO);
    }

    #[test]
    fn eos_stops_generation() {
        let model = SyntheticModel::forced_cycle(6)
            .unwrap()
            .with_eos(2)
            .unwrap();
        let run = generate(&model, &[4], &GuardConfig::default());
        assert_eq!(run.status, RunStatus::EndOfSequence);
        assert_eq!(run.tokens, vec![5, 0, 1, 2]);
    }

    struct Flaky {
        fail_after: usize,
    }

    impl DistributionSource for Flaky {
        fn vocab_size(&self) -> usize {
            3
        }
        fn capabilities(&self) -> Capabilities {
            Capabilities::default()
        }
        fn next_distribution(&self, context: &[TokenId]) -> Result<Distribution, ProviderError> {
            if context.len() > self.fail_after {
                return Err(ProviderError::Transport {
                    attempts: 3,
                    message: "connection reset".into(),
                });
            }
            Ok(Distribution::new(vec![0.2, 0.5, 0.3])?)
        }
    }

    #[test]
    fn provider_failure_keeps_partial_run() {
        let run = generate_with(&Flaky { fail_after: 4 }, &[0], &mut Greedy, 10);
        assert!(run.is_aborted());
        assert_eq!(run.tokens, vec![1, 1, 1, 1]);
        match run.status {
            RunStatus::Aborted { error } => assert!(error.contains("3 attempt")),
            _ => unreachable!(),
        }
    }

    #[test]
    fn empty_prompt_is_rejected() {
        let model = SyntheticModel::forced_cycle(3).unwrap();
        assert!(generate(&model, &[], &GuardConfig::default()).is_aborted());
    }
}
