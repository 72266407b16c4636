//! Strategy-only decoding overhead.
//!
//! The distribution for every step is fetched from the synthetic source
//! outside the timed region; only `Strategy::select` is measured, on a
//! monotonic clock. "Context length" is the number of tokens already in the
//! stream: prompt representations for contrastive search, generated history
//! for GUARD.

use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::generate_with;
use crate::provider::{DistributionSource, ProviderError, SyntheticModel};
use crate::strategy::{StrategyConfig, StrategyError};
use crate::TokenId;

pub const MIN_MEASURED_TOKENS: usize = 10_000;
pub const MIN_WARMUP_TOKENS: usize = 100;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("benchmark needs ≥ {MIN_MEASURED_TOKENS} measured tokens, configured {0}")]
    TooFewTokens(usize),
    #[error("benchmark needs ≥ {MIN_WARMUP_TOKENS} warm-up tokens, configured {0}")]
    TooFewWarmup(usize),
    #[error("{0} needs a source with representation vectors")]
    MissingRepresentations(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchOptions {
    pub context_len: usize,
    pub steps_per_rep: usize,
    pub repetitions: usize,
    pub warmup: usize,
    /// Full generations per strategy for the informational tokens/story.
    pub stories: usize,
    pub story_tokens: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            context_len: 256,
            steps_per_rep: 16,
            repetitions: 625,
            warmup: MIN_WARMUP_TOKENS,
            stories: 3,
            story_tokens: 256,
            seed: 0,
        }
    }
}

impl BenchOptions {
    pub fn measured_tokens(&self) -> usize {
        self.steps_per_rep * self.repetitions
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub strategy: String,
    pub context_len: usize,
    pub tokens_measured: usize,
    pub mean_ns: f64,
    pub median_ns: f64,
    pub p99_ns: f64,
    /// `1e9 / mean_ns`: throughput if selection were the only cost.
    pub tokens_per_sec: f64,
    /// Mean continuation length over the informational full generations.
    pub tokens_per_story: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub cpu: String,
    pub timestamp_unix: u64,
}

impl Environment {
    pub fn detect() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|info| {
                info.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|s| s.trim().to_string())
            })
            .unwrap_or_else(|| std::env::consts::ARCH.to_string());
        let timestamp_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Self {
            cpu,
            timestamp_unix,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub options: BenchOptions,
    pub entries: Vec<BenchEntry>,
    pub environment: Environment,
}

impl BenchReport {
    pub fn entry(&self, strategy: &str) -> Option<&BenchEntry> {
        self.entries.iter().find(|e| e.strategy == strategy)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "strategy-only cost per token (context {}, {} tokens each)\n{:<20} {:>12} {:>12} {:>12} {:>14} {:>10}\n",
            self.options.context_len,
            self.options.measured_tokens(),
            "strategy",
            "mean ns",
            "median ns",
            "p99 ns",
            "tokens/sec",
            "tok/story"
        );
        for e in &self.entries {
            out.push_str(&format!(
                "{:<20} {:>12.1} {:>12.1} {:>12.1} {:>14.0} {:>10.1}\n",
                e.strategy, e.mean_ns, e.median_ns, e.p99_ns, e.tokens_per_sec, e.tokens_per_story
            ));
        }
        out.push_str(&format!(
            "cpu: {}; timestamp: {}\n",
            self.environment.cpu, self.environment.timestamp_unix
        ));
        out
    }
}

/// Random walk of `len` tokens through the model.
fn walk(source: &SyntheticModel, len: usize, seed: u64) -> Result<Vec<TokenId>, ProviderError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = vec![rng.random_range(0..source.vocab_size()) as TokenId];
    while tokens.len() < len {
        let dist = source.next_distribution(&tokens)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut next = dist.ranked()[0].0;
        for (t, p) in dist.selectable() {
            acc += p;
            if u < acc {
                next = t;
                break;
            }
        }
        tokens.push(next);
    }
    Ok(tokens)
}

fn percentile(sorted: &[u64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1] as f64
}

fn median(sorted: &[u64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) as f64
    }
}

/// Runs one stream: begin at the prompt, prefill, then `steps` timed
/// selections. Returns per-token nanoseconds when `record` is set.
fn run_stream(
    cfg: &StrategyConfig,
    source: &SyntheticModel,
    prompt: &[TokenId],
    prefill: usize,
    steps: usize,
    samples: Option<&mut Vec<u64>>,
) -> Result<(), BenchError> {
    let reps = source.representations();
    let mut strategy = cfg.build()?;
    strategy.begin(prompt, reps)?;
    let mut context = prompt.to_vec();
    for _ in 0..prefill {
        let dist = source.next_distribution(&context)?;
        context.push(strategy.select(&dist, reps)?.token);
    }
    let mut samples = samples;
    for _ in 0..steps {
        let dist = source.next_distribution(&context)?;
        let started = Instant::now();
        let selection = strategy.select(&dist, reps);
        let elapsed = started.elapsed();
        context.push(selection?.token);
        if let Some(s) = samples.as_deref_mut() {
            s.push(elapsed.as_nanos() as u64);
        }
    }
    Ok(())
}

/// Measures each strategy in turn; never co-schedules measurements.
pub fn bench_strategies(
    strategies: &[StrategyConfig],
    source: &SyntheticModel,
    opts: &BenchOptions,
) -> Result<BenchReport, BenchError> {
    if opts.measured_tokens() < MIN_MEASURED_TOKENS {
        return Err(BenchError::TooFewTokens(opts.measured_tokens()));
    }
    if opts.warmup < MIN_WARMUP_TOKENS {
        return Err(BenchError::TooFewWarmup(opts.warmup));
    }
    let mut entries = Vec::with_capacity(strategies.len());
    for cfg in strategies {
        cfg.validate()?;
        if cfg.needs_representations() && source.representations().is_none() {
            return Err(BenchError::MissingRepresentations(cfg.name()));
        }
        // GUARD's state is built from generated tokens, not the prompt
        let prefill = if matches!(cfg, StrategyConfig::Guard(_)) {
            opts.context_len
        } else {
            0
        };
        let prompt_len = if prefill > 0 {
            1
        } else {
            opts.context_len.max(1)
        };

        let prompt = walk(source, prompt_len, opts.seed)?;
        run_stream(cfg, source, &prompt, prefill, opts.warmup, None)?;

        let mut samples = Vec::with_capacity(opts.measured_tokens());
        for rep in 0..opts.repetitions {
            let prompt = walk(source, prompt_len, opts.seed.wrapping_add(rep as u64 + 1))?;
            run_stream(
                cfg,
                source,
                &prompt,
                prefill,
                opts.steps_per_rep,
                Some(&mut samples),
            )?;
        }
        samples.sort_unstable();
        let mean_ns = samples.iter().sum::<u64>() as f64 / samples.len() as f64;

        let mut story_tokens = 0usize;
        for story in 0..opts.stories {
            let prompt = walk(source, 1, opts.seed.wrapping_add(1_000_000 + story as u64))?;
            let mut strategy = cfg.build()?;
            story_tokens += generate_with(source, &prompt, strategy.as_mut(), opts.story_tokens)
                .tokens
                .len();
        }

        entries.push(BenchEntry {
            strategy: label(cfg),
            context_len: opts.context_len,
            tokens_measured: samples.len(),
            mean_ns,
            median_ns: median(&samples),
            p99_ns: percentile(&samples, 0.99),
            tokens_per_sec: 1e9 / mean_ns.max(1.0),
            tokens_per_story: story_tokens as f64 / opts.stories.max(1) as f64,
        });
    }
    Ok(BenchReport {
        options: opts.clone(),
        entries,
        environment: Environment::detect(),
    })
}

fn label(cfg: &StrategyConfig) -> String {
    match cfg {
        StrategyConfig::ContrastiveSearch { cs_k, .. } => format!("contrastive_search(k={cs_k})"),
        StrategyConfig::TopK { k, .. } => format!("top_k(k={k})"),
        other => other.name().to_string(),
    }
}
