//! Run configuration: a TOML file, then `--set key=value` overrides, then
//! dedicated flags. Later sources win.
//!
//! ```toml
//! strategy = "guard"
//! max_tokens = 256
//! seed = 0
//! prompt = "0 5 3"            # or prompt_file = "prompts.txt", one per line
//! trace = "trace.ndjson"
//! report = "report.json"
//! output = "out.ndjson"
//!
//! [guard]
//! lambda = 0.95
//! window = 7
//! epsilon = 1e-6
//! k_floor = 5
//! k_span = 10
//! alpha_variant = "pseudocode"  # or "prose"
//! global_median_history = false
//!
//! [sampling]                  # baseline parameters
//! tau = 0.9
//! top_k = 10
//! top_p = 0.95
//! typical_tau = 0.2
//! cs_k = 10
//! cs_alpha = 0.6
//!
//! [provider]
//! kind = "synthetic"          # or "remote"
//! model_file = "model.json"   # synthetic; generated from [synthetic] if absent
//! endpoint = "http://localhost:8000"
//! model = "default"
//! top_logprobs = 20
//! timeout_ms = 30000
//! retries = 2
//! max_in_flight = 4
//!
//! [synthetic]
//! vocab_size = 64
//! transitions = "markov"      # or "looping"
//! bias = 0.9
//! seed = 0
//! representation_dim = 4096   # optional
//!
//! [bench]
//! strategies = ["greedy", "guard", "contrastive_search"]
//! context_len = 256
//! steps_per_rep = 16
//! repetitions = 625
//! warmup = 100
//! stories = 3
//! vocab_size = 64
//! representation_dim = 4096
//!
//! [verify]
//! lambdas = [0.91, 0.95, 0.99]
//! vocab_size = 64
//! horizon = 256
//! replications = 10000
//! decay_replications = 10000
//! estimator = { type = "ewma" }
//! ```
//!
//! Synthetic prompts are whitespace-separated token ids; remote prompts are
//! raw text.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use guard_decode::guard::{
    DEFAULT_EPSILON, DEFAULT_K_FLOOR, DEFAULT_K_SPAN, DEFAULT_LAMBDA, DEFAULT_MAX_TOKENS,
    DEFAULT_WINDOW,
};
use guard_decode::provider::RemoteProviderConfig;
use guard_decode::stats::{Estimator, MIN_BIAS_REPLICATIONS, MIN_DECAY_REPLICATIONS};
use guard_decode::{AlphaVariant, GuardConfig, StrategyConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum StrategyKind {
    Greedy,
    Temperature,
    TopK,
    TopP,
    Typical,
    ContrastiveSearch,
    #[default]
    Guard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Synthetic,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionsKind {
    #[default]
    Markov,
    Looping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuardSection {
    pub lambda: f64,
    pub window: usize,
    pub epsilon: f64,
    pub k_floor: usize,
    pub k_span: usize,
    pub alpha_variant: AlphaVariant,
    pub global_median_history: bool,
}

impl Default for GuardSection {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            window: DEFAULT_WINDOW,
            epsilon: DEFAULT_EPSILON,
            k_floor: DEFAULT_K_FLOOR,
            k_span: DEFAULT_K_SPAN,
            alpha_variant: AlphaVariant::Pseudocode,
            global_median_history: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub tau: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub typical_tau: f64,
    pub cs_k: usize,
    pub cs_alpha: f64,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            tau: 0.9,
            top_k: 10,
            top_p: 0.95,
            typical_tau: 0.2,
            cs_k: 10,
            cs_alpha: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    pub kind: ProviderKind,
    pub model_file: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: String,
    pub top_logprobs: usize,
    pub timeout_ms: u64,
    pub retries: u32,
    pub max_in_flight: usize,
    pub max_context: Option<usize>,
}

impl Default for ProviderSection {
    fn default() -> Self {
        let remote = RemoteProviderConfig::new("");
        Self {
            kind: ProviderKind::Synthetic,
            model_file: None,
            endpoint: None,
            model: remote.model,
            top_logprobs: remote.top_logprobs,
            timeout_ms: remote.timeout_ms,
            retries: remote.retries,
            max_in_flight: remote.max_in_flight,
            max_context: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub vocab_size: usize,
    pub transitions: TransitionsKind,
    pub bias: f64,
    pub seed: u64,
    pub representation_dim: Option<usize>,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            transitions: TransitionsKind::Markov,
            bias: 0.9,
            seed: 0,
            representation_dim: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub strategies: Vec<StrategyKind>,
    pub context_len: usize,
    pub steps_per_rep: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub stories: usize,
    pub vocab_size: usize,
    pub representation_dim: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        let opts = guard_decode::bench::BenchOptions::default();
        Self {
            strategies: vec![
                StrategyKind::Greedy,
                StrategyKind::Guard,
                StrategyKind::ContrastiveSearch,
            ],
            context_len: opts.context_len,
            steps_per_rep: opts.steps_per_rep,
            repetitions: opts.repetitions,
            warmup: opts.warmup,
            stories: opts.stories,
            vocab_size: 64,
            representation_dim: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub lambdas: Vec<f64>,
    pub vocab_size: usize,
    pub horizon: usize,
    pub replications: usize,
    pub decay_replications: usize,
    pub estimator: Estimator,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            lambdas: vec![0.91, 0.95, 0.99],
            vocab_size: 64,
            horizon: 256,
            replications: 10_000,
            decay_replications: MIN_DECAY_REPLICATIONS,
            estimator: Estimator::Ewma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: StrategyKind,
    pub max_tokens: usize,
    pub seed: u64,
    pub prompt: Option<String>,
    pub prompt_file: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub guard: GuardSection,
    pub sampling: SamplingSection,
    pub provider: ProviderSection,
    pub synthetic: SyntheticSection,
    pub bench: BenchSection,
    pub verify: VerifySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::Guard,
            max_tokens: DEFAULT_MAX_TOKENS,
            seed: 0,
            prompt: None,
            prompt_file: None,
            trace: None,
            report: None,
            output: None,
            guard: GuardSection::default(),
            sampling: SamplingSection::default(),
            provider: ProviderSection::default(),
            synthetic: SyntheticSection::default(),
            bench: BenchSection::default(),
            verify: VerifySection::default(),
        }
    }
}

/// Values given on the command line; `None` leaves the config untouched.
#[derive(Debug, Clone, Default, PartialEq, clap::Args)]
pub struct Overrides {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set guard.window=9`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, global = true, value_enum)]
    pub strategy: Option<StrategyKind>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub window: Option<usize>,
    #[arg(long, global = true)]
    pub max_tokens: Option<usize>,
    #[arg(long, global = true, value_name = "FILE")]
    pub prompt_file: Option<PathBuf>,
    #[arg(long, global = true)]
    pub prompt: Option<String>,
    #[arg(long, global = true, value_enum)]
    pub provider: Option<ProviderKind>,
    #[arg(long, global = true, value_name = "URL")]
    pub endpoint: Option<String>,
    #[arg(long, global = true, value_name = "FILE")]
    pub model_file: Option<PathBuf>,
    #[arg(long, global = true, value_name = "FILE")]
    pub trace: Option<PathBuf>,
    #[arg(long, global = true, value_name = "FILE")]
    pub report: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    pub output: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["pseudocode", "prose"])]
    pub alpha_variant: Option<String>,
    #[arg(long, global = true, action = clap::ArgAction::Set, value_name = "BOOL")]
    pub global_median_history: Option<bool>,
}

/// A resolved configuration plus whether a provider was chosen explicitly
/// (by flag or by a `[provider]` table), which gates coherence scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub config: RunConfig,
    pub provider_explicit: bool,
}

fn set_path(root: &mut toml::Table, key: &str, raw: &str) -> Result<(), CliError> {
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty());
    let Some(last) = last else {
        return Err(CliError::Config(format!("empty key in --set {key}")));
    };
    let mut table = root;
    for part in parts {
        table = table
            .entry(part)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("--set {key}: {part} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl Overrides {
    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let mut table = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Config(format!("cannot read config {}: {e}", path.display()))
                })?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for item in &self.set {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {item}")))?;
            set_path(&mut table, key.trim(), value.trim())?;
        }
        let provider_explicit = table.contains_key("provider") || self.provider.is_some();
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;

        macro_rules! apply {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$flag { cfg.$($field).+ = v.clone().into(); })*
            };
        }
        apply!(
            strategy => strategy,
            lambda => guard.lambda,
            window => guard.window,
            max_tokens => max_tokens,
            prompt_file => prompt_file,
            prompt => prompt,
            provider => provider.kind,
            endpoint => provider.endpoint,
            model_file => provider.model_file,
            trace => trace,
            report => report,
            output => output,
            seed => seed,
            global_median_history => guard.global_median_history,
        );
        if let Some(v) = &self.alpha_variant {
            cfg.guard.alpha_variant = match v.as_str() {
                "prose" => AlphaVariant::Prose,
                _ => AlphaVariant::Pseudocode,
            };
        }
        Ok(Resolved {
            config: cfg,
            provider_explicit,
        })
    }
}

impl RunConfig {
    pub fn guard_config(&self) -> GuardConfig {
        GuardConfig {
            lambda: self.guard.lambda,
            window: self.guard.window,
            epsilon: self.guard.epsilon,
            k_floor: self.guard.k_floor,
            k_span: self.guard.k_span,
            max_tokens: self.max_tokens,
            alpha_variant: self.guard.alpha_variant,
            global_median_history: self.guard.global_median_history,
        }
    }

    /// Strategy for stream `index`; stochastic strategies get `seed + index`.
    pub fn strategy_config(&self, kind: StrategyKind, index: usize) -> StrategyConfig {
        let seed = self.seed.wrapping_add(index as u64);
        let s = &self.sampling;
        match kind {
            StrategyKind::Greedy => StrategyConfig::Greedy,
            StrategyKind::Temperature => StrategyConfig::Temperature { tau: s.tau, seed },
            StrategyKind::TopK => StrategyConfig::TopK { k: s.top_k, seed },
            StrategyKind::TopP => StrategyConfig::TopP { p: s.top_p, seed },
            StrategyKind::Typical => StrategyConfig::Typical {
                typical_tau: s.typical_tau,
                seed,
            },
            StrategyKind::ContrastiveSearch => StrategyConfig::ContrastiveSearch {
                cs_k: s.cs_k,
                cs_alpha: s.cs_alpha,
            },
            StrategyKind::Guard => StrategyConfig::Guard(self.guard_config()),
        }
    }

    pub fn remote_config(&self) -> Result<RemoteProviderConfig, CliError> {
        let p = &self.provider;
        let endpoint = p.endpoint.clone().ok_or_else(|| {
            CliError::Config(
                "remote provider needs an endpoint (--endpoint or provider.endpoint)".into(),
            )
        })?;
        let cfg = RemoteProviderConfig {
            endpoint,
            model: p.model.clone(),
            top_logprobs: p.top_logprobs,
            timeout_ms: p.timeout_ms,
            retries: p.retries,
            max_in_flight: p.max_in_flight,
            max_context: p.max_context,
        };
        cfg.validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Checks that apply to every command.
    pub fn validate(&self) -> Result<(), CliError> {
        let config = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        if self.max_tokens == 0 {
            return Err(CliError::Config("max_tokens must be positive".into()));
        }
        self.guard_config().validate().map_err(|e| config(&e))?;
        self.strategy_config(self.strategy, 0)
            .validate()
            .map_err(|e| config(&e))?;
        if self.prompt.is_some() && self.prompt_file.is_some() {
            return Err(CliError::Config(
                "give exactly one prompt source: prompt or prompt_file".into(),
            ));
        }
        if self.provider.kind == ProviderKind::Remote {
            self.remote_config()?;
            if self.strategy == StrategyKind::ContrastiveSearch {
                return Err(CliError::Config(
                    "contrastive_search needs representation vectors, which the remote provider does not expose".into(),
                ));
            }
        } else if self.strategy == StrategyKind::ContrastiveSearch
            && self.provider.model_file.is_none()
            && self.synthetic.representation_dim.is_none()
        {
            return Err(CliError::Config(
                "contrastive_search needs representation vectors: set synthetic.representation_dim or use a model file that has them".into(),
            ));
        }
        for path in [&self.trace, &self.report].into_iter().flatten() {
            check_writable_parent(path)?;
        }
        if self.verify.replications < MIN_BIAS_REPLICATIONS {
            return Err(CliError::Config(format!(
                "verify.replications must be ≥ {MIN_BIAS_REPLICATIONS}, got {}",
                self.verify.replications
            )));
        }
        if self.verify.decay_replications < MIN_DECAY_REPLICATIONS {
            return Err(CliError::Config(format!(
                "verify.decay_replications must be ≥ {MIN_DECAY_REPLICATIONS}, got {}",
                self.verify.decay_replications
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn check_writable_parent(path: &Path) -> Result<(), CliError> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if parent.is_dir() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "cannot write {}: directory {} does not exist",
            path.display(),
            parent.display()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_without_flags() {
        let r = Overrides::default().resolve().unwrap();
        assert_eq!(r.config, RunConfig::default());
        assert!(!r.provider_explicit);
        let g = r.config.guard_config();
        assert_eq!((g.lambda, g.window, g.epsilon), (0.95, 7, 1e-6));
        assert_eq!((g.k_floor, g.k_max(), g.max_tokens), (5, 15, 256));
    }

    #[test]
    fn flags_beat_set_beats_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        std::fs::write(
            &file,
            "max_tokens = 32\n[guard]\nwindow = 5\nlambda = 0.9\n",
        )
        .unwrap();
        let o = Overrides {
            config: Some(file),
            set: vec!["guard.window=9".into(), "sampling.tau=1.5".into()],
            lambda: Some(0.99),
            ..Default::default()
        };
        let cfg = o.resolve().unwrap().config;
        assert_eq!(cfg.max_tokens, 32);
        assert_eq!(cfg.guard.window, 9);
        assert_eq!(cfg.guard.lambda, 0.99);
        assert_eq!(cfg.sampling.tau, 1.5);
    }

    #[test]
    fn config_errors() {
        let bad_key = Overrides {
            set: vec!["guard.windw=3".into()],
            ..Default::default()
        };
        assert!(matches!(bad_key.resolve(), Err(CliError::Config(_))));
        let remote = Overrides {
            provider: Some(ProviderKind::Remote),
            ..Default::default()
        };
        let r = remote.resolve().unwrap();
        assert!(r.provider_explicit);
        assert!(matches!(r.config.validate(), Err(CliError::Config(_))));
        let two_prompts = RunConfig {
            prompt: Some("0".into()),
            prompt_file: Some("p.txt".into()),
            ..Default::default()
        };
        assert!(two_prompts.validate().is_err());
        let cs = RunConfig {
            strategy: StrategyKind::ContrastiveSearch,
            ..Default::default()
        };
        assert!(cs.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig {
            prompt: Some("1 2".into()),
            ..Default::default()
        };
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }
}
