//! Client for completion servers that expose top-M log-probabilities.
//!
//! Wire shape (the common completions-with-logprobs JSON):
//!
//! * next token: `POST <endpoint>/v1/completions` with
//!   `{"model", "prompt", "max_tokens": 1, "logprobs": M, "echo": false}`,
//!   reading `choices[0].logprobs.top_logprobs[0]` (token string → logprob).
//! * scoring: the same endpoint with `"echo": true`, reading
//!   `choices[0].logprobs.{tokens, token_logprobs, text_offset}` for the
//!   echoed continuation.
//!
//! Token ids are opaque: every distinct token string the server returns is
//! interned to a fresh id. The returned [`Distribution`] holds the `M`
//! exponentiated log-probabilities followed by a tail bucket carrying the
//! residual mass. Entropy over that view under-estimates the full-vocabulary
//! entropy; raise `top_logprobs` to tighten it.

use std::collections::HashMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Capabilities, DistributionSource, ProviderError};
use crate::entropy::Distribution;
use crate::TokenId;

/// Environment variable holding the bearer token, if any.
pub const API_KEY_ENV: &str = "PROVIDER_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteProviderConfig {
    /// Base URL, e.g. `http://127.0.0.1:8080`. A full `/v1/completions`
    /// URL is accepted too.
    pub endpoint: String,
    #[serde(default)]
    pub model: String,
    #[serde(default = "default_top_logprobs")]
    pub top_logprobs: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub max_context: Option<usize>,
}

fn default_top_logprobs() -> usize {
    20
}
fn default_timeout_ms() -> u64 {
    30_000
}
fn default_retries() -> u32 {
    2
}
fn default_max_in_flight() -> usize {
    4
}

impl RemoteProviderConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: String::new(),
            top_logprobs: default_top_logprobs(),
            timeout_ms: default_timeout_ms(),
            retries: default_retries(),
            max_in_flight: default_max_in_flight(),
            max_context: None,
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        let invalid = |m: String| Err(ProviderError::InvalidInput(m));
        if self.endpoint.trim().is_empty() {
            return invalid("remote provider needs an endpoint".into());
        }
        if let Err(e) = reqwest::Url::parse(&self.completions_url()) {
            return invalid(format!("bad endpoint {:?}: {e}", self.endpoint));
        }
        if self.top_logprobs < 2 {
            return invalid(format!(
                "top_logprobs must be ≥ 2, got {}",
                self.top_logprobs
            ));
        }
        if self.timeout_ms == 0 {
            return invalid("timeout must be positive".into());
        }
        if self.max_in_flight == 0 {
            return invalid("max_in_flight must be positive".into());
        }
        Ok(())
    }

    pub fn completions_url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with("/v1/completions") {
            base.to_string()
        } else {
            format!("{base}/v1/completions")
        }
    }
}

#[derive(Debug, Default)]
struct Vocab {
    strings: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    fn intern(&mut self, s: &str) -> TokenId {
        if let Some(&id) = self.index.get(s) {
            return id;
        }
        let id = self.strings.len() as TokenId;
        self.strings.push(s.to_owned());
        self.index.insert(s.to_owned(), id);
        id
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlight {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap();
        while *active >= self.max {
            active = self.freed.wait(active).unwrap();
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

enum AttemptError {
    Timeout,
    Transport(String),
    Malformed(String),
}

pub struct RemoteProvider {
    cfg: RemoteProviderConfig,
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    vocab: Mutex<Vocab>,
    in_flight: InFlight,
}

impl std::fmt::Debug for RemoteProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteProvider")
            .field("url", &self.url)
            .field("model", &self.cfg.model)
            .field("top_logprobs", &self.cfg.top_logprobs)
            .finish_non_exhaustive()
    }
}

impl RemoteProvider {
    /// Builds a client, reading the bearer token from `PROVIDER_API_KEY`.
    pub fn new(cfg: RemoteProviderConfig) -> Result<Self, ProviderError> {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_api_key(cfg, key)
    }

    pub fn with_api_key(
        cfg: RemoteProviderConfig,
        api_key: Option<String>,
    ) -> Result<Self, ProviderError> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| ProviderError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self {
            url: cfg.completions_url(),
            in_flight: InFlight {
                max: cfg.max_in_flight,
                active: Mutex::new(0),
                freed: Condvar::new(),
            },
            cfg,
            api_key,
            client,
            vocab: Mutex::new(Vocab::default()),
        })
    }

    pub fn config(&self) -> &RemoteProviderConfig {
        &self.cfg
    }

    /// Interns `text` as a single opaque token, used for prompts.
    pub fn encode_text(&self, text: &str) -> TokenId {
        self.vocab.lock().unwrap().intern(text)
    }

    pub fn token_text(&self, token: TokenId) -> Option<String> {
        self.vocab
            .lock()
            .unwrap()
            .strings
            .get(token as usize)
            .cloned()
    }

    /// Concatenated surface text of `tokens`.
    pub fn decode(&self, tokens: &[TokenId]) -> Result<String, ProviderError> {
        let vocab = self.vocab.lock().unwrap();
        tokens
            .iter()
            .map(|&t| {
                vocab
                    .strings
                    .get(t as usize)
                    .map(String::as_str)
                    .ok_or_else(|| ProviderError::InvalidInput(format!("unknown token id {t}")))
            })
            .collect()
    }

    fn post_with_retries<T>(
        &self,
        body: &Value,
        parse: impl Fn(&Value) -> Result<T, String>,
    ) -> Result<T, ProviderError> {
        let _permit = self.in_flight.acquire();
        let max_attempts = self.cfg.retries + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let outcome = self
                .post_once(body)
                .and_then(|v| parse(&v).map_err(AttemptError::Malformed));
            match outcome {
                Ok(value) => return Ok(value),
                Err(err) if attempt >= max_attempts => {
                    return Err(match err {
                        AttemptError::Timeout => ProviderError::Timeout { attempts: attempt },
                        AttemptError::Transport(message) => ProviderError::Transport {
                            attempts: attempt,
                            message,
                        },
                        AttemptError::Malformed(message) => ProviderError::Malformed {
                            attempts: attempt,
                            message,
                        },
                    })
                }
                Err(_) => std::thread::sleep(Duration::from_millis(25 * u64::from(attempt))),
            }
        }
    }

    fn post_once(&self, body: &Value) -> Result<Value, AttemptError> {
        let mut request = self.client.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(classify)?;
        let status = response.status();
        let text = response.text().map_err(classify)?;
        if !status.is_success() {
            return Err(AttemptError::Transport(format!("HTTP {status}: {text}")));
        }
        serde_json::from_str(&text).map_err(|e| AttemptError::Malformed(e.to_string()))
    }

    fn check_context(&self, context: &[TokenId]) -> Result<(), ProviderError> {
        if context.is_empty() {
            return Err(ProviderError::InvalidInput("empty context".into()));
        }
        match self.cfg.max_context {
            Some(max) if context.len() > max => Err(ProviderError::ContextOverflow {
                len: context.len(),
                max,
            }),
            _ => Ok(()),
        }
    }
}

fn classify(err: reqwest::Error) -> AttemptError {
    if err.is_timeout() {
        AttemptError::Timeout
    } else {
        AttemptError::Transport(err.to_string())
    }
}

fn logprobs_field(v: &Value) -> Result<&Value, String> {
    v.pointer("/choices/0/logprobs")
        .filter(|l| l.is_object())
        .ok_or_else(|| "missing choices[0].logprobs".to_string())
}

/// Reads `top_logprobs[0]` into `(token string, probability)` pairs sorted
/// by descending probability, then token string.
fn parse_top_logprobs(v: &Value) -> Result<Vec<(String, f64)>, String> {
    let top = logprobs_field(v)?
        .pointer("/top_logprobs/0")
        .and_then(Value::as_object)
        .ok_or_else(|| "missing top_logprobs[0] object".to_string())?;
    if top.is_empty() {
        return Err("empty top_logprobs".into());
    }
    let mut entries = Vec::with_capacity(top.len());
    for (token, lp) in top {
        let lp = lp
            .as_f64()
            .filter(|x| !x.is_nan())
            .ok_or_else(|| format!("logprob for {token:?} is not a number"))?;
        entries.push((token.clone(), lp.min(0.0).exp()));
    }
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(entries)
}

fn parse_echo(v: &Value) -> Result<(Vec<Option<f64>>, Vec<usize>), String> {
    let lp = logprobs_field(v)?;
    let logprobs = lp
        .get("token_logprobs")
        .and_then(Value::as_array)
        .ok_or("missing token_logprobs")?
        .iter()
        .map(Value::as_f64)
        .collect::<Vec<_>>();
    let offsets = lp
        .get("text_offset")
        .and_then(Value::as_array)
        .ok_or("missing text_offset")?
        .iter()
        .map(|o| o.as_u64().map(|x| x as usize).ok_or("bad text_offset"))
        .collect::<Result<Vec<_>, _>>()?;
    if offsets.len() != logprobs.len() {
        return Err("token_logprobs and text_offset lengths differ".into());
    }
    Ok((logprobs, offsets))
}

impl DistributionSource for RemoteProvider {
    fn vocab_size(&self) -> usize {
        self.cfg.top_logprobs + 1
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            full_distribution: false,
            top_m_logprobs: Some(self.cfg.top_logprobs),
            representation_dim: None,
            echo_scoring: true,
        }
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<Distribution, ProviderError> {
        self.check_context(context)?;
        let body = json!({
            "model": self.cfg.model,
            "prompt": self.decode(context)?,
            "max_tokens": 1,
            "logprobs": self.cfg.top_logprobs,
            "echo": false,
        });
        let entries = self.post_with_retries(&body, parse_top_logprobs)?;
        let mass: f64 = entries.iter().map(|e| e.1).sum();
        let scale = if mass > 1.0 { 1.0 / mass } else { 1.0 };
        let tail = (1.0 - mass * scale).max(0.0);
        let mut vocab = self.vocab.lock().unwrap();
        let (ids, probs): (Vec<TokenId>, Vec<f64>) = entries
            .iter()
            .map(|(tok, p)| (vocab.intern(tok), p * scale))
            .unzip();
        Ok(Distribution::with_ids(ids, probs, Some(tail))?)
    }

    fn score_continuation(
        &self,
        prompt: &[TokenId],
        continuation: &[TokenId],
    ) -> Result<f64, ProviderError> {
        if continuation.is_empty() {
            return Err(ProviderError::InvalidInput("empty continuation".into()));
        }
        let prompt_text = self.decode(prompt)?;
        let full = format!("{prompt_text}{}", self.decode(continuation)?);
        let body = json!({
            "model": self.cfg.model,
            "prompt": full,
            "max_tokens": 1,
            "logprobs": 0,
            "echo": true,
        });
        let (start, end) = (prompt_text.len(), full.len());
        self.post_with_retries(&body, |v| {
            let (logprobs, offsets) = parse_echo(v)?;
            let scored: Vec<f64> = logprobs
                .iter()
                .zip(&offsets)
                .filter(|(_, &off)| off >= start && off < end)
                .filter_map(|(lp, _)| *lp)
                .collect();
            if scored.is_empty() {
                return Err("no scored continuation tokens in echo".into());
            }
            Ok(scored.iter().sum::<f64>() / scored.len() as f64)
        })
    }
}
