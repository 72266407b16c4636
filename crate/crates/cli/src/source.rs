use std::path::Path;

use guard_decode::provider::{DistributionSource, RemoteProvider, SyntheticModel};
use guard_decode::TokenId;

use crate::config::{ProviderKind, RunConfig, TransitionsKind};
use crate::error::CliError;

/// The configured distribution source.
pub enum Source {
    Synthetic(SyntheticModel),
    Remote(RemoteProvider),
}

impl Source {
    pub fn build(cfg: &RunConfig) -> Result<Self, CliError> {
        match cfg.provider.kind {
            ProviderKind::Remote => {
                let remote = RemoteProvider::new(cfg.remote_config()?)
                    .map_err(|e| CliError::Config(e.to_string()))?;
                Ok(Self::Remote(remote))
            }
            ProviderKind::Synthetic => {
                let model = match &cfg.provider.model_file {
                    Some(path) => load_model(path)?,
                    None => synthetic_from(cfg)?,
                };
                Ok(Self::Synthetic(model))
            }
        }
    }

    pub fn as_dyn(&self) -> &dyn DistributionSource {
        match self {
            Self::Synthetic(m) => m,
            Self::Remote(r) => r,
        }
    }

    /// Synthetic prompts are token ids; remote prompts are text.
    pub fn parse_prompt(&self, line: &str) -> Result<Vec<TokenId>, CliError> {
        match self {
            Self::Remote(r) => Ok(vec![r.encode_text(line)]),
            Self::Synthetic(m) => {
                let tokens = parse_token_ids(line)?;
                if tokens.is_empty() {
                    return Err(CliError::Config("empty prompt".into()));
                }
                if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= m.vocab_size()) {
                    return Err(CliError::Config(format!(
                        "prompt token {bad} is outside the synthetic vocabulary of {}",
                        m.vocab_size()
                    )));
                }
                Ok(tokens)
            }
        }
    }

    /// Surface text of `tokens`, remote sources only.
    pub fn render(&self, tokens: &[TokenId]) -> Option<String> {
        match self {
            Self::Remote(r) => r.decode(tokens).ok(),
            Self::Synthetic(_) => None,
        }
    }
}

pub fn load_model(path: &Path) -> Result<SyntheticModel, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read model {}: {e}", path.display())))?;
    SyntheticModel::from_json(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn synthetic_from(cfg: &RunConfig) -> Result<SyntheticModel, CliError> {
    let s = &cfg.synthetic;
    let model = match s.transitions {
        TransitionsKind::Markov => SyntheticModel::markov(s.vocab_size, s.seed),
        TransitionsKind::Looping => SyntheticModel::looping(s.vocab_size, s.bias, s.seed),
    }
    .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(match s.representation_dim {
        Some(dim) => model.with_representations(dim, s.seed),
        None => model,
    })
}

pub fn parse_token_ids(text: &str) -> Result<Vec<TokenId>, CliError> {
    text.split_whitespace()
        .map(|t| {
            t.parse::<TokenId>()
                .map_err(|_| CliError::Config(format!("not a token id: {t:?}")))
        })
        .collect()
}

/// Prompt lines from the inline prompt or the prompt file.
pub fn read_prompts(cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    match (&cfg.prompt, &cfg.prompt_file) {
        (Some(p), None) => Ok(vec![p.clone()]),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read prompt file {}: {e}", path.display()))
            })?;
            let lines: Vec<String> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(str::to_string)
                .collect();
            if lines.is_empty() {
                return Err(CliError::Config(format!(
                    "{} has no prompts",
                    path.display()
                )));
            }
            Ok(lines)
        }
        (None, None) => Err(CliError::Config(
            "no prompt: pass --prompt or --prompt-file".into(),
        )),
        (Some(_), Some(_)) => Err(CliError::Config(
            "give exactly one prompt source: prompt or prompt_file".into(),
        )),
    }
}
