//! Evaluation of generated continuations.
//!
//! Input lines are either generation output records (JSON objects with
//! `prompt` and `tokens`) or whitespace-separated token ids, optionally
//! `prompt ids | continuation ids`. N-grams are counted over token ids, not
//! surface words. MAUVE and BERTScore need external embedding models and
//! are not computed; every report says so.

use std::collections::BTreeMap;
use std::path::Path;

use guard_decode::metrics::{coherence, diversity, repetition_profile, DiversityReport};
use guard_decode::TokenId;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::generate::OutputRecord;
use crate::source::{parse_token_ids, Source};

pub const NOT_COMPUTED: [&str; 2] = ["mauve", "bertscore"];

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub prompt: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Metric {
    Value(f64),
    Unavailable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub line: usize,
    pub tokens: usize,
    pub diversity: Metric,
    pub ngram_ratios: BTreeMap<usize, f64>,
    pub max_repeats: BTreeMap<usize, usize>,
    pub coherence: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ngram_unit: String,
    pub samples: Vec<SampleReport>,
    pub mean_diversity: Metric,
    pub mean_coherence: Metric,
    pub not_computed: Vec<String>,
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |m: String| CliError::Runtime(format!("{} line {}: {m}", path.display(), i + 1));
        let sample = if line.starts_with('{') {
            let r: OutputRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            Sample {
                prompt: r.prompt,
                tokens: r.tokens,
            }
        } else {
            let (prompt, cont) = line.split_once('|').unwrap_or(("", line));
            Sample {
                prompt: parse_token_ids(prompt).map_err(|e| bad(e.to_string()))?,
                tokens: parse_token_ids(cont).map_err(|e| bad(e.to_string()))?,
            }
        };
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(CliError::Runtime(format!(
            "{} has no samples",
            path.display()
        )));
    }
    Ok(samples)
}

fn mean(values: &[f64], missing: &str) -> Metric {
    if values.is_empty() {
        Metric::Unavailable(missing.into())
    } else {
        Metric::Value(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Scores `samples`; coherence only when `scorer` is given.
pub fn evaluate(samples: &[Sample], scorer: Option<&Source>) -> EvalReport {
    let mut reports = Vec::with_capacity(samples.len());
    let (mut divs, mut cohs) = (Vec::new(), Vec::new());
    for (i, s) in samples.iter().enumerate() {
        let (div, ratios) = match diversity(&s.tokens) {
            Ok(DiversityReport { per_n, div }) => {
                divs.push(div);
                let ratios = per_n.iter().map(|r| (r.n, r.ratio())).collect();
                (Metric::Value(div), ratios)
            }
            Err(e) => (Metric::Unavailable(e.to_string()), BTreeMap::new()),
        };
        let coh = match scorer {
            None => Metric::Unavailable("no scoring provider configured".into()),
            Some(_) if s.prompt.is_empty() => Metric::Unavailable("sample has no prompt".into()),
            Some(src) => match coherence(src.as_dyn(), &s.prompt, &s.tokens) {
                Ok(c) => {
                    cohs.push(c);
                    Metric::Value(c)
                }
                Err(e) => Metric::Unavailable(e.to_string()),
            },
        };
        reports.push(SampleReport {
            line: i + 1,
            tokens: s.tokens.len(),
            diversity: div,
            ngram_ratios: ratios,
            max_repeats: repetition_profile(&s.tokens).unwrap_or_default(),
            coherence: coh,
        });
    }
    EvalReport {
        ngram_unit: "token ids".into(),
        samples: reports,
        mean_diversity: mean(&divs, "no sample has 5 or more tokens"),
        mean_coherence: mean(
            &cohs,
            if scorer.is_some() {
                "no sample could be scored"
            } else {
                "no scoring provider configured"
            },
        ),
        not_computed: NOT_COMPUTED.iter().map(|s| s.to_string()).collect(),
    }
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let show = |m: &Metric| match m {
            Metric::Value(v) => format!("{v:.6}"),
            Metric::Unavailable(why) => format!("unavailable ({why})"),
        };
        let mut out = format!(
            "{:<6} {:>7} {:>12} {:>12}\n",
            "line", "tokens", "diversity", "coherence"
        );
        for s in &self.samples {
            out.push_str(&format!(
                "{:<6} {:>7} {:>12} {:>12}\n",
                s.line,
                s.tokens,
                match &s.diversity {
                    Metric::Value(v) => format!("{v:.6}"),
                    Metric::Unavailable(_) => "n/a".into(),
                },
                match &s.coherence {
                    Metric::Value(v) => format!("{v:.4}"),
                    Metric::Unavailable(_) => "n/a".into(),
                }
            ));
        }
        out.push_str(&format!("mean diversity: {}\n", show(&self.mean_diversity)));
        out.push_str(&format!("mean coherence: {}\n", show(&self.mean_coherence)));
        out.push_str(&format!(
            "n-grams over {}; not computed: {}\n",
            self.ngram_unit,
            self.not_computed.join(", ")
        ));
        out
    }
}

pub fn cmd_eval(cfg: &RunConfig, provider_explicit: bool, input: &Path) -> Result<(), CliError> {
    let scorer = if provider_explicit {
        Some(Source::build(cfg)?)
    } else {
        None
    };
    let samples = read_samples(input)?;
    let report = evaluate(&samples, scorer.as_ref());
    print!("{}", report.to_text());
    if let Some(path) = &cfg.report {
        std::fs::write(
            path,
            serde_json::to_string_pretty(&report).map_err(CliError::runtime)?,
        )?;
    }
    Ok(())
}
