//! Unoptimized, line-by-line GUARD loop used as a test oracle.
//!
//! Shares nothing with the optimized path except the `Distribution` type:
//! the global entropy is re-summed from scratch every step, medians sort
//! fresh copies, candidates come from a full sort. The numeric guards
//! (clamped `arctanh`, `α` kept inside `(0, 1)`, round-half-up `k_t`, lowest
//! id on ties, median window excluding the current step) are restated here.

use std::collections::HashMap;

use crate::entropy::Distribution;
use crate::provider::DistributionSource;
use crate::TokenId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceStep {
    pub h_loc: f64,
    pub h_glob: f64,
    pub delta_loc: f64,
    pub delta_glob: f64,
    pub q: f64,
    pub lambda_k: f64,
    pub k_t: usize,
    pub alpha_t: f64,
    pub token: TokenId,
}

fn med(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn arctanh(x: f64) -> f64 {
    let x = x.clamp(-1.0 + 1e-6, 1.0 - 1e-6);
    0.5 * ((1.0 + x) / (1.0 - x)).ln()
}

/// `(H_glob,t, δ_loc, δ_glob, q)` for an entropy history whose last entry
/// is the current step.
pub fn reference_deltas(
    entropy_history: &[f64],
    w: usize,
    lambda: f64,
    log_v: f64,
) -> (f64, f64, f64, f64) {
    let eps = 1e-6;
    let t = entropy_history.len();
    let h_loc = entropy_history[t - 1];
    let big_t = t;
    let mut numerator = 0.0;
    let mut denominator = 0.0;
    for i in 1..=big_t {
        numerator += lambda.powi((big_t - i) as i32) * entropy_history[i - 1];
        denominator += lambda.powi((big_t - i) as i32);
    }
    let h_glob = numerator / denominator;

    if t < w {
        let delta_global = arctanh((h_loc - med(entropy_history)) / log_v);
        return (h_glob, 0.0, delta_global, 1.0);
    }
    // H_{t−w} .. H_{t−1}, clipped at the start of the history
    let lo = if big_t > w { big_t - w } else { 1 };
    let recent: Vec<f64> = (lo..big_t).map(|i| entropy_history[i - 1]).collect();
    let med_h_recent = med(&recent);
    let med_diff = med_h_recent - h_glob;
    let prev = entropy_history[big_t - 2];
    let r_change = (h_loc - prev).abs() / (prev + eps);
    let r_diff = med_diff.abs() / (h_glob + eps);
    let q = 1.0 + r_change + r_diff;
    let delta_loc = q * arctanh((h_loc - med_h_recent) / log_v);
    let delta_global = q * arctanh(med_diff / log_v);
    (h_glob, delta_loc, delta_global, q)
}

/// One reference step given the entropy history *including* the current
/// step (1-indexed in the comments: `history[t]` is the current value).
pub fn reference_step(
    distribution: &Distribution,
    entropy_history: &mut Vec<f64>,
    tokencounts: &mut HashMap<TokenId, u32>,
    w: usize,
    lambda: f64,
) -> ReferenceStep {
    let eps = 1e-6;
    let probs = distribution.probs();
    let v = probs.len();
    let mut h_loc = 0.0;
    for &p in probs {
        if p > 0.0 {
            h_loc -= p * p.ln();
        }
    }
    let h_loc = if h_loc < 0.0 { 0.0 } else { h_loc };
    entropy_history.push(h_loc);
    let log_v = (v as f64).ln();

    let (h_glob, delta_loc, delta_global, q) = reference_deltas(entropy_history, w, lambda, log_v);

    let lambda_k = delta_loc.abs() / (delta_loc.abs() + delta_global.abs() + eps);
    let k_signal = (lambda_k * delta_loc + (1.0 - lambda_k) * delta_global).exp();
    let k_cont = 10.0 * (1.0 - 1.0 / (k_signal + 1.0)) + 5.0;
    let k_signal_alpha =
        (lambda_k * delta_loc * k_cont.ln() + (1.0 - lambda_k) * delta_global * k_cont.ln()).exp();
    let alpha_t = (1.0 - 1.0 / (k_signal_alpha + 1.0)).clamp(f64::EPSILON, 1.0 - f64::EPSILON);
    let k_t = ((k_cont + 0.5).floor() as usize).clamp(5, 15);

    // full sort: probability descending, token id ascending; tail excluded
    let mut ranked: Vec<(TokenId, f64)> = (0..v)
        .filter_map(|pos| distribution.token_at(pos).map(|id| (id, probs[pos])))
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let candidates = &ranked[..k_t.min(ranked.len())];

    let mut next_token = candidates[0].0;
    let mut best = f64::NEG_INFINITY;
    for &(token, p) in candidates {
        let count = *tokencounts.get(&token).unwrap_or(&0);
        let score = p * alpha_t.powi(count as i32);
        if score > best || (score == best && token < next_token) {
            best = score;
            next_token = token;
        }
    }
    *tokencounts.entry(next_token).or_insert(0) += 1;

    ReferenceStep {
        h_loc,
        h_glob,
        delta_loc,
        delta_glob: delta_global,
        q,
        lambda_k,
        k_t,
        alpha_t,
        token: next_token,
    }
}

/// Reference `GENERATETEXT`: returns the continuation and per-step values.
pub fn reference_generate<S: DistributionSource + ?Sized>(
    model: &S,
    prompt: &[TokenId],
    max_tokens: usize,
    w: usize,
    lambda: f64,
) -> Vec<ReferenceStep> {
    let mut output = prompt.to_vec();
    let mut entropy_history = Vec::new();
    let mut tokencounts = HashMap::new();
    let mut steps = Vec::with_capacity(max_tokens);
    for _ in 1..=max_tokens {
        let distribution = model
            .next_distribution(&output)
            .expect("reference model must not fail");
        let step = reference_step(
            &distribution,
            &mut entropy_history,
            &mut tokencounts,
            w,
            lambda,
        );
        output.push(step.token);
        steps.push(step);
    }
    steps
}

/// Checks an optimized run against reference steps: tokens must match
/// exactly, diagnostics to relative tolerance `tol`. Returns the first
/// mismatch as a message.
pub fn compare(
    tokens: &[TokenId],
    diagnostics: &[crate::guard::StepDiagnostics],
    reference: &[ReferenceStep],
    tol: f64,
) -> Result<(), String> {
    if tokens.len() != reference.len() || diagnostics.len() != reference.len() {
        return Err(format!(
            "length: {} tokens / {} diagnostics vs {} reference steps",
            tokens.len(),
            diagnostics.len(),
            reference.len()
        ));
    }
    let close = |a: f64, b: f64| (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()));
    for (i, ((&tok, d), r)) in tokens.iter().zip(diagnostics).zip(reference).enumerate() {
        let fields = [
            ("h_loc", d.h_loc, r.h_loc),
            ("h_glob", d.h_glob, r.h_glob),
            ("delta_loc", d.delta_loc, r.delta_loc),
            ("delta_glob", d.delta_glob, r.delta_glob),
            ("q", d.q, r.q),
            ("lambda_k", d.lambda_k, r.lambda_k),
            ("alpha_t", d.alpha_t, r.alpha_t),
        ];
        if let Some((name, a, b)) = fields.iter().find(|(_, a, b)| !close(*a, *b)) {
            return Err(format!("step {}: {name} {a} vs reference {b}", i + 1));
        }
        if d.k_t != r.k_t || tok != r.token || d.chosen_token != tok {
            return Err(format!(
                "step {}: (k_t, token) ({}, {tok}) vs reference ({}, {})",
                i + 1,
                d.k_t,
                r.k_t,
                r.token
            ));
        }
    }
    Ok(())
}
