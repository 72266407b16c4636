use std::time::Instant;

use guard_decode::entropy::{local_entropy, Distribution};
use guard_decode::metrics::diversity;
use guard_decode::provider::{DistributionSource, SyntheticModel};
use guard_decode::strategy::{ContrastiveSearch, Strategy, StrategyConfig};
use guard_decode::trace::total_variation;
use guard_decode::{generate, generate_with, GuardConfig, RunStatus, TokenId};

#[test]
fn guard_out_diversifies_greedy_on_a_looping_model() {
    let (mut guard_div, mut greedy_div) = (0.0, 0.0);
    for seed in 0..10 {
        let model = SyntheticModel::looping(32, 0.9, seed).unwrap();
        let prompt = [seed as TokenId % 32];
        let g = generate(&model, &prompt, &GuardConfig::default());
        let mut greedy = StrategyConfig::Greedy.build().unwrap();
        let b = generate_with(&model, &prompt, greedy.as_mut(), 256);
        let (gd, bd) = (
            diversity(&g.tokens).unwrap().div,
            diversity(&b.tokens).unwrap().div,
        );
        assert!(gd > bd, "seed {seed}: guard {gd} vs greedy {bd}");
        guard_div += gd;
        greedy_div += bd;
    }
    assert!(guard_div > 5.0 * greedy_div);
}

#[test]
fn forced_chain_is_reproduced_exactly() {
    let model = SyntheticModel::forced_chain(&[3, 0, 1, 2]).unwrap();
    let run = generate(
        &model,
        &[0],
        &GuardConfig {
            max_tokens: 8,
            ..Default::default()
        },
    );
    assert_eq!(run.tokens, vec![3, 2, 1, 0, 3, 2, 1, 0]);
    assert_eq!(run.status, RunStatus::MaxTokens);
}

#[test]
fn guard_runs_are_deterministic() {
    let model = SyntheticModel::markov(48, 9).unwrap();
    let a = generate(&model, &[1, 2], &GuardConfig::default());
    let b = generate(&model, &[1, 2], &GuardConfig::default());
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.diagnostics, b.diagnostics);
    assert_eq!(a.tokens.len(), 256);
}

#[test]
fn global_entropy_is_smoother_than_local() {
    for seed in 0..20 {
        let model = SyntheticModel::markov(64, seed).unwrap();
        let run = generate(&model, &[0], &GuardConfig::default());
        let h_loc: Vec<f64> = run.diagnostics.iter().map(|d| d.h_loc).collect();
        let h_glob: Vec<f64> = run.diagnostics.iter().map(|d| d.h_glob).collect();
        assert!(total_variation(&h_glob) <= total_variation(&h_loc) + 1e-12 * h_loc.len() as f64);
    }
}

#[test]
fn truncated_view_underestimates_entropy() {
    let model = SyntheticModel::markov(64, 4).unwrap();
    for token in 0..64 {
        let full = model.next_distribution(&[token]).unwrap();
        let h_full = local_entropy(&full);
        for m in [2, 5, 20, 40] {
            let top = full.top_k(m);
            let mass: f64 = top.iter().map(|&(_, p)| p).sum();
            let view = Distribution::with_ids(
                top.iter().map(|&(t, _)| t).collect(),
                top.iter().map(|&(_, p)| p).collect(),
                Some((1.0 - mass).max(0.0)),
            )
            .unwrap();
            assert!(
                local_entropy(&view) <= h_full + 1e-12,
                "token {token}, M = {m}"
            );
        }
    }
}

fn cs_cost_ns(model: &SyntheticModel, context: usize) -> f64 {
    let reps = model.representations();
    let prompt: Vec<TokenId> = (0..context).map(|i| (i % 64) as TokenId).collect();
    let dist = model.next_distribution(&prompt).unwrap();
    let mut samples = Vec::new();
    for _ in 0..30 {
        let mut cs = ContrastiveSearch::new(10, 0.6);
        cs.begin(&prompt, reps).unwrap();
        let started = Instant::now();
        cs.select(&dist, reps).unwrap();
        samples.push(started.elapsed().as_nanos() as f64);
    }
    samples.sort_by(f64::total_cmp);
    samples[samples.len() / 2]
}

#[test]
fn contrastive_cost_grows_with_context() {
    let model = SyntheticModel::markov(64, 2)
        .unwrap()
        .with_representations(512, 2);
    let short = cs_cost_ns(&model, 64);
    let long = cs_cost_ns(&model, 1024);
    // 16× the context: linear growth would be 16×
    assert!(long > 4.0 * short, "{short} ns vs {long} ns");
}
