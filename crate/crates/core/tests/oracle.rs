use guard_decode::guard::{glocal_deltas, GuardState};
use guard_decode::provider::SyntheticModel;
use guard_decode::reference::{compare, reference_deltas, reference_generate};
use guard_decode::{generate, GuardConfig, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn check(model: &SyntheticModel, prompt: &[TokenId], cfg: &GuardConfig) {
    let run = generate(model, prompt, cfg);
    assert!(!run.is_aborted(), "{:?}", run.status);
    let oracle = reference_generate(model, prompt, cfg.max_tokens, cfg.window, cfg.lambda);
    if let Err(e) = compare(&run.tokens, &run.diagnostics, &oracle, 1e-9) {
        panic!("{e}");
    }
}

#[test]
fn markov_v8_64_steps() {
    let model = SyntheticModel::markov(8, 11).unwrap();
    let cfg = GuardConfig {
        max_tokens: 64,
        ..Default::default()
    };
    for start in 0..8 {
        check(&model, &[start], &cfg);
    }
}

#[test]
fn randomized_models_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for run in 0..40u64 {
        let vocab = rng.random_range(2..=64);
        let model = if run % 3 == 0 {
            SyntheticModel::looping(vocab, rng.random_range(0.3..0.95), run).unwrap()
        } else {
            SyntheticModel::markov(vocab, run).unwrap()
        };
        let prompt: Vec<TokenId> = (0..rng.random_range(1..5))
            .map(|_| rng.random_range(0..vocab as TokenId))
            .collect();
        let cfg = GuardConfig {
            lambda: [0.5, 0.91, 0.95, 0.99, 1.0][run as usize % 5],
            window: rng.random_range(2..=9),
            max_tokens: 128,
            ..Default::default()
        };
        check(&model, &prompt, &cfg);
    }
}

#[test]
fn spike_after_flat_history() {
    let history = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0];
    let cfg = GuardConfig::default();
    let log_v = 16f64.ln();
    let mut state = GuardState::new(&cfg);
    let mut last = None;
    for (i, &h) in history.iter().enumerate() {
        state.observe(h, log_v, &cfg);
        let d = glocal_deltas(&mut state, h, log_v, &cfg);
        let (_, dl, dg, q) = reference_deltas(&history[..=i], cfg.window, cfg.lambda, log_v);
        assert!(
            (d.delta_loc - dl).abs() < 1e-12,
            "step {i}: {} vs {dl}",
            d.delta_loc
        );
        assert!(
            (d.delta_glob - dg).abs() < 1e-12,
            "step {i}: {} vs {dg}",
            d.delta_glob
        );
        assert!((d.q - q).abs() < 1e-12);
        last = Some(d);
    }
    let d = last.unwrap();
    let r_change = 1.0 / (1.0 + 1e-6);
    // med of the prior window is 1, H_glob,8 sits just above it
    let num: f64 = (0..8)
        .map(|i| 0.95f64.powi(i) * history[7 - i as usize])
        .sum();
    let den: f64 = (0..8).map(|i| 0.95f64.powi(i)).sum();
    let h_glob = num / den;
    let q = 1.0 + r_change + (1.0 - h_glob).abs() / (h_glob + 1e-6);
    assert!((d.q - q).abs() < 1e-12);
    assert!(d.delta_loc > 0.0 && d.delta_glob < 0.0);
}
