use guard_decode::bench::{bench_strategies, BenchOptions};
use guard_decode::provider::SyntheticModel;

use crate::config::RunConfig;
use crate::error::CliError;

pub fn bench_options(cfg: &RunConfig) -> BenchOptions {
    let b = &cfg.bench;
    BenchOptions {
        context_len: b.context_len,
        steps_per_rep: b.steps_per_rep,
        repetitions: b.repetitions,
        warmup: b.warmup,
        stories: b.stories,
        story_tokens: cfg.max_tokens,
        seed: cfg.seed,
    }
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let b = &cfg.bench;
    let strategies: Vec<_> = b
        .strategies
        .iter()
        .map(|&k| cfg.strategy_config(k, 0))
        .collect();
    for s in &strategies {
        s.validate().map_err(|e| CliError::Config(e.to_string()))?;
    }
    let model = SyntheticModel::markov(b.vocab_size, cfg.seed)
        .map_err(|e| CliError::Config(e.to_string()))?
        .with_representations(b.representation_dim, cfg.seed);
    let report =
        bench_strategies(&strategies, &model, &bench_options(cfg)).map_err(|e| match e {
            guard_decode::bench::BenchError::TooFewTokens(_)
            | guard_decode::bench::BenchError::TooFewWarmup(_) => CliError::Config(e.to_string()),
            other => CliError::runtime(other),
        })?;
    print!("{}", report.to_table());
    println!(
        "representation dim {}; model forward cost excluded",
        b.representation_dim
    );
    if let Some(path) = &cfg.report {
        std::fs::write(
            path,
            serde_json::to_string_pretty(&report).map_err(CliError::runtime)?,
        )?;
    }
    Ok(())
}
