use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::SyncSender;
use std::sync::Mutex;

use guard_decode::metrics::diversity;
use guard_decode::trace::{TraceRecord, TraceWriter};
use guard_decode::{generate_observed, GenerationRun, RunStatus, TokenId};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::source::{read_prompts, Source};

const TRACE_QUEUE: usize = 1024;

/// One line of the generation output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub index: usize,
    pub prompt: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub strategy: String,
    #[serde(flatten)]
    pub status: RunStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub index: usize,
    pub tokens: usize,
    #[serde(flatten)]
    pub status: RunStatus,
    pub diversity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateReport {
    pub strategy: String,
    pub max_tokens: usize,
    pub runs: Vec<RunSummary>,
    pub aborted: usize,
}

pub fn run_id(index: usize) -> String {
    format!("prompt-{index}")
}

/// Forwards per-stream trace records to the writer so that the file holds
/// run 0's records, then run 1's, and so on, whatever order the streams
/// finish in. The lowest unfinished stream writes through; later ones are
/// held back until it completes.
struct OrderedTrace {
    sender: SyncSender<TraceRecord>,
    state: Mutex<Pending>,
}

struct Pending {
    next: usize,
    held: BTreeMap<usize, (Vec<TraceRecord>, bool)>,
}

impl OrderedTrace {
    fn new(sender: SyncSender<TraceRecord>) -> Self {
        Self {
            sender,
            state: Mutex::new(Pending {
                next: 0,
                held: BTreeMap::new(),
            }),
        }
    }

    fn push(&self, stream: usize, record: TraceRecord) {
        let mut st = self.state.lock().expect("trace state");
        if stream == st.next {
            let _ = self.sender.send(record);
        } else {
            st.held.entry(stream).or_default().0.push(record);
        }
    }

    fn finish(&self, stream: usize) {
        let mut st = self.state.lock().expect("trace state");
        st.held.entry(stream).or_default().1 = true;
        loop {
            let next = st.next;
            let Some((records, done)) = st.held.remove(&next) else {
                break;
            };
            for r in records {
                let _ = self.sender.send(r);
            }
            if !done {
                st.held.insert(next, (Vec::new(), false));
                break;
            }
            st.next += 1;
        }
    }
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let source = Source::build(cfg)?;
    let prompts = read_prompts(cfg)?
        .iter()
        .map(|line| source.parse_prompt(line))
        .collect::<Result<Vec<_>, _>>()?;
    for i in 0..prompts.len() {
        cfg.strategy_config(cfg.strategy, i)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let mut output: Box<dyn Write> = match &cfg.output {
        Some(path) => Box::new(
            File::create(path)
                .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?,
        ),
        None => Box::new(std::io::stdout().lock()),
    };
    let writer = match &cfg.trace {
        Some(path) => Some(TraceWriter::spawn(File::create(path)?, TRACE_QUEUE)),
        None => None,
    };
    let ordered = writer.as_ref().map(|w| OrderedTrace::new(w.sender()));

    let runs = run_streams(cfg, &source, &prompts, ordered.as_ref());
    drop(ordered);
    if let Some(w) = writer {
        w.finish()?;
    }

    let mut summaries = Vec::with_capacity(runs.len());
    for (index, run) in runs.iter().enumerate() {
        let record = OutputRecord {
            index,
            prompt: run.prompt.clone(),
            tokens: run.tokens.clone(),
            text: source.render(&run.tokens),
            strategy: run.strategy.to_string(),
            status: run.status.clone(),
        };
        writeln!(
            output,
            "{}",
            serde_json::to_string(&record).map_err(CliError::runtime)?
        )?;
        summaries.push(RunSummary {
            index,
            tokens: run.tokens.len(),
            status: run.status.clone(),
            diversity: diversity(&run.tokens).ok().map(|d| d.div),
        });
        eprintln!(
            "{}: {} tokens, {:?}, provider {:.3} ms, strategy {:.3} ms",
            run_id(index),
            run.tokens.len(),
            run.status,
            run.timings.provider.as_secs_f64() * 1e3,
            run.timings.strategy.as_secs_f64() * 1e3,
        );
    }
    output.flush()?;
    let aborted = runs.iter().filter(|r| r.is_aborted()).count();
    let report = GenerateReport {
        strategy: cfg.strategy_config(cfg.strategy, 0).name().to_string(),
        max_tokens: cfg.max_tokens,
        runs: summaries,
        aborted,
    };
    if let Some(path) = &cfg.report {
        std::fs::write(
            path,
            serde_json::to_string_pretty(&report).map_err(CliError::runtime)?,
        )?;
    }
    if aborted > 0 {
        let first = runs.iter().find(|r| r.is_aborted()).expect("counted above");
        return Err(CliError::Runtime(format!(
            "{aborted} of {} runs aborted; first: {:?}",
            runs.len(),
            first.status
        )));
    }
    Ok(())
}

/// Runs every prompt, several streams at a time; results come back in
/// prompt order.
fn run_streams(
    cfg: &RunConfig,
    source: &Source,
    prompts: &[Vec<TokenId>],
    trace: Option<&OrderedTrace>,
) -> Vec<GenerationRun> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(prompts.len())
        .max(1);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<GenerationRun>>> = Mutex::new(vec![None; prompts.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= prompts.len() {
                    break;
                }
                let run = run_one(cfg, source, &prompts[i], i, trace);
                results.lock().expect("results")[i] = Some(run);
            });
        }
    });
    results
        .into_inner()
        .expect("results")
        .into_iter()
        .map(|r| r.expect("every stream finished"))
        .collect()
}

fn run_one(
    cfg: &RunConfig,
    source: &Source,
    prompt: &[TokenId],
    index: usize,
    trace: Option<&OrderedTrace>,
) -> GenerationRun {
    let id = run_id(index);
    let mut strategy = cfg
        .strategy_config(cfg.strategy, index)
        .build()
        .expect("validated before starting");
    let run = generate_observed(
        source.as_dyn(),
        prompt,
        strategy.as_mut(),
        cfg.max_tokens,
        &mut |sel| {
            if let (Some(t), Some(d)) = (trace, &sel.diagnostics) {
                t.push(index, TraceRecord::new(id.clone(), d));
            }
        },
    );
    if let Some(t) = trace {
        t.finish(index);
    }
    run
}

#[cfg(test)]
mod tests {
    use super::*;
    use guard_decode::trace::parse;

    fn rec(run: usize, step: usize) -> TraceRecord {
        TraceRecord {
            run_id: run_id(run),
            step,
            token: 0,
            h_loc: 0.0,
            h_glob: 0.0,
            delta_loc: 0.0,
            delta_glob: 0.0,
            q: 1.0,
            lambda_k: 0.0,
            k_t: 10,
            alpha_t: 0.5,
            chosen_score: 1.0,
        }
    }

    #[test]
    fn ordered_trace_writes_runs_in_prompt_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ndjson");
        let writer = TraceWriter::spawn(File::create(&path).unwrap(), 2);
        let ordered = OrderedTrace::new(writer.sender());
        ordered.push(2, rec(2, 1));
        ordered.push(1, rec(1, 1));
        ordered.push(0, rec(0, 1));
        ordered.finish(2);
        ordered.push(1, rec(1, 2));
        ordered.push(0, rec(0, 2));
        ordered.finish(0);
        ordered.push(1, rec(1, 3));
        ordered.finish(1);
        drop(ordered);
        assert_eq!(writer.finish().unwrap(), 6);
        let back = parse(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let order: Vec<(String, usize)> = back.iter().map(|r| (r.run_id.clone(), r.step)).collect();
        let expected: Vec<(String, usize)> = [(0, 1), (0, 2), (1, 1), (1, 2), (1, 3), (2, 1)]
            .iter()
            .map(|&(r, s)| (run_id(r), s))
            .collect();
        assert_eq!(order, expected);
    }
}
