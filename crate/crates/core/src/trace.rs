//! Per-step trace records, persisted as newline-delimited JSON: one object
//! per generated token.
//!
//! ```text
//! {"run_id":"run-0","step":1,"token":17,"h_loc":2.31,"h_glob":2.31,"delta_loc":0.0,"delta_glob":0.0,"q":1.0,"lambda_k":0.0,"k_t":10,"alpha_t":0.5,"chosen_score":0.12}
//! ```
//!
//! Floats are written in shortest round-trip form and parsed exactly, so
//! `parse(emit(records)) == records` bit for bit.

use std::collections::HashMap;
use std::io::{self, BufRead, BufWriter, Write};
use std::sync::mpsc::{sync_channel, SyncSender};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guard::StepDiagnostics;
use crate::TokenId;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: step {step} of run {run_id} does not follow step {previous}")]
    StepOrder {
        line: usize,
        run_id: String,
        step: usize,
        previous: usize,
    },
    #[error("line {line}: non-finite field {field}")]
    NonFinite { line: usize, field: &'static str },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub run_id: String,
    pub step: usize,
    pub token: TokenId,
    pub h_loc: f64,
    pub h_glob: f64,
    pub delta_loc: f64,
    pub delta_glob: f64,
    pub q: f64,
    pub lambda_k: f64,
    pub k_t: usize,
    pub alpha_t: f64,
    pub chosen_score: f64,
}

impl TraceRecord {
    pub fn new(run_id: impl Into<String>, d: &StepDiagnostics) -> Self {
        Self {
            run_id: run_id.into(),
            step: d.step,
            token: d.chosen_token,
            h_loc: d.h_loc,
            h_glob: d.h_glob,
            delta_loc: d.delta_loc,
            delta_glob: d.delta_glob,
            q: d.q,
            lambda_k: d.lambda_k,
            k_t: d.k_t,
            alpha_t: d.alpha_t,
            chosen_score: d.chosen_score,
        }
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("h_loc", self.h_loc),
            ("h_glob", self.h_glob),
            ("delta_loc", self.delta_loc),
            ("delta_glob", self.delta_glob),
            ("q", self.q),
            ("lambda_k", self.lambda_k),
            ("alpha_t", self.alpha_t),
            ("chosen_score", self.chosen_score),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace record serializes")
    }
}

pub fn emit(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

pub fn write_records<W: Write>(mut w: W, records: &[TraceRecord]) -> io::Result<()> {
    for r in records {
        writeln!(w, "{}", r.to_line())?;
    }
    w.flush()
}

/// Parses NDJSON trace text, checking per-run step order and finiteness.
/// Blank lines are skipped.
pub fn parse(text: &str) -> Result<Vec<TraceRecord>, TraceError> {
    read(text.as_bytes())
}

pub fn read<R: BufRead>(reader: R) -> Result<Vec<TraceRecord>, TraceError> {
    let mut records = Vec::new();
    let mut last_step: HashMap<String, usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord = serde_json::from_str(&line).map_err(|e| TraceError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(field) = record.first_non_finite() {
            return Err(TraceError::NonFinite {
                line: line_no,
                field,
            });
        }
        if let Some(&previous) = last_step.get(&record.run_id) {
            if record.step <= previous {
                return Err(TraceError::StepOrder {
                    line: line_no,
                    run_id: record.run_id,
                    step: record.step,
                    previous,
                });
            }
        }
        last_step.insert(record.run_id.clone(), record.step);
        records.push(record);
    }
    Ok(records)
}

/// Records grouped by run id, in order of first appearance.
pub fn group_by_run(records: &[TraceRecord]) -> Vec<(String, Vec<&TraceRecord>)> {
    let mut order: Vec<(String, Vec<&TraceRecord>)> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for r in records {
        let slot = *index.entry(&r.run_id).or_insert_with(|| {
            order.push((r.run_id.clone(), Vec::new()));
            order.len() - 1
        });
        order[slot].1.push(r);
    }
    order
}

/// `Σ |x_{i+1} − x_i|`.
pub fn total_variation(series: &[f64]) -> f64 {
    series.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

/// Background writer: the single serialization point for trace records
/// produced by concurrent streams, fed through a bounded queue.
pub struct TraceWriter {
    sender: Option<SyncSender<TraceRecord>>,
    handle: Option<JoinHandle<io::Result<usize>>>,
}

impl TraceWriter {
    pub fn spawn<W: Write + Send + 'static>(sink: W, capacity: usize) -> Self {
        let (sender, receiver) = sync_channel::<TraceRecord>(capacity.max(1));
        let handle = std::thread::spawn(move || {
            let mut out = BufWriter::new(sink);
            let mut written = 0;
            for record in receiver {
                writeln!(out, "{}", record.to_line())?;
                written += 1;
            }
            out.flush()?;
            Ok(written)
        });
        Self {
            sender: Some(sender),
            handle: Some(handle),
        }
    }

    /// A handle producers can clone and move to other threads.
    pub fn sender(&self) -> SyncSender<TraceRecord> {
        self.sender.clone().expect("writer is open")
    }

    pub fn send(&self, record: TraceRecord) -> io::Result<()> {
        self.sender
            .as_ref()
            .expect("writer is open")
            .send(record)
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "trace writer stopped"))
    }

    /// Closes the queue, flushes and returns the number of records written.
    pub fn finish(mut self) -> io::Result<usize> {
        self.sender.take();
        self.handle
            .take()
            .expect("writer joined once")
            .join()
            .map_err(|_| io::Error::other("trace writer panicked"))?
    }
}

impl Drop for TraceWriter {
    fn drop(&mut self) {
        self.sender.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(run: &str, step: usize) -> TraceRecord {
        TraceRecord {
            run_id: run.into(),
            step,
            token: 3,
            h_loc: 1.0 / 3.0,
            h_glob: 0.1 + 0.2,
            delta_loc: -0.0,
            delta_glob: 1e-300,
            q: 1.0,
            lambda_k: 0.5,
            k_t: 10,
            alpha_t: 0.5,
            chosen_score: 0.42,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let records = vec![record("a", 1), record("b", 1), record("a", 2)];
        let text = emit(&records);
        let back = parse(&text).unwrap();
        assert_eq!(back, records);
        assert_eq!(back[0].delta_loc.to_bits(), (-0.0f64).to_bits());
        assert_eq!(emit(&back), text);
    }

    #[test]
    fn rejects_bad_traces() {
        let text = emit(&[record("a", 2), record("a", 2)]);
        assert!(matches!(
            parse(&text),
            Err(TraceError::StepOrder { line: 2, .. })
        ));
        assert!(matches!(
            parse("{not json}\n"),
            Err(TraceError::Parse { line: 1, .. })
        ));
        let nan = emit(&[record("a", 1)]).replace("0.42", "NaN");
        assert!(parse(&nan).is_err());
    }

    #[test]
    fn writer_serializes_concurrent_producers() {
        let path = std::env::temp_dir().join(format!("trace-writer-{}.ndjson", std::process::id()));
        let writer = TraceWriter::spawn(std::fs::File::create(&path).unwrap(), 4);
        std::thread::scope(|s| {
            for run in ["x", "y", "z"] {
                let tx = writer.sender();
                s.spawn(move || {
                    for step in 1..=50 {
                        tx.send(record(run, step)).unwrap();
                    }
                });
            }
        });
        assert_eq!(writer.finish().unwrap(), 150);
        let back = parse(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(group_by_run(&back).len(), 3);
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn total_variation_examples() {
        assert_eq!(total_variation(&[1.0, 3.0, 2.0]), 3.0);
        assert_eq!(total_variation(&[5.0]), 0.0);
    }

    proptest! {
        #[test]
        fn emit_parse_identity(
            vals in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL, 8),
            k in 5usize..=15,
            token in any::<u32>(),
        ) {
            let r = TraceRecord {
                run_id: "run-7".into(), step: 1, token,
                h_loc: vals[0], h_glob: vals[1], delta_loc: vals[2], delta_glob: vals[3],
                q: vals[4], lambda_k: vals[5], k_t: k, alpha_t: vals[6], chosen_score: vals[7],
            };
            let back = parse(&emit(std::slice::from_ref(&r))).unwrap();
            prop_assert_eq!(&back[0], &r);
            for (a, b) in [back[0].h_loc, back[0].chosen_score].iter().zip([r.h_loc, r.chosen_score]) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
