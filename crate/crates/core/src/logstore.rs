//! Append-only run log (JSONL) and offline replay of continuous-learning
//! decisions from it.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::estimator::{EstimatorError, KnnModel, ServedBatch};
use crate::metrics::RequestRecord;
use crate::model::Tokens;
use crate::predictor::{qualifies_for_retrain, rmse_of};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub batch_id: u64,
    pub instance: usize,
    pub members: Vec<u64>,
    pub size: usize,
    pub length: Tokens,
    pub predicted_gen_len: Option<Tokens>,
    pub actual_gen_len: Tokens,
    pub estimated_time: Option<f64>,
    pub actual_time: f64,
    pub start: f64,
    pub finish: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrainTarget {
    Predictor,
    Estimator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainRecord {
    pub time: f64,
    pub target: RetrainTarget,
    /// Logs that finished since the previous retrain of this target.
    pub examined: usize,
    /// Request ids (predictor) or batch ids (estimator) added to training.
    pub collected: Vec<u64>,
    /// Error of the outgoing model on the examined window.
    pub rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OomRecord {
    pub time: f64,
    pub batch_id: u64,
    pub instance: usize,
    pub size: usize,
    pub failed_iteration: Tokens,
    /// Ids of the two sealed halves, absent when the batch could not split.
    pub halves: Option<(u64, u64)>,
    pub half_sizes: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub time: f64,
    pub request_id: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Request(RequestRecord),
    Batch(BatchLog),
    Retrain(RetrainRecord),
    Oom(OomRecord),
    Rejection(Rejection),
}

/// Writes records one JSON object per line.
pub struct LogWriter<W: Write> {
    out: W,
}

impl<W: Write> LogWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn append(&mut self, rec: &LogRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn write_log(path: &Path, records: &[LogRecord]) -> std::io::Result<()> {
    let mut w = LogWriter::new(std::io::BufWriter::new(std::fs::File::create(path)?));
    for r in records {
        w.append(r)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_log<R: BufRead>(r: R) -> std::io::Result<Vec<LogRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
    }
    Ok(out)
}

pub fn load_log(path: &Path) -> std::io::Result<Vec<LogRecord>> {
    read_log(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Which served requests the predictor would collect from `window`.
pub fn predictor_window_decision(time: f64, window: &[&RequestRecord]) -> RetrainRecord {
    let mut pairs = Vec::new();
    let mut collected = Vec::new();
    for r in window {
        if let Some(p) = r.predicted_gen_len {
            pairs.push((p as f64, r.actual_gen_len as f64));
            if qualifies_for_retrain(p, r.actual_gen_len) {
                collected.push(r.id);
            }
        }
    }
    RetrainRecord {
        time,
        target: RetrainTarget::Predictor,
        examined: window.len(),
        collected,
        rmse: rmse_of(&pairs),
    }
}

pub fn served_batch(b: &BatchLog) -> ServedBatch {
    ServedBatch {
        size: b.size,
        length: b.length,
        actual_gen_len: b.actual_gen_len,
        actual_time: b.actual_time,
    }
}

/// Runs estimator continuous learning on `window` and reports the decision.
pub fn estimator_window_decision(
    time: f64,
    model: &KnnModel,
    window: &[&BatchLog],
) -> Result<(KnnModel, RetrainRecord), EstimatorError> {
    let served: Vec<ServedBatch> = window.iter().map(|b| served_batch(b)).collect();
    let (next, idx) = model.continuous_learn(&served, time)?;
    let pairs: Vec<(f64, f64)> = window
        .iter()
        .filter_map(|b| b.estimated_time.map(|e| (e, b.actual_time)))
        .collect();
    Ok((
        next,
        RetrainRecord {
            time,
            target: RetrainTarget::Estimator,
            examined: window.len(),
            collected: idx.iter().map(|&i| window[i].batch_id).collect(),
            rmse: rmse_of(&pairs),
        },
    ))
}

/// Recomputes every retraining decision of a run from its log. Windows
/// are half-open `[previous retrain, this retrain)` in finish time, which
/// matches the live run where retraining precedes completions at equal
/// timestamps.
pub fn replay_retraining(records: &[LogRecord], initial_estimator: &KnnModel) -> Result<Vec<RetrainRecord>, EstimatorError> {
    let requests: Vec<&RequestRecord> = records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Request(x) => Some(x),
            _ => None,
        })
        .collect();
    let batches: Vec<&BatchLog> = records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Batch(x) => Some(x),
            _ => None,
        })
        .collect();
    let mut out = Vec::new();
    let mut estimator = initial_estimator.clone();
    let (mut prev_pred, mut prev_est) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for rec in records {
        let LogRecord::Retrain(live) = rec else { continue };
        let t = live.time;
        match live.target {
            RetrainTarget::Predictor => {
                let window: Vec<&RequestRecord> = requests
                    .iter()
                    .copied()
                    .filter(|r| r.finish >= prev_pred && r.finish < t)
                    .collect();
                out.push(predictor_window_decision(t, &window));
                prev_pred = t;
            }
            RetrainTarget::Estimator => {
                let window: Vec<&BatchLog> = batches
                    .iter()
                    .copied()
                    .filter(|b| b.finish >= prev_est && b.finish < t)
                    .collect();
                let (next, decision) = estimator_window_decision(t, &estimator, &window)?;
                estimator = next;
                out.push(decision);
                prev_est = t;
            }
        }
    }
    Ok(out)
}
