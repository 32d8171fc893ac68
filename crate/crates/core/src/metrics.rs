//! Per-request records and the aggregate metrics computed from them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Tokens;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no completed requests")]
    Empty,
    #[error("horizon must be > 0, got {0}")]
    Horizon(f64),
}

/// Outcome of one served request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub task_id: String,
    pub request_len: Tokens,
    pub user_input_len: Tokens,
    pub predicted_gen_len: Option<Tokens>,
    pub actual_gen_len: Tokens,
    pub arrival: f64,
    pub start: f64,
    pub finish: f64,
    /// Serving batch; `None` under continuous batching.
    pub batch_id: Option<u64>,
    pub instance: usize,
    pub valid_tokens: u64,
    /// Tokens generated after this request's EOS while its batch ran on.
    pub invalid_tokens: u64,
}

impl RequestRecord {
    pub fn response_time(&self) -> f64 {
        self.finish - self.arrival
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsePoint {
    pub time: f64,
    pub rmse: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub policy: String,
    pub instances: usize,
    pub seed: u64,
    /// Arrival rate label for reports (given or measured).
    pub arrival_rate: Option<f64>,
    pub phi: Option<f64>,
    pub wait_bounds: Option<String>,
    pub predictor_mode: Option<String>,
    pub n_requests: usize,
    pub n_served: usize,
    pub n_rejected: usize,
    pub n_batches: usize,
    pub mean_batch_size: f64,
    pub n_oom: usize,
    pub horizon_s: f64,
    pub total_tokens: u64,
    pub valid_tokens: u64,
    pub invalid_tokens: u64,
    /// Tokens generated by batches that hit OOM and were discarded.
    pub discarded_tokens: u64,
    /// Requests per second.
    pub request_throughput: f64,
    /// Generated tokens per second, invalid ones included.
    pub token_throughput: f64,
    pub valid_token_throughput: f64,
    pub avg_response_time_s: f64,
    pub p95_response_time_s: f64,
    pub max_instance_utilization: f64,
    pub predictor_rmse: Vec<RmsePoint>,
    pub estimator_rmse: Vec<RmsePoint>,
}

/// Nearest-rank percentile of an ascending slice (`q` in (0, 1]).
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Aggregates completed requests over `horizon` seconds. Sums run over
/// sorted values so record order never changes the result.
pub fn compute_metrics(records: &[RequestRecord], horizon: f64) -> Result<MetricsReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(MetricsError::Horizon(horizon));
    }
    let mut rts: Vec<f64> = records.iter().map(|r| r.response_time().max(0.0)).collect();
    rts.sort_by(f64::total_cmp);
    let valid: u64 = records.iter().map(|r| r.valid_tokens).sum();
    let invalid: u64 = records.iter().map(|r| r.invalid_tokens).sum();
    let n = records.len();
    Ok(MetricsReport {
        n_requests: n,
        n_served: n,
        horizon_s: horizon,
        total_tokens: valid + invalid,
        valid_tokens: valid,
        invalid_tokens: invalid,
        request_throughput: n as f64 / horizon,
        token_throughput: (valid + invalid) as f64 / horizon,
        valid_token_throughput: valid as f64 / horizon,
        avg_response_time_s: rts.iter().sum::<f64>() / n as f64,
        p95_response_time_s: nearest_rank(&rts, 0.95),
        ..Default::default()
    })
}
