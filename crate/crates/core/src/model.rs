//! Domain types shared by every stage of the pipeline: requests, batches and
//! the memory/cost profile of one LLM instance class.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token counts are plain integers; no tokenizer is involved anywhere.
pub type Tokens = u32;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("profile cannot hold a single request: theta={theta}, delta={delta}, l_max={l_max}, g_max={g_max}")]
    ProfileTooSmall {
        theta: f64,
        delta: f64,
        l_max: Tokens,
        g_max: Tokens,
    },
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("request {0} has no predicted generation length")]
    MissingPrediction(u64),
}

/// One user request. `request_len` covers instruction plus user input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub app_id: String,
    pub task_id: String,
    pub instruction: String,
    pub user_input: String,
    pub user_input_len: Tokens,
    pub request_len: Tokens,
    pub actual_gen_len: Tokens,
    pub predicted_gen_len: Option<Tokens>,
    pub arrival_time: f64,
}

impl Request {
    /// Checks the length invariants against a profile.
    pub fn validate(&self, profile: &LlmProfile) -> Result<(), String> {
        if self.request_len < 1 || self.request_len > profile.l_max {
            return Err(format!(
                "request {}: request_len {} outside [1, {}]",
                self.id, self.request_len, profile.l_max
            ));
        }
        if self.actual_gen_len < 1 || self.actual_gen_len > profile.g_max {
            return Err(format!(
                "request {}: gen_len {} outside [1, {}]",
                self.id, self.actual_gen_len, profile.g_max
            ));
        }
        if self.user_input_len > self.request_len {
            return Err(format!(
                "request {}: uil {} exceeds request_len {}",
                self.id, self.user_input_len, self.request_len
            ));
        }
        if let Some(p) = self.predicted_gen_len {
            if p < 1 || p > profile.g_max {
                return Err(format!("request {}: prediction {} outside [1, {}]", self.id, p, profile.g_max));
            }
        }
        if !self.arrival_time.is_finite() || self.arrival_time < 0.0 {
            return Err(format!("request {}: bad arrival time {}", self.id, self.arrival_time));
        }
        Ok(())
    }

    pub fn predicted(&self) -> Result<Tokens, ModelError> {
        self.predicted_gen_len.ok_or(ModelError::MissingPrediction(self.id))
    }
}

/// A group of requests served together on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub id: u64,
    pub requests: Vec<Request>,
    pub insertable: bool,
    pub created_at: f64,
}

impl Batch {
    pub fn singleton(id: u64, request: Request, created_at: f64) -> Self {
        Self {
            id,
            requests: vec![request],
            insertable: true,
            created_at,
        }
    }

    pub fn size(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    /// Padded width of the batch: the longest request.
    pub fn batch_length(&self) -> Tokens {
        self.requests.iter().map(|r| r.request_len).max().unwrap_or(0)
    }

    /// Iteration count once served: the longest actual generation.
    pub fn actual_gen_len(&self) -> Tokens {
        self.requests.iter().map(|r| r.actual_gen_len).max().unwrap_or(0)
    }

    /// Longest predicted generation; errors if any member lacks a prediction.
    pub fn predicted_gen_len(&self) -> Result<Tokens, ModelError> {
        if self.requests.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut max = 0;
        for r in &self.requests {
            max = max.max(r.predicted()?);
        }
        Ok(max)
    }

    pub fn earliest_arrival(&self) -> f64 {
        self.requests
            .iter()
            .map(|r| r.arrival_time)
            .fold(f64::INFINITY, f64::min)
    }

    /// Longest queuing time among members at `now`.
    pub fn queuing_time(&self, now: f64) -> f64 {
        (now - self.earliest_arrival()).max(0.0)
    }
}

/// Simulated-time cost coefficients standing in for GPU serving.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostCoefficients {
    /// Init-phase fixed seconds.
    pub a0: f64,
    /// Init-phase seconds per prompt token.
    pub a1: f64,
    /// Per-iteration fixed seconds.
    pub b0: f64,
    /// Seconds per KV entry read in one iteration.
    pub b1: f64,
    /// Seconds lost reloading an instance after an OOM.
    pub reload_penalty: f64,
}

impl Default for CostCoefficients {
    fn default() -> Self {
        Self {
            a0: 0.1,
            a1: 1e-6,
            b0: 0.04,
            b1: 1e-8,
            reload_penalty: 2.0,
        }
    }
}

/// Memory constants and cost model of one LLM instance class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LlmProfile {
    /// Memory units available for the KV cache.
    pub theta: f64,
    /// Memory units per token of cached keys and values.
    pub delta: f64,
    pub l_max: Tokens,
    pub g_max: Tokens,
    #[serde(default)]
    pub cost: CostCoefficients,
}

impl Default for LlmProfile {
    fn default() -> Self {
        Self {
            theta: 14336.0,
            delta: 1.0,
            l_max: 1024,
            g_max: 1024,
            cost: CostCoefficients::default(),
        }
    }
}

impl LlmProfile {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.theta > 0.0) || !self.theta.is_finite() {
            return Err(ModelError::InvalidProfile(format!("theta must be > 0, got {}", self.theta)));
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(ModelError::InvalidProfile(format!("delta must be > 0, got {}", self.delta)));
        }
        if self.l_max < 1 || self.g_max < 1 {
            return Err(ModelError::InvalidProfile("l_max and g_max must be >= 1".into()));
        }
        let c = &self.cost;
        for (name, v) in [
            ("a0", c.a0),
            ("a1", c.a1),
            ("b0", c.b0),
            ("b1", c.b1),
            ("reload_penalty", c.reload_penalty),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(ModelError::InvalidProfile(format!("cost.{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Number of tokens of KV cache that fit in memory.
    pub fn token_capacity(&self) -> f64 {
        self.theta / self.delta
    }
}

/// Largest fixed batch size that can never run out of memory when every
/// request is assumed to have maximal request and generation length.
pub fn static_batch_size(profile: &LlmProfile) -> Result<usize, ModelError> {
    profile.validate()?;
    let per_request = (profile.l_max as f64 + profile.g_max as f64) * profile.delta;
    let beta = (profile.theta / per_request).floor();
    if beta < 1.0 {
        return Err(ModelError::ProfileTooSmall {
            theta: profile.theta,
            delta: profile.delta,
            l_max: profile.l_max,
            g_max: profile.g_max,
        });
    }
    Ok(beta as usize)
}
