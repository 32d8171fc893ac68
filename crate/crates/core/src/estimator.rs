//! Batch serving-time estimation by k-nearest-neighbour regression over
//! (batch size, batch length, batch generation length).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Batch, ModelError, Tokens};

/// Absolute error (seconds) a served batch must exceed to be relearned.
pub const RETRAIN_ABS_SECS: f64 = 2.0;
/// Relative error (fraction of actual serving time) it must also exceed.
pub const RETRAIN_REL: f64 = 0.20;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("estimator has no examples")]
    NoExamples,
    #[error("k must be >= 1")]
    ZeroK,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchFeatures {
    pub size: f64,
    pub length: f64,
    pub gen_len: f64,
}

impl BatchFeatures {
    pub fn new(size: usize, length: Tokens, gen_len: Tokens) -> Self {
        Self {
            size: size as f64,
            length: length as f64,
            gen_len: gen_len as f64,
        }
    }

    fn as_array(&self) -> [f64; 3] {
        [self.size, self.length, self.gen_len]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingExample {
    pub features: BatchFeatures,
    pub serving_time: f64,
}

/// Per-dimension mean and standard deviation used for z-scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl FeatureStats {
    fn compute(examples: &[TimingExample]) -> Self {
        let n = examples.len().max(1) as f64;
        let mut mean = [0.0; 3];
        for e in examples {
            for (m, v) in mean.iter_mut().zip(e.features.as_array()) {
                *m += v / n;
            }
        }
        let mut std = [0.0; 3];
        for e in examples {
            for (i, v) in e.features.as_array().iter().enumerate() {
                std[i] += (v - mean[i]).powi(2) / n;
            }
        }
        // constant dimensions contribute nothing but must not divide by zero
        let std = std.map(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
        Self { mean, std }
    }

    fn normalize(&self, f: &BatchFeatures) -> [f64; 3] {
        let a = f.as_array();
        [0, 1, 2].map(|i| (a[i] - self.mean[i]) / self.std[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub k: usize,
    pub stats: FeatureStats,
    pub examples: Vec<TimingExample>,
    #[serde(skip)]
    normalized: Vec<[f64; 3]>,
}

impl KnnModel {
    pub fn new(k: usize, examples: Vec<TimingExample>) -> Result<Self, EstimatorError> {
        if k == 0 {
            return Err(EstimatorError::ZeroK);
        }
        let stats = FeatureStats::compute(&examples);
        let normalized = examples.iter().map(|e| stats.normalize(&e.features)).collect();
        Ok(Self {
            k,
            stats,
            examples,
            normalized,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Mean serving time of the `k` nearest stored examples in z-scored
    /// space; equal distances keep insertion order. With fewer than `k`
    /// examples, the mean of all of them.
    pub fn estimate_features(&self, q: &BatchFeatures) -> Result<f64, EstimatorError> {
        if self.examples.is_empty() {
            return Err(EstimatorError::NoExamples);
        }
        if self.examples.len() <= self.k {
            return Ok(self.examples.iter().map(|e| e.serving_time).sum::<f64>() / self.examples.len() as f64);
        }
        let z = self.stats.normalize(q);
        let mut dist: Vec<(f64, usize)> = self
            .normalized
            .iter()
            .enumerate()
            .map(|(i, x)| ((0..3).map(|d| (x[d] - z[d]).powi(2)).sum::<f64>(), i))
            .collect();
        // (distance, index) keys make the partial selection stable
        dist.select_nth_unstable_by(self.k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let sum: f64 = dist[..self.k].iter().map(|&(_, i)| self.examples[i].serving_time).sum();
        Ok(sum / self.k as f64)
    }

    /// Estimates a queued batch from its size, length and predicted
    /// generation length.
    pub fn estimate(&self, batch: &Batch) -> Result<f64, EstimatorError> {
        let f = BatchFeatures::new(batch.size(), batch.batch_length(), batch.predicted_gen_len()?);
        self.estimate_features(&f)
    }

    /// Re-estimates each served batch with its actual generation length and
    /// adds the ones missed by more than both thresholds. Returns the new
    /// model and the indices of the collected logs.
    pub fn continuous_learn(&self, logs: &[ServedBatch], _now: f64) -> Result<(KnnModel, Vec<usize>), EstimatorError> {
        let mut collected = Vec::new();
        for (i, log) in logs.iter().enumerate() {
            let est = self.estimate_features(&log.actual_features())?;
            if qualifies_for_retrain(est, log.actual_time) {
                collected.push(i);
            }
        }
        if collected.is_empty() {
            return Ok((self.clone(), collected));
        }
        let mut examples = self.examples.clone();
        examples.extend(collected.iter().map(|&i| TimingExample {
            features: logs[i].actual_features(),
            serving_time: logs[i].actual_time,
        }));
        Ok((KnnModel::new(self.k, examples)?, collected))
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string(self)
    }

    pub fn from_json(s: &str) -> Result<Self, Box<dyn std::error::Error + Send + Sync>> {
        #[derive(Deserialize)]
        struct Raw {
            k: usize,
            examples: Vec<TimingExample>,
        }
        let raw: Raw = serde_json::from_str(s)?;
        Ok(Self::new(raw.k, raw.examples)?)
    }
}

/// A served batch as seen by continuous learning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServedBatch {
    pub size: usize,
    pub length: Tokens,
    pub actual_gen_len: Tokens,
    pub actual_time: f64,
}

impl ServedBatch {
    fn actual_features(&self) -> BatchFeatures {
        BatchFeatures::new(self.size, self.length, self.actual_gen_len)
    }
}

pub fn qualifies_for_retrain(estimate: f64, actual: f64) -> bool {
    let err = (estimate - actual).abs();
    err > RETRAIN_ABS_SECS && err > RETRAIN_REL * actual
}
