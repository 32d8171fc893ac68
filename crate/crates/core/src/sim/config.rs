use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::batcher::WaitBounds;
use crate::model::{CostCoefficients, LlmProfile};
use crate::predictor::PredictorMode;

/// Serving policy under simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Fixed-size batches in arrival order, FIFO dispatch.
    Vs,
    /// Continuous batching with a per-instance request cap.
    Ccb,
    /// Length-aware batching with a fixed size cap, FIFO dispatch.
    Glp,
    /// Length-aware batching without a size cap, FIFO dispatch.
    Abp,
    /// Length-aware batching, response-ratio dispatch, continuous learning.
    #[default]
    Magnus,
}

impl Policy {
    pub const ALL: [Policy; 5] = [Self::Vs, Self::Ccb, Self::Glp, Self::Abp, Self::Magnus];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Vs => "vs",
            Self::Ccb => "ccb",
            Self::Glp => "glp",
            Self::Abp => "abp",
            Self::Magnus => "magnus",
        }
    }

    /// Whether requests go through the generation-length predictor.
    pub fn uses_predictor(self) -> bool {
        matches!(self, Self::Glp | Self::Abp | Self::Magnus)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown policy {s:?} (expected vs, ccb, glp, abp or magnus)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatcherSettings {
    pub phi: f64,
    pub wait_bounds: WaitBounds,
}

impl Default for BatcherSettings {
    fn default() -> Self {
        Self {
            phi: 50_000.0,
            wait_bounds: WaitBounds::Verbatim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnSettings {
    pub k: usize,
}

impl Default for KnnSettings {
    fn default() -> Self {
        Self { k: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorSettings {
    /// Mode to predict with. `None` takes the supplied model's mode.
    pub mode: Option<PredictorMode>,
    pub seed: u64,
    /// Seconds between a request's arrival and its reaching the batcher.
    pub latency_s: f64,
}

impl Default for PredictorSettings {
    fn default() -> Self {
        Self {
            mode: None,
            seed: 0,
            latency_s: 0.03,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningSettings {
    /// Defaults to on for magnus and off otherwise.
    pub enabled: Option<bool>,
    pub predictor_interval_s: f64,
    pub estimator_interval_s: f64,
}

impl Default for LearningSettings {
    fn default() -> Self {
        Self {
            enabled: None,
            predictor_interval_s: 180.0,
            estimator_interval_s: 120.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub policy: Policy,
    pub instances: usize,
    pub profile: LlmProfile,
    pub batcher: BatcherSettings,
    pub knn: KnnSettings,
    pub predictor: PredictorSettings,
    /// Replaces `profile.cost` when present.
    pub cost: Option<CostCoefficients>,
    pub seed: u64,
    /// Batch size for vs and cap for glp; computed from memory when absent.
    pub fixed_batch_size: Option<usize>,
    pub ccb_capacity: usize,
    pub learning: LearningSettings,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            policy: Policy::default(),
            instances: 7,
            profile: LlmProfile::default(),
            batcher: BatcherSettings::default(),
            knn: KnnSettings::default(),
            predictor: PredictorSettings::default(),
            cost: None,
            seed: 0,
            fixed_batch_size: None,
            ccb_capacity: 7,
            learning: LearningSettings::default(),
        }
    }
}

impl SimConfig {
    pub fn for_policy(policy: Policy) -> Self {
        Self {
            policy,
            ..Default::default()
        }
    }

    /// The profile with any cost override applied.
    pub fn effective_profile(&self) -> LlmProfile {
        let mut p = self.profile;
        if let Some(c) = self.cost {
            p.cost = c;
        }
        p
    }

    pub fn learning_enabled(&self) -> bool {
        self.policy.uses_predictor() && self.learning.enabled.unwrap_or(self.policy == Policy::Magnus)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.effective_profile().validate().map_err(|e| e.to_string())?;
        if self.instances == 0 {
            return Err("instances must be >= 1".into());
        }
        if self.knn.k == 0 {
            return Err("knn.k must be >= 1".into());
        }
        if self.ccb_capacity == 0 {
            return Err("ccb_capacity must be >= 1".into());
        }
        if self.fixed_batch_size == Some(0) {
            return Err("fixed_batch_size must be >= 1".into());
        }
        if !(self.batcher.phi >= 0.0) {
            return Err(format!("batcher.phi must be >= 0, got {}", self.batcher.phi));
        }
        if !(self.predictor.latency_s >= 0.0) || !self.predictor.latency_s.is_finite() {
            return Err(format!("predictor.latency_s must be >= 0, got {}", self.predictor.latency_s));
        }
        let l = &self.learning;
        if !(l.predictor_interval_s > 0.0) || !(l.estimator_interval_s > 0.0) {
            return Err("learning intervals must be > 0".into());
        }
        Ok(())
    }
}
