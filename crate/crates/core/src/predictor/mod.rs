//! Generation-length prediction.
//!
//! Features are the user input length followed by the compressed embedding
//! of the instruction (application level) and of the user input (user
//! level). A random forest maps them to a generation length. Four modes
//! select how much of that pipeline is used:
//!
//! | mode | features | model |
//! |------|----------|-------|
//! | `uilo` | none | returns the user input length |
//! | `raft` | `[uil]` | one forest per task |
//! | `inst` | `[uil, app(4)]` | one shared forest |
//! | `usin` | `[uil, app(4), user(16)]` | one shared forest |

pub mod embed;
pub mod forest;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Request, Tokens};
pub use embed::{compress, embed, EmbeddingConfig, EmbeddingProvider, HttpEmbedder, LocalHasher};
pub use forest::{train_forest, ForestConfig, ForestError, ForestModel, TrainExample};

pub const MODEL_FILE_VERSION: u32 = 1;

/// Absolute error (tokens) a served request must exceed to be relearned.
pub const RETRAIN_ABS_TOKENS: f64 = 10.0;
/// Relative error (fraction of the actual length) it must also exceed.
pub const RETRAIN_REL: f64 = 0.10;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("model was trained for mode {model}, asked to predict with {requested}")]
    ModeMismatch {
        model: PredictorMode,
        requested: PredictorMode,
    },
    #[error("no per-task model for task {0:?}")]
    UnknownTask(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("unsupported model file version {0}")]
    Version(u32),
    #[error("unknown predictor mode {0:?}")]
    UnknownMode(String),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Embed(#[from] embed::EmbedError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorMode {
    Uilo,
    Raft,
    Inst,
    Usin,
}

impl PredictorMode {
    pub const ALL: [PredictorMode; 4] = [Self::Uilo, Self::Raft, Self::Inst, Self::Usin];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Uilo => "uilo",
            Self::Raft => "raft",
            Self::Inst => "inst",
            Self::Usin => "usin",
        }
    }

    pub fn feature_len(self, cfg: &EmbeddingConfig) -> usize {
        match self {
            Self::Uilo | Self::Raft => 1,
            Self::Inst => 1 + cfg.d_app,
            Self::Usin => 1 + cfg.d_app + cfg.d_user,
        }
    }
}

impl fmt::Display for PredictorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PredictorMode {
    type Err = PredictorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "uilo" => Ok(Self::Uilo),
            "raft" => Ok(Self::Raft),
            "inst" => Ok(Self::Inst),
            "usin" => Ok(Self::Usin),
            _ => Err(PredictorError::UnknownMode(s.to_string())),
        }
    }
}

/// Builds the feature vector of `req` for `mode`, in the fixed order
/// `[uil, app features, user features]`.
pub fn featurize_with(
    req: &Request,
    mode: PredictorMode,
    provider: &dyn EmbeddingProvider,
    cfg: &EmbeddingConfig,
) -> Result<Vec<f64>, PredictorError> {
    let mut x = Vec::with_capacity(mode.feature_len(cfg));
    x.push(req.user_input_len as f64);
    match mode {
        PredictorMode::Uilo | PredictorMode::Raft => {}
        PredictorMode::Inst => {
            let e = provider.embed_batch(&[&req.instruction]);
            x.extend(compress(&e[0], cfg.d_app)?);
        }
        PredictorMode::Usin => {
            // one provider call per request carries both texts
            let e = provider.embed_batch(&[&req.instruction, &req.user_input]);
            x.extend(compress(&e[0], cfg.d_app)?);
            x.extend(compress(&e[1], cfg.d_user)?);
        }
    }
    Ok(x)
}

pub fn featurize(req: &Request, mode: PredictorMode) -> Vec<f64> {
    featurize_with(req, mode, &LocalHasher, &EmbeddingConfig::default())
        .expect("default embedding config divides evenly")
}

/// A training example remembered together with the task it came from, so
/// per-task models can be rebuilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredExample {
    pub task_id: String,
    pub features: Vec<f64>,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regressor {
    /// UILO needs no model.
    Passthrough,
    Shared(ForestModel),
    PerTask(BTreeMap<String, ForestModel>),
}

/// A trained generation-length predictor. Immutable once built; retraining
/// returns a new value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenLenPredictor {
    pub version: u32,
    pub mode: PredictorMode,
    pub seed: u64,
    pub hyperparams: ForestConfig,
    pub embedding: EmbeddingConfig,
    pub g_max: Tokens,
    pub regressor: Regressor,
    /// Training set, kept so continuous learning can retrain from scratch.
    pub examples: Vec<StoredExample>,
}

/// A served request as seen by continuous learning.
#[derive(Debug, Clone, PartialEq)]
pub struct ServedRequest<'a> {
    pub request: &'a Request,
    pub predicted: Tokens,
    pub actual: Tokens,
}

/// Whether a served request's prediction error is large enough to learn from.
pub fn qualifies_for_retrain(predicted: Tokens, actual: Tokens) -> bool {
    let err = (predicted as f64 - actual as f64).abs();
    err > RETRAIN_ABS_TOKENS && err > RETRAIN_REL * actual as f64
}

impl GenLenPredictor {
    /// Trains a predictor on requests whose `actual_gen_len` is the target.
    pub fn train(
        requests: &[Request],
        mode: PredictorMode,
        hyperparams: ForestConfig,
        g_max: Tokens,
        seed: u64,
    ) -> Result<Self, PredictorError> {
        Self::train_with(requests, mode, hyperparams, g_max, seed, &LocalHasher)
    }

    pub fn train_with(
        requests: &[Request],
        mode: PredictorMode,
        hyperparams: ForestConfig,
        g_max: Tokens,
        seed: u64,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Self, PredictorError> {
        let embedding = EmbeddingConfig::default();
        let examples = if mode == PredictorMode::Uilo {
            Vec::new()
        } else {
            if requests.is_empty() {
                return Err(PredictorError::Empty("training set"));
            }
            requests
                .iter()
                .map(|r| {
                    Ok(StoredExample {
                        task_id: r.task_id.clone(),
                        features: featurize_with(r, mode, provider, &embedding)?,
                        target: r.actual_gen_len as f64,
                    })
                })
                .collect::<Result<Vec<_>, PredictorError>>()?
        };
        Self::from_examples(mode, hyperparams, embedding, g_max, seed, examples)
    }

    fn from_examples(
        mode: PredictorMode,
        hyperparams: ForestConfig,
        embedding: EmbeddingConfig,
        g_max: Tokens,
        seed: u64,
        examples: Vec<StoredExample>,
    ) -> Result<Self, PredictorError> {
        let to_train = |set: &[&StoredExample]| -> Vec<TrainExample> {
            set.iter()
                .map(|e| TrainExample {
                    features: e.features.clone(),
                    target: e.target,
                })
                .collect()
        };
        let regressor = match mode {
            PredictorMode::Uilo => Regressor::Passthrough,
            PredictorMode::Raft => {
                let mut by_task: BTreeMap<String, Vec<&StoredExample>> = BTreeMap::new();
                for e in &examples {
                    by_task.entry(e.task_id.clone()).or_default().push(e);
                }
                let mut models = BTreeMap::new();
                for (task, set) in by_task {
                    let task_seed = seed ^ embed::fnv1a64(task.as_bytes());
                    models.insert(task, train_forest(&to_train(&set), &hyperparams, task_seed)?);
                }
                Regressor::PerTask(models)
            }
            PredictorMode::Inst | PredictorMode::Usin => {
                let all: Vec<&StoredExample> = examples.iter().collect();
                Regressor::Shared(train_forest(&to_train(&all), &hyperparams, seed)?)
            }
        };
        Ok(Self {
            version: MODEL_FILE_VERSION,
            mode,
            seed,
            hyperparams,
            embedding,
            g_max,
            regressor,
            examples,
        })
    }

    /// Raw regressor output before rounding and clamping.
    pub fn predict_raw(&self, req: &Request, provider: &dyn EmbeddingProvider) -> Result<f64, PredictorError> {
        match &self.regressor {
            Regressor::Passthrough => Ok(req.user_input_len as f64),
            Regressor::Shared(m) => Ok(m.predict(&featurize_with(req, self.mode, provider, &self.embedding)?)?),
            Regressor::PerTask(models) => {
                let m = models
                    .get(&req.task_id)
                    .ok_or_else(|| PredictorError::UnknownTask(req.task_id.clone()))?;
                Ok(m.predict(&featurize_with(req, self.mode, provider, &self.embedding)?)?)
            }
        }
    }

    /// Predicted generation length, rounded and clamped to `[1, g_max]`.
    pub fn predict(&self, req: &Request, mode: PredictorMode) -> Result<Tokens, PredictorError> {
        self.predict_with(req, mode, &LocalHasher)
    }

    pub fn predict_with(
        &self,
        req: &Request,
        mode: PredictorMode,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Tokens, PredictorError> {
        if mode != self.mode {
            return Err(PredictorError::ModeMismatch {
                model: self.mode,
                requested: mode,
            });
        }
        let raw = self.predict_raw(req, provider)?;
        Ok(raw.round().clamp(1.0, self.g_max as f64) as Tokens)
    }

    /// Retrains on the existing set plus every served request whose
    /// prediction missed by more than both thresholds. Returns the new
    /// predictor and how many examples were added; with nothing to add the
    /// result equals `self`.
    pub fn continuous_learn(&self, logs: &[ServedRequest<'_>], _now: f64) -> Result<(Self, usize), PredictorError> {
        self.continuous_learn_with(logs, &LocalHasher)
    }

    pub fn continuous_learn_with(
        &self,
        logs: &[ServedRequest<'_>],
        provider: &dyn EmbeddingProvider,
    ) -> Result<(Self, usize), PredictorError> {
        let added = self.qualifying_examples(logs, provider)?;
        let n = added.len();
        Ok((self.refit_with(added)?, n))
    }

    /// Training examples for every served request past both error thresholds
    /// (none in uilo mode, which has nothing to learn).
    pub fn qualifying_examples(
        &self,
        logs: &[ServedRequest<'_>],
        provider: &dyn EmbeddingProvider,
    ) -> Result<Vec<StoredExample>, PredictorError> {
        if self.mode == PredictorMode::Uilo {
            return Ok(Vec::new());
        }
        logs.iter()
            .filter(|l| qualifies_for_retrain(l.predicted, l.actual))
            .map(|log| {
                Ok(StoredExample {
                    task_id: log.request.task_id.clone(),
                    features: featurize_with(log.request, self.mode, provider, &self.embedding)?,
                    target: log.actual as f64,
                })
            })
            .collect()
    }

    /// Refits on the stored examples plus `added`. Fitting depends only on the
    /// example list and seed, so adding in several steps and refitting once
    /// gives the same model as refitting after each step.
    pub fn refit_with(&self, added: Vec<StoredExample>) -> Result<Self, PredictorError> {
        if added.is_empty() {
            return Ok(self.clone());
        }
        let mut examples = self.examples.clone();
        examples.extend(added);
        Self::from_examples(self.mode, self.hyperparams, self.embedding, self.g_max, self.seed, examples)
    }

    /// Root-mean-square error of clamped predictions against `actual_gen_len`.
    pub fn rmse(&self, testset: &[Request], mode: PredictorMode) -> Result<f64, PredictorError> {
        if testset.is_empty() {
            return Err(PredictorError::Empty("test set"));
        }
        let mut sq = 0.0;
        for r in testset {
            let e = self.predict(r, mode)? as f64 - r.actual_gen_len as f64;
            sq += e * e;
        }
        Ok((sq / testset.len() as f64).sqrt())
    }

    pub fn to_json(&self) -> Result<String, PredictorError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, PredictorError> {
        let m: Self = serde_json::from_str(s)?;
        if m.version != MODEL_FILE_VERSION {
            return Err(PredictorError::Version(m.version));
        }
        Ok(m)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), PredictorError> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, PredictorError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let m: Self = serde_json::from_reader(f)?;
        if m.version != MODEL_FILE_VERSION {
            return Err(PredictorError::Version(m.version));
        }
        Ok(m)
    }
}

/// RMSE of a set of (prediction, actual) pairs.
pub fn rmse_of(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    Some((pairs.iter().map(|(p, a)| (p - a) * (p - a)).sum::<f64>() / pairs.len() as f64).sqrt())
}
