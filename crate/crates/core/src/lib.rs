//! Generation-length-aware batch serving for LLMs.
//!
//! Requests get a predicted generation length, are grouped into batches
//! that minimise wasted KV-cache reads under a memory budget, and are
//! dispatched to idle instances by highest response ratio. A deterministic
//! discrete-event simulator with a configurable cost model stands in for
//! real GPUs and compares the policy against fixed-size and continuous
//! batching baselines.

pub mod batcher;
pub mod estimator;
pub mod logstore;
pub mod metrics;
pub mod model;
pub mod predictor;
pub mod scheduler;
pub mod sim;
pub mod workload;

pub use batcher::{BatchQueue, BatcherConfig, Placement, WaitBounds};
pub use estimator::KnnModel;
pub use model::{static_batch_size, Batch, CostCoefficients, LlmProfile, Request, Tokens};
pub use metrics::{MetricsReport, RequestRecord};
pub use predictor::{GenLenPredictor, PredictorMode};
pub use sim::{run, run_with, Policy, RunOutput, SimConfig};
