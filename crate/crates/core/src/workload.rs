//! Synthetic multi-application traces with Poisson arrivals.
//!
//! Each task draws a user input length from a clipped log-normal and a
//! generation length from `slope * uil + intercept + noise`. Part of the
//! noise variance (`style_share`) is carried by a per-request style that
//! also picks the vocabulary of the user input text, so user-level text
//! features hold real information about the generation length. The rest is
//! Gaussian.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::distributions::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Request, Tokens};
use crate::predictor::embed::fnv1a64;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid task spec {task}: {reason}")]
    InvalidSpec { task: String, reason: String },
    #[error("invalid workload: {0}")]
    Invalid(String),
    #[error("task {task} has {have} records, needs {need}")]
    InsufficientRecords { task: String, have: usize, need: usize },
    #[error("trace line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Number of latent user styles per task.
pub const STYLES: usize = 2;
const STYLE_VOCAB: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub app_id: String,
    pub task_id: String,
    pub instruction: String,
    /// First token of every user input for this task.
    pub keyword: String,
    /// Log-normal location of the user input length.
    pub uil_mu: f64,
    /// Log-normal scale of the user input length.
    pub uil_sigma: f64,
    pub uil_min: Tokens,
    pub slope: f64,
    pub intercept: f64,
    /// Standard deviation of the total generation-length noise.
    pub noise_sigma: f64,
    /// Fraction of the noise variance explained by the user style.
    #[serde(default)]
    pub style_share: f64,
    /// Pearson target the noise was calibrated for (informational).
    #[serde(default)]
    pub target_rho: Option<f64>,
    pub share: f64,
}

impl TaskSpec {
    pub fn instruction_len(&self) -> Tokens {
        self.instruction.split_whitespace().count() as Tokens
    }

    pub fn uil_max(&self, l_max: Tokens) -> Tokens {
        l_max.saturating_sub(self.instruction_len())
    }

    /// Variance of the (unclipped) log-normal input length.
    pub fn uil_variance(&self) -> f64 {
        let s2 = self.uil_sigma * self.uil_sigma;
        (s2.exp() - 1.0) * (2.0 * self.uil_mu + s2).exp()
    }

    /// Pearson correlation of (uil, gen) implied by the linear law.
    pub fn implied_pearson(&self) -> f64 {
        let signal = self.slope * self.slope * self.uil_variance();
        let denom = (signal + self.noise_sigma * self.noise_sigma).sqrt();
        if denom == 0.0 {
            return 0.0;
        }
        self.slope * self.uil_variance().sqrt() / denom
    }

    /// Noise standard deviation that yields Pearson `rho`.
    pub fn noise_for_pearson(&self, rho: f64) -> f64 {
        self.slope.abs() * self.uil_variance().sqrt() * (1.0 / (rho * rho) - 1.0).max(0.0).sqrt()
    }

    fn style_offset(&self, style: usize) -> f64 {
        let a = self.noise_sigma * self.style_share.clamp(0.0, 1.0).sqrt();
        if style % 2 == 0 {
            -a
        } else {
            a
        }
    }

    fn residual_sigma(&self) -> f64 {
        self.noise_sigma * (1.0 - self.style_share.clamp(0.0, 1.0)).sqrt()
    }

    fn validate(&self, l_max: Tokens) -> Result<(), WorkloadError> {
        let bad = |reason: String| WorkloadError::InvalidSpec {
            task: self.task_id.clone(),
            reason,
        };
        if self.task_id.is_empty() {
            return Err(bad("empty task id".into()));
        }
        if !self.uil_mu.is_finite() || !(self.uil_sigma >= 0.0) {
            return Err(bad("log-normal parameters must be finite, sigma >= 0".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(0.0..=1.0).contains(&self.style_share) {
            return Err(bad("noise_sigma must be >= 0 and style_share in [0, 1]".into()));
        }
        if !(self.share >= 0.0) {
            return Err(bad("share must be >= 0".into()));
        }
        if self.uil_min < 1 || self.uil_min > self.uil_max(l_max) {
            return Err(bad(format!(
                "uil clip [{}, {}] is empty",
                self.uil_min,
                self.uil_max(l_max)
            )));
        }
        if self.keyword.split_whitespace().count() != 1 {
            return Err(bad("keyword must be a single token".into()));
        }
        Ok(())
    }
}

fn task(
    app: &str,
    id: &str,
    instruction: &str,
    median_uil: f64,
    slope: f64,
    intercept: f64,
    rho: f64,
) -> TaskSpec {
    let mut t = TaskSpec {
        app_id: app.into(),
        task_id: id.into(),
        instruction: instruction.into(),
        keyword: format!("<{id}>"),
        uil_mu: median_uil.ln(),
        uil_sigma: 0.5,
        uil_min: 2,
        slope,
        intercept,
        noise_sigma: 0.0,
        style_share: 0.6,
        target_rho: Some(rho),
        share: 0.125,
    };
    t.noise_sigma = t.noise_for_pearson(rho);
    t
}

/// Eight tasks over six applications with equal traffic shares.
pub fn default_tasks() -> Vec<TaskSpec> {
    vec![
        task("mt", "mt-en-de", "Translate the following English text into German:", 40.0, 1.1, 2.0, 0.967),
        task("mt", "mt-de-en", "Translate the following German text into English:", 40.0, 1.15, 2.0, 0.967),
        task("gc", "gc", "Correct the grammar mistakes in the following sentence:", 30.0, 1.0, 1.0, 0.981),
        task("td", "td", "Rewrite the following text so that it is polite and not toxic:", 25.0, 0.95, 2.0, 0.778),
        task("ct", "ct-cpp-py", "Translate the following C++ code into Python code:", 150.0, 0.7, 5.0, 0.996),
        task("ct", "ct-py-cpp", "Translate the following Python code into C++ code:", 110.0, 1.4, 8.0, 0.996),
        task("bf", "bf", "Fix bugs in the following code and output the fixed code:", 120.0, 1.0, 3.0, 0.992),
        task("cc", "cc", "Write a detailed comment for the following code:", 100.0, 1.6, 20.0, 0.771),
    ]
}

/// Everything needed to regenerate a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    /// Mean arrivals per second.
    pub rate: f64,
    pub n_requests: usize,
    #[serde(default = "default_max")]
    pub l_max: Tokens,
    #[serde(default = "default_max")]
    pub g_max: Tokens,
    #[serde(default = "default_tasks")]
    pub tasks: Vec<TaskSpec>,
}

fn default_max() -> Tokens {
    1024
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            rate: 4.0,
            n_requests: 2000,
            l_max: 1024,
            g_max: 1024,
            tasks: default_tasks(),
        }
    }
}

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: u64,
    pub app_id: String,
    pub task_id: String,
    pub instruction: String,
    pub user_input: String,
    pub uil: Tokens,
    pub req_len: Tokens,
    pub gen_len: Tokens,
    pub arrival_s: f64,
}

impl TraceRecord {
    pub fn to_request(&self) -> Request {
        Request {
            id: self.id,
            app_id: self.app_id.clone(),
            task_id: self.task_id.clone(),
            instruction: self.instruction.clone(),
            user_input: self.user_input.clone(),
            user_input_len: self.uil,
            request_len: self.req_len,
            actual_gen_len: self.gen_len,
            predicted_gen_len: None,
            arrival_time: self.arrival_s,
        }
    }

    pub fn from_request(r: &Request) -> Self {
        Self {
            id: r.id,
            app_id: r.app_id.clone(),
            task_id: r.task_id.clone(),
            instruction: r.instruction.clone(),
            user_input: r.user_input.clone(),
            uil: r.user_input_len,
            req_len: r.request_len,
            gen_len: r.actual_gen_len,
            arrival_s: r.arrival_time,
        }
    }
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ne", "su", "ta", "ri", "po", "va", "de", "zu", "fe", "go", "hi", "ju", "be",
];

fn vocab_word(task_id: &str, style: usize, j: usize) -> String {
    let mut h = fnv1a64(format!("{task_id}/{style}/{j}").as_bytes());
    let n = 2 + (h % 3) as usize;
    h /= 3;
    let mut w = String::new();
    for _ in 0..n {
        w.push_str(SYLLABLES[(h % 16) as usize]);
        h /= 16;
    }
    w
}

/// Builds the user input text: the task keyword followed by `uil - 1`
/// pseudo-words from the style's vocabulary. Depends only on
/// `(task, id, seed, style, uil)`.
pub fn synth_user_input(spec: &TaskSpec, id: u64, seed: u64, style: usize, uil: Tokens) -> String {
    let vocab: Vec<String> = (0..STYLE_VOCAB).map(|j| vocab_word(&spec.task_id, style, j)).collect();
    let text_seed = fnv1a64(format!("{}/{id}/{seed}", spec.task_id).as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(text_seed);
    let mut s = spec.keyword.clone();
    for _ in 1..uil {
        s.push(' ');
        s.push_str(vocab.choose(&mut rng).expect("non-empty vocab"));
    }
    s
}

fn validate_specs(specs: &[TaskSpec], l_max: Tokens) -> Result<(), WorkloadError> {
    if specs.is_empty() {
        return Err(WorkloadError::Invalid("no tasks".into()));
    }
    for s in specs {
        s.validate(l_max)?;
    }
    let total: f64 = specs.iter().map(|s| s.share).sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(WorkloadError::Invalid(format!("task shares sum to {total}, expected 1")));
    }
    Ok(())
}

/// Generates `n` requests with exponential inter-arrival gaps at `rate`.
pub fn gen_trace(
    specs: &[TaskSpec],
    rate: f64,
    n: usize,
    seed: u64,
    l_max: Tokens,
    g_max: Tokens,
) -> Result<Vec<TraceRecord>, WorkloadError> {
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(WorkloadError::Invalid(format!("rate must be > 0, got {rate}")));
    }
    if n == 0 {
        return Err(WorkloadError::Invalid("n_requests must be >= 1".into()));
    }
    validate_specs(specs, l_max)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaps = Exp::new(rate).map_err(|e| WorkloadError::Invalid(e.to_string()))?;
    let pick = WeightedIndex::new(specs.iter().map(|s| s.share)).map_err(|e| WorkloadError::Invalid(e.to_string()))?;
    let mut t = 0.0;
    let mut out = Vec::with_capacity(n);
    for id in 0..n as u64 {
        t += gaps.sample(&mut rng);
        let spec = &specs[pick.sample(&mut rng)];
        let uil_dist = LogNormal::new(spec.uil_mu, spec.uil_sigma).map_err(|e| WorkloadError::InvalidSpec {
            task: spec.task_id.clone(),
            reason: e.to_string(),
        })?;
        let uil = (uil_dist.sample(&mut rng).round() as i64).clamp(spec.uil_min as i64, spec.uil_max(l_max) as i64) as Tokens;
        let style = rng.gen_range(0..STYLES);
        let residual = Normal::new(0.0, spec.residual_sigma())
            .map_err(|e| WorkloadError::Invalid(e.to_string()))?
            .sample(&mut rng);
        let g = spec.slope * uil as f64 + spec.intercept + spec.style_offset(style) + residual;
        let gen_len = (g.round() as i64).clamp(1, g_max as i64) as Tokens;
        out.push(TraceRecord {
            id,
            app_id: spec.app_id.clone(),
            task_id: spec.task_id.clone(),
            instruction: spec.instruction.clone(),
            user_input: synth_user_input(spec, id, seed, style, uil),
            uil,
            req_len: uil + spec.instruction_len(),
            gen_len,
            arrival_s: t,
        });
    }
    Ok(out)
}

pub fn gen_from_config(cfg: &WorkloadConfig, seed: u64) -> Result<Vec<TraceRecord>, WorkloadError> {
    gen_trace(&cfg.tasks, cfg.rate, cfg.n_requests, seed, cfg.l_max, cfg.g_max)
}

/// Per-task seeded partition into disjoint train and test sets.
pub fn split_trace(
    trace: &[TraceRecord],
    train_n: usize,
    test_n: usize,
    seed: u64,
) -> Result<(Vec<TraceRecord>, Vec<TraceRecord>), WorkloadError> {
    let mut by_task: BTreeMap<&str, Vec<&TraceRecord>> = BTreeMap::new();
    for r in trace {
        by_task.entry(&r.task_id).or_default().push(r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (task, mut recs) in by_task {
        if recs.len() < train_n + test_n {
            return Err(WorkloadError::InsufficientRecords {
                task: task.to_string(),
                have: recs.len(),
                need: train_n + test_n,
            });
        }
        recs.shuffle(&mut rng);
        train.extend(recs[..train_n].iter().map(|r| (*r).clone()));
        test.extend(recs[train_n..train_n + test_n].iter().map(|r| (*r).clone()));
    }
    train.sort_by_key(|r| r.id);
    test.sort_by_key(|r| r.id);
    Ok((train, test))
}

pub fn write_trace<W: Write>(mut w: W, trace: &[TraceRecord]) -> Result<(), WorkloadError> {
    for r in trace {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads JSONL; blank lines are skipped. Records must be sorted by arrival.
pub fn read_trace<R: BufRead>(r: R) -> Result<Vec<TraceRecord>, WorkloadError> {
    let mut out: Vec<TraceRecord> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|source| WorkloadError::Parse { line: i + 1, source })?;
        if let Some(prev) = out.last() {
            if rec.arrival_s < prev.arrival_s {
                return Err(WorkloadError::Invalid(format!(
                    "trace line {}: arrival {} precedes {}",
                    i + 1,
                    rec.arrival_s,
                    prev.arrival_s
                )));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn save_trace(path: &std::path::Path, trace: &[TraceRecord]) -> Result<(), WorkloadError> {
    write_trace(std::io::BufWriter::new(std::fs::File::create(path)?), trace)
}

pub fn load_trace(path: &std::path::Path) -> Result<Vec<TraceRecord>, WorkloadError> {
    read_trace(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}
