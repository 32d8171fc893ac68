//! Deterministic discrete-event simulation of a pool of LLM instances.
//!
//! Events are ordered by `(time, kind priority, sequence)`, so runs are
//! reproducible bit for bit. Arrivals at a given instant are all batched
//! before any idle instance picks work at that instant.

pub mod config;
pub mod cost;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::batcher::{split_on_oom, BatchQueue, BatcherConfig, BatcherError};
use crate::estimator::{EstimatorError, KnnModel, ServedBatch};
use crate::logstore::{BatchLog, LogRecord, OomRecord, Rejection, RetrainRecord, RetrainTarget};
use crate::metrics::{compute_metrics, MetricsError, MetricsReport, RequestRecord, RmsePoint};
use crate::model::{static_batch_size, Batch, LlmProfile, ModelError, Request, Tokens};
use crate::predictor::{
    qualifies_for_retrain, rmse_of, EmbeddingProvider, ForestConfig, GenLenPredictor, LocalHasher, PredictorError, PredictorMode,
    ServedRequest, StoredExample,
};
use crate::scheduler::{fifo_select, hrrn_select, ScheduleDecision};

pub use config::{BatcherSettings, KnnSettings, LearningSettings, Policy, PredictorSettings, SimConfig};
pub use cost::{calibration_sweep, oom_check, serving_time, serving_time_for};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Batcher(#[from] BatcherError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EventKind {
    /// Index into the trace.
    Arrival(usize),
    RetrainPredictor,
    RetrainEstimator,
    Oom(usize),
    InstanceIdle(usize),
}

impl EventKind {
    fn priority(self) -> u8 {
        match self {
            EventKind::Arrival(_) => 0,
            EventKind::RetrainPredictor | EventKind::RetrainEstimator => 1,
            EventKind::Oom(_) => 2,
            EventKind::InstanceIdle(_) => 3,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl Event {
    fn key(&self) -> (f64, u8, u64) {
        (self.time, self.kind.priority(), self.seq)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // reversed so the max-heap pops the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        let (a, b) = (self.key(), other.key());
        b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).then(b.2.cmp(&a.2))
    }
}

/// One batch handed to an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchRecord {
    pub time: f64,
    pub instance: usize,
    pub batch_id: u64,
    pub size: usize,
    pub decision: Option<ScheduleDecision>,
}

#[derive(Debug, Clone)]
struct RunningBatch {
    batch: Batch,
    start: f64,
    estimated_time: Option<f64>,
    predicted_gen_len: Option<Tokens>,
}

#[derive(Debug, Clone)]
struct Active {
    request: Request,
    generated: Tokens,
    start: f64,
}

#[derive(Debug, Clone)]
enum InstanceState {
    Idle,
    Serving(RunningBatch),
    /// Partially served batch that will hit OOM at the scheduled event.
    Failing(RunningBatch, Tokens),
    Reloading,
    Continuous(Vec<Active>),
}

#[derive(Debug, Clone)]
struct Instance {
    state: InstanceState,
    wake_pending: bool,
    busy_time: f64,
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub records: Vec<RequestRecord>,
    /// All log records in event order.
    pub log: Vec<LogRecord>,
    pub dispatches: Vec<DispatchRecord>,
    /// Estimator the run started from, needed to replay its retraining.
    pub initial_estimator: KnnModel,
    /// Last fitted predictor, when the policy predicts.
    pub predictor: Option<GenLenPredictor>,
    /// Examples collected after the last fit (no prediction needed it since).
    pub unfitted: Vec<StoredExample>,
}

impl RunOutput {
    /// The predictor with every collected example learned.
    pub fn final_predictor(&self) -> Result<Option<GenLenPredictor>, SimError> {
        self.predictor
            .as_ref()
            .map(|p| p.refit_with(self.unfitted.clone()))
            .transpose()
            .map_err(SimError::from)
    }

    pub fn batches(&self) -> impl Iterator<Item = &BatchLog> {
        self.log.iter().filter_map(|r| match r {
            LogRecord::Batch(b) => Some(b),
            _ => None,
        })
    }

    pub fn ooms(&self) -> impl Iterator<Item = &OomRecord> {
        self.log.iter().filter_map(|r| match r {
            LogRecord::Oom(o) => Some(o),
            _ => None,
        })
    }

    pub fn retrains(&self) -> impl Iterator<Item = &RetrainRecord> {
        self.log.iter().filter_map(|r| match r {
            LogRecord::Retrain(x) => Some(x),
            _ => None,
        })
    }

    pub fn rejections(&self) -> impl Iterator<Item = &Rejection> {
        self.log.iter().filter_map(|r| match r {
            LogRecord::Rejection(x) => Some(x),
            _ => None,
        })
    }
}

/// Chooses the predictor a run will use, or `None` if the policy needs none.
/// A model is required unless the configured mode is `uilo`.
pub fn resolve_predictor(cfg: &SimConfig, model: Option<&GenLenPredictor>) -> Result<Option<(GenLenPredictor, PredictorMode)>, SimError> {
    if !cfg.policy.uses_predictor() {
        return Ok(None);
    }
    match (model, cfg.predictor.mode) {
        (Some(m), mode) => {
            let mode = mode.unwrap_or(m.mode);
            if mode != m.mode {
                return Err(SimError::Config(format!("predictor.mode is {mode} but the model was trained for {}", m.mode)));
            }
            Ok(Some((m.clone(), mode)))
        }
        (None, Some(PredictorMode::Uilo)) => {
            let p = GenLenPredictor::train(
                &[],
                PredictorMode::Uilo,
                ForestConfig::default(),
                cfg.effective_profile().g_max,
                cfg.predictor.seed,
            )?;
            Ok(Some((p, PredictorMode::Uilo)))
        }
        (None, _) => Err(SimError::Config(format!(
            "policy {} needs a predictor model unless predictor.mode is \"uilo\"",
            cfg.policy
        ))),
    }
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    embedder: &'a dyn EmbeddingProvider,
    profile: LlmProfile,
    trace: &'a [Request],
    heap: BinaryHeap<Event>,
    seq: u64,
    instances: Vec<Instance>,
    queue: BatchQueue,
    ccb_waiting: VecDeque<Request>,
    batcher: BatcherConfig,
    fixed_size: usize,
    predictor: Option<(GenLenPredictor, PredictorMode)>,
    /// Collected but not yet fitted; the refit waits for the next prediction.
    unfitted: Vec<StoredExample>,
    estimator: KnnModel,
    pending_requests: Vec<Request>,
    pending_batches: Vec<ServedBatch>,
    pending_batch_ids: Vec<u64>,
    pending_estimates: Vec<(f64, f64)>,
    records: Vec<RequestRecord>,
    log: Vec<LogRecord>,
    dispatches: Vec<DispatchRecord>,
    resolved: usize,
    n_batches: usize,
    batched_requests: usize,
    n_oom: usize,
    discarded_tokens: u64,
    predictor_rmse: Vec<RmsePoint>,
    estimator_rmse: Vec<RmsePoint>,
}

/// Runs `trace` to completion under `cfg`.
///
/// `model` supplies generation-length predictions for the length-aware
/// policies. The trace must be sorted by arrival time.
pub fn run(trace: &[Request], cfg: &SimConfig, model: Option<&GenLenPredictor>) -> Result<RunOutput, SimError> {
    run_with(trace, cfg, model, &LocalHasher)
}

/// Like [`run`], embedding texts with `embedder` for prediction and retraining.
pub fn run_with(
    trace: &[Request],
    cfg: &SimConfig,
    model: Option<&GenLenPredictor>,
    embedder: &dyn EmbeddingProvider,
) -> Result<RunOutput, SimError> {
    cfg.validate().map_err(SimError::Config)?;
    if trace.windows(2).any(|w| w[1].arrival_time < w[0].arrival_time) {
        return Err(SimError::Config("trace is not sorted by arrival time".into()));
    }
    let profile = cfg.effective_profile();
    let fixed_size = match cfg.fixed_batch_size {
        Some(b) => b,
        None => static_batch_size(&profile)?,
    };
    let predictor = resolve_predictor(cfg, model)?;
    let estimator = KnnModel::new(cfg.knn.k, calibration_sweep(&profile))?;
    let batcher = BatcherConfig {
        phi: cfg.batcher.phi,
        wait_bounds: cfg.batcher.wait_bounds,
        max_batch_size: (cfg.policy == Policy::Glp).then_some(fixed_size),
    };
    let mut e = Engine {
        cfg,
        embedder,
        profile,
        trace,
        heap: BinaryHeap::new(),
        seq: 0,
        instances: vec![
            Instance {
                state: InstanceState::Idle,
                wake_pending: false,
                busy_time: 0.0,
            };
            cfg.instances
        ],
        queue: BatchQueue::new(),
        ccb_waiting: VecDeque::new(),
        batcher,
        fixed_size,
        predictor,
        estimator: estimator.clone(),
        pending_requests: Vec::new(),
        unfitted: Vec::new(),
        pending_batches: Vec::new(),
        pending_batch_ids: Vec::new(),
        pending_estimates: Vec::new(),
        records: Vec::new(),
        log: Vec::new(),
        dispatches: Vec::new(),
        resolved: 0,
        n_batches: 0,
        batched_requests: 0,
        n_oom: 0,
        discarded_tokens: 0,
        predictor_rmse: Vec::new(),
        estimator_rmse: Vec::new(),
    };
    e.start();
    e.event_loop()?;
    let report = e.report()?;
    Ok(RunOutput {
        report,
        records: e.records,
        log: e.log,
        dispatches: e.dispatches,
        initial_estimator: estimator,
        predictor: e.predictor.map(|(p, _)| p),
        unfitted: e.unfitted,
    })
}

impl<'a> Engine<'a> {
    fn push(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Event { time, seq: self.seq, kind });
    }

    fn start(&mut self) {
        let latency = if self.predictor.is_some() { self.cfg.predictor.latency_s } else { 0.0 };
        for (i, r) in self.trace.iter().enumerate() {
            self.push(r.arrival_time + latency, EventKind::Arrival(i));
        }
        if self.cfg.learning_enabled() && !self.trace.is_empty() {
            let l = self.cfg.learning;
            self.push(l.predictor_interval_s, EventKind::RetrainPredictor);
            if self.cfg.policy == Policy::Magnus {
                self.push(l.estimator_interval_s, EventKind::RetrainEstimator);
            }
        }
    }

    fn outstanding(&self) -> bool {
        self.resolved < self.trace.len()
    }

    fn event_loop(&mut self) -> Result<(), SimError> {
        while let Some(ev) = self.heap.pop() {
            let now = ev.time;
            match ev.kind {
                EventKind::Arrival(i) => self.on_arrival(i, now)?,
                EventKind::RetrainPredictor => self.on_retrain_predictor(now)?,
                EventKind::RetrainEstimator => self.on_retrain_estimator(now)?,
                EventKind::Oom(inst) => self.on_oom(inst, now)?,
                EventKind::InstanceIdle(inst) => self.on_idle(inst, now)?,
            }
        }
        Ok(())
    }

    fn reject(&mut self, request_id: u64, now: f64, reason: String) {
        warn!(request = request_id, %reason, "request rejected");
        self.resolved += 1;
        self.log.push(LogRecord::Rejection(Rejection {
            time: now,
            request_id,
            reason,
        }));
    }

    fn wake_idle(&mut self, now: f64) {
        for i in 0..self.instances.len() {
            let inst = &self.instances[i];
            if matches!(inst.state, InstanceState::Idle) && !inst.wake_pending {
                self.instances[i].wake_pending = true;
                self.push(now, EventKind::InstanceIdle(i));
            }
        }
    }

    fn on_arrival(&mut self, idx: usize, now: f64) -> Result<(), SimError> {
        let mut req = self.trace[idx].clone();
        req.predicted_gen_len = None;
        if let Err(reason) = req.validate(&self.profile) {
            self.reject(req.id, now, reason);
            return Ok(());
        }
        if (req.request_len as f64 + 1.0) * self.profile.delta > self.profile.theta {
            self.reject(req.id, now, format!("request length {} does not fit in memory", req.request_len));
            return Ok(());
        }
        self.fit_pending()?;
        if let Some((p, mode)) = &self.predictor {
            req.predicted_gen_len = Some(p.predict_with(&req, *mode, self.embedder)?);
        }
        match self.cfg.policy {
            Policy::Ccb => self.ccb_waiting.push_back(req),
            Policy::Vs => {
                let target = self
                    .queue
                    .batches()
                    .last()
                    .filter(|b| b.insertable && b.size() < self.fixed_size)
                    .map(|b| b.id);
                match target {
                    Some(id) => {
                        self.queue.push_into(id, req);
                    }
                    None => {
                        self.queue.push_new(req, now);
                    }
                }
            }
            Policy::Glp | Policy::Abp | Policy::Magnus => {
                self.queue.insert(req, &self.profile, &self.batcher, now)?;
            }
        }
        self.wake_idle(now);
        Ok(())
    }

    fn on_idle(&mut self, inst: usize, now: f64) -> Result<(), SimError> {
        self.instances[inst].wake_pending = false;
        let state = std::mem::replace(&mut self.instances[inst].state, InstanceState::Idle);
        match state {
            InstanceState::Serving(run) => self.finish_batch(inst, run, now),
            InstanceState::Continuous(active) => return self.ccb_step(inst, active, now, true),
            InstanceState::Idle | InstanceState::Reloading => {}
            InstanceState::Failing(..) => unreachable!("failing batches end with an oom event"),
        }
        if self.cfg.policy == Policy::Ccb {
            return self.ccb_step(inst, Vec::new(), now, false);
        }
        self.dispatch(inst, now)
    }

    fn dispatch(&mut self, inst: usize, now: f64) -> Result<(), SimError> {
        let (mut batch, decision) = if self.cfg.policy == Policy::Magnus {
            match hrrn_select(&mut self.queue, &self.estimator, now) {
                Some(sel) => (sel.batch, sel.decision),
                None => return Ok(()),
            }
        } else {
            match fifo_select(&mut self.queue) {
                Some(b) => (b, None),
                None => return Ok(()),
            }
        };
        batch.insertable = false;
        self.dispatches.push(DispatchRecord {
            time: now,
            instance: inst,
            batch_id: batch.id,
            size: batch.size(),
            decision,
        });
        let predicted_gen_len = batch.predicted_gen_len().ok();
        let estimated_time = match (decision, predicted_gen_len) {
            (Some(d), _) => Some(d.estimated_serving_time),
            (None, Some(_)) => self.estimator.estimate(&batch).ok(),
            (None, None) => None,
        };
        let run = RunningBatch {
            batch,
            start: now,
            estimated_time,
            predicted_gen_len,
        };
        let b = &run.batch;
        let (elapsed, state) = match oom_check(b, &self.profile) {
            None => (serving_time(b, &self.profile), InstanceState::Serving(run)),
            Some(g) => {
                let t = serving_time_for(b.size(), b.batch_length(), g - 1, &self.profile.cost);
                (t, InstanceState::Failing(run, g))
            }
        };
        let done = now + elapsed;
        self.instances[inst].busy_time += elapsed;
        let kind = if matches!(state, InstanceState::Failing(..)) {
            EventKind::Oom(inst)
        } else {
            self.instances[inst].wake_pending = true;
            EventKind::InstanceIdle(inst)
        };
        self.instances[inst].state = state;
        self.push(done, kind);
        Ok(())
    }

    fn finish_batch(&mut self, inst: usize, run: RunningBatch, now: f64) {
        let b = &run.batch;
        let gen_b = b.actual_gen_len();
        for r in &b.requests {
            let rec = RequestRecord {
                id: r.id,
                task_id: r.task_id.clone(),
                request_len: r.request_len,
                user_input_len: r.user_input_len,
                predicted_gen_len: r.predicted_gen_len,
                actual_gen_len: r.actual_gen_len,
                arrival: r.arrival_time,
                start: run.start,
                finish: now,
                batch_id: Some(b.id),
                instance: inst,
                valid_tokens: r.actual_gen_len as u64,
                invalid_tokens: (gen_b - r.actual_gen_len) as u64,
            };
            self.log.push(LogRecord::Request(rec.clone()));
            self.records.push(rec);
            if r.predicted_gen_len.is_some() {
                self.pending_requests.push(r.clone());
            }
        }
        self.resolved += b.size();
        self.n_batches += 1;
        self.batched_requests += b.size();
        let actual_time = now - run.start;
        let log = BatchLog {
            batch_id: b.id,
            instance: inst,
            members: b.requests.iter().map(|r| r.id).collect(),
            size: b.size(),
            length: b.batch_length(),
            predicted_gen_len: run.predicted_gen_len,
            actual_gen_len: gen_b,
            estimated_time: run.estimated_time,
            actual_time,
            start: run.start,
            finish: now,
        };
        self.pending_batches.push(crate::logstore::served_batch(&log));
        self.pending_batch_ids.push(b.id);
        if let Some(est) = run.estimated_time {
            self.pending_estimates.push((est, actual_time));
        }
        self.log.push(LogRecord::Batch(log));
    }

    fn on_oom(&mut self, inst: usize, now: f64) -> Result<(), SimError> {
        let state = std::mem::replace(&mut self.instances[inst].state, InstanceState::Reloading);
        let InstanceState::Failing(run, g) = state else {
            unreachable!("oom event without a failing batch")
        };
        let b = run.batch;
        self.n_oom += 1;
        self.discarded_tokens += b.size() as u64 * (g - 1) as u64;
        debug!(batch = b.id, size = b.size(), iteration = g, "out of memory");
        let mut rec = OomRecord {
            time: now,
            batch_id: b.id,
            instance: inst,
            size: b.size(),
            failed_iteration: g,
            halves: None,
            half_sizes: None,
        };
        if b.size() >= 2 {
            let (a_id, b_id) = (self.queue.allocate_id(), self.queue.allocate_id());
            let (first, second) = split_on_oom(&b, a_id, b_id)?;
            rec.halves = Some((a_id, b_id));
            rec.half_sizes = Some((first.size(), second.size()));
            self.queue.enqueue(first);
            self.queue.enqueue(second);
            self.log.push(LogRecord::Oom(rec));
        } else {
            // a lone request that outgrows memory can never be served
            self.log.push(LogRecord::Oom(rec));
            let r = &b.requests[0];
            self.reject(r.id, now, format!("out of memory at iteration {g} even when served alone"));
        }
        let penalty = self.profile.cost.reload_penalty;
        self.instances[inst].busy_time += penalty;
        self.instances[inst].wake_pending = true;
        self.push(now + penalty, EventKind::InstanceIdle(inst));
        self.wake_idle(now);
        Ok(())
    }

    /// One continuous-batching step boundary: credit the step just run,
    /// release finished requests, admit waiting ones, schedule the next step.
    fn ccb_finish(&mut self, inst: usize, a: Active, at: f64) {
        let r = a.request;
        let rec = RequestRecord {
            id: r.id,
            task_id: r.task_id.clone(),
            request_len: r.request_len,
            user_input_len: r.user_input_len,
            predicted_gen_len: None,
            actual_gen_len: r.actual_gen_len,
            arrival: r.arrival_time,
            start: a.start,
            finish: at,
            batch_id: None,
            instance: inst,
            valid_tokens: r.actual_gen_len as u64,
            invalid_tokens: 0,
        };
        self.resolved += 1;
        self.log.push(LogRecord::Request(rec.clone()));
        self.records.push(rec);
    }

    /// One step boundary of a continuous-batching instance: credit the step's
    /// token, release finished requests, admit joiners (their prefill stalls
    /// the instance and yields their first token), then start the next step.
    fn ccb_step(&mut self, inst: usize, mut active: Vec<Active>, now: f64, stepped: bool) -> Result<(), SimError> {
        if stepped {
            for a in active.iter_mut() {
                a.generated += 1;
            }
        }
        let (done, running): (Vec<Active>, Vec<Active>) =
            active.into_iter().partition(|a| a.generated >= a.request.actual_gen_len);
        active = running;
        for a in done {
            self.ccb_finish(inst, a, now);
        }
        let cost = self.profile.cost;
        let mut stall = 0.0;
        while active.len() < self.cfg.ccb_capacity {
            let Some(r) = self.ccb_waiting.pop_front() else { break };
            stall += cost.a0 + cost.a1 * r.request_len as f64;
            let joiner = Active {
                request: r,
                generated: 1,
                start: now,
            };
            if joiner.request.actual_gen_len <= 1 {
                self.ccb_finish(inst, joiner, now + stall);
            } else {
                active.push(joiner);
            }
        }
        if active.is_empty() && stall == 0.0 {
            self.instances[inst].state = InstanceState::Idle;
            return Ok(());
        }
        let step = if active.is_empty() {
            // every joiner finished on its prefill token
            stall
        } else {
            let reads: f64 = active
                .iter()
                .map(|a| a.request.request_len as f64 + a.generated as f64 + 1.0)
                .sum();
            stall + cost.b0 + cost.b1 * reads
        };
        self.instances[inst].busy_time += step;
        self.instances[inst].state = InstanceState::Continuous(active);
        self.instances[inst].wake_pending = true;
        self.push(now + step, EventKind::InstanceIdle(inst));
        Ok(())
    }

    fn fit_pending(&mut self) -> Result<(), SimError> {
        if self.unfitted.is_empty() {
            return Ok(());
        }
        let added = std::mem::take(&mut self.unfitted);
        if let Some((p, _)) = &mut self.predictor {
            *p = p.refit_with(added)?;
        }
        Ok(())
    }

    fn on_retrain_predictor(&mut self, now: f64) -> Result<(), SimError> {
        let window = std::mem::take(&mut self.pending_requests);
        let pairs: Vec<(f64, f64)> = window
            .iter()
            .filter_map(|r| r.predicted_gen_len.map(|p| (p as f64, r.actual_gen_len as f64)))
            .collect();
        let collected: Vec<u64> = window
            .iter()
            .filter(|r| r.predicted_gen_len.is_some_and(|p| qualifies_for_retrain(p, r.actual_gen_len)))
            .map(|r| r.id)
            .collect();
        if let Some((model, _)) = &self.predictor {
            let served: Vec<ServedRequest<'_>> = window
                .iter()
                .filter_map(|r| {
                    r.predicted_gen_len.map(|p| ServedRequest {
                        request: r,
                        predicted: p,
                        actual: r.actual_gen_len,
                    })
                })
                .collect();
            let added = model.qualifying_examples(&served, self.embedder)?;
            debug_assert!(model.mode == PredictorMode::Uilo || added.len() == collected.len());
            self.unfitted.extend(added);
        }
        let rmse = rmse_of(&pairs);
        if let Some(r) = rmse {
            self.predictor_rmse.push(RmsePoint {
                time: now,
                rmse: r,
                samples: pairs.len(),
            });
        }
        debug!(time = now, examined = window.len(), collected = collected.len(), "predictor retrain");
        self.log.push(LogRecord::Retrain(RetrainRecord {
            time: now,
            target: RetrainTarget::Predictor,
            examined: window.len(),
            collected,
            rmse,
        }));
        if self.outstanding() {
            self.push(now + self.cfg.learning.predictor_interval_s, EventKind::RetrainPredictor);
        }
        Ok(())
    }

    fn on_retrain_estimator(&mut self, now: f64) -> Result<(), SimError> {
        let served = std::mem::take(&mut self.pending_batches);
        let ids = std::mem::take(&mut self.pending_batch_ids);
        let pairs = std::mem::take(&mut self.pending_estimates);
        let (next, idx) = self.estimator.continuous_learn(&served, now)?;
        self.estimator = next;
        let rmse = rmse_of(&pairs);
        if let Some(r) = rmse {
            self.estimator_rmse.push(RmsePoint {
                time: now,
                rmse: r,
                samples: pairs.len(),
            });
        }
        self.log.push(LogRecord::Retrain(RetrainRecord {
            time: now,
            target: RetrainTarget::Estimator,
            examined: served.len(),
            collected: idx.iter().map(|&i| ids[i]).collect(),
            rmse,
        }));
        if self.outstanding() {
            self.push(now + self.cfg.learning.estimator_interval_s, EventKind::RetrainEstimator);
        }
        Ok(())
    }

    fn report(&self) -> Result<MetricsReport, SimError> {
        let first = self.records.iter().map(|r| r.arrival).fold(f64::INFINITY, f64::min);
        let last = self.records.iter().map(|r| r.finish).fold(f64::NEG_INFINITY, f64::max);
        let horizon = last - first;
        let mut m = compute_metrics(&self.records, horizon)?;
        m.policy = self.cfg.policy.to_string();
        m.instances = self.cfg.instances;
        m.seed = self.cfg.seed;
        m.n_requests = self.trace.len();
        m.n_rejected = self.trace.len() - self.records.len();
        m.n_batches = self.n_batches;
        m.mean_batch_size = if self.n_batches > 0 {
            self.batched_requests as f64 / self.n_batches as f64
        } else {
            0.0
        };
        m.n_oom = self.n_oom;
        m.discarded_tokens = self.discarded_tokens;
        m.max_instance_utilization = self
            .instances
            .iter()
            .map(|i| i.busy_time / horizon)
            .fold(0.0, f64::max);
        if self.cfg.policy.uses_predictor() {
            m.phi = Some(self.cfg.batcher.phi);
            m.wait_bounds = Some(
                match self.cfg.batcher.wait_bounds {
                    crate::batcher::WaitBounds::Verbatim => "verbatim",
                    crate::batcher::WaitBounds::Exclusive => "exclusive",
                }
                .to_string(),
            );
            m.predictor_mode = self.predictor.as_ref().map(|(_, mode)| mode.to_string());
        }
        m.predictor_rmse = self.predictor_rmse.clone();
        m.estimator_rmse = self.estimator_rmse.clone();
        Ok(m)
    }
}
