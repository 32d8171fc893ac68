//! Picks the next queued batch for an idle instance.

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::batcher::BatchQueue;
use crate::estimator::KnnModel;
use crate::model::Batch;

/// Why a batch was chosen by the response-ratio scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDecision {
    pub batch_id: u64,
    /// Queuing time divided by estimated serving time.
    pub response_ratio: f64,
    pub queuing_time: f64,
    pub estimated_serving_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub batch: Batch,
    /// `None` when the batch was picked first-in-first-out.
    pub decision: Option<ScheduleDecision>,
}

/// Removes and returns the earliest-created batch.
pub fn fifo_select(queue: &mut BatchQueue) -> Option<Batch> {
    queue.pop_front()
}

/// Removes and returns the batch with the highest `T_q / T_s`, where `T_q`
/// is the wait of its oldest member and `T_s` the estimator's serving time.
/// Equal ratios go to the earlier batch. If any estimate fails or is not
/// positive, falls back to FIFO and logs the event.
pub fn hrrn_select(queue: &mut BatchQueue, estimator: &KnnModel, now: f64) -> Option<Selection> {
    if queue.is_empty() {
        return None;
    }
    let mut best: Option<ScheduleDecision> = None;
    for b in queue.batches() {
        let ts = match estimator.estimate(b) {
            Ok(t) if t > 0.0 && t.is_finite() => t,
            Ok(t) => {
                warn!(batch = b.id, estimate = t, "non-positive serving-time estimate, falling back to FIFO");
                return fifo_select(queue).map(|batch| Selection { batch, decision: None });
            }
            Err(e) => {
                warn!(batch = b.id, error = %e, "serving-time estimator failed, falling back to FIFO");
                return fifo_select(queue).map(|batch| Selection { batch, decision: None });
            }
        };
        let tq = b.queuing_time(now);
        let ratio = tq / ts;
        if best.map_or(true, |d| ratio > d.response_ratio) {
            best = Some(ScheduleDecision {
                batch_id: b.id,
                response_ratio: ratio,
                queuing_time: tq,
                estimated_serving_time: ts,
            });
        }
    }
    let decision = best?;
    let batch = queue.remove(decision.batch_id)?;
    Some(Selection {
        batch,
        decision: Some(decision),
    })
}
