//! Cost and memory model standing in for GPU batch serving.
//!
//! Serving a batch costs an init phase linear in the padded prompt tokens,
//! then one iteration per generated token whose cost is linear in the KV
//! entries read: `a0 + a1*beta*L + sum_{g=1..G} (b0 + b1*beta*(L+g))`.

use crate::estimator::{BatchFeatures, TimingExample};
use crate::model::{Batch, CostCoefficients, LlmProfile, Tokens};

/// Serving time of `size` requests padded to `len` for `gen` iterations.
pub fn serving_time_for(size: usize, len: Tokens, gen: Tokens, cost: &CostCoefficients) -> f64 {
    let beta = size as f64;
    let l = len as f64;
    let g = gen as f64;
    // sum_{k=1..G} (L + k) = G*L + G(G+1)/2
    let kv_reads = g * l + g * (g + 1.0) / 2.0;
    cost.a0 + cost.a1 * beta * l + g * cost.b0 + cost.b1 * beta * kv_reads
}

/// Serving time of a batch using its actual generation lengths.
pub fn serving_time(batch: &Batch, profile: &LlmProfile) -> f64 {
    serving_time_for(batch.size(), batch.batch_length(), batch.actual_gen_len(), &profile.cost)
}

/// First iteration at which the batch's KV cache outgrows memory, using
/// actual lengths: smallest `g` with `beta * (L + g) * delta > theta`.
pub fn oom_check(batch: &Batch, profile: &LlmProfile) -> Option<Tokens> {
    oom_iteration(batch.size(), batch.batch_length(), batch.actual_gen_len(), profile)
}

pub fn oom_iteration(size: usize, len: Tokens, gen: Tokens, profile: &LlmProfile) -> Option<Tokens> {
    let beta = size as f64;
    let fits = |g: Tokens| beta * (len as f64 + g as f64) * profile.delta <= profile.theta;
    if fits(gen) {
        return None;
    }
    // memory grows with g, so binary search for the first failing iteration
    let (mut lo, mut hi) = (0, gen);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(hi.max(1))
}

/// Cold-start examples for the serving-time estimator: a grid of batch
/// shapes run through the cost model.
pub fn calibration_sweep(profile: &LlmProfile) -> Vec<TimingExample> {
    const SIZES: [usize; 5] = [1, 2, 4, 8, 16];
    let grid: Vec<Tokens> = [8, 32, 64, 128, 256, 512, 768, 1024]
        .into_iter()
        .filter(|&v| v <= profile.l_max.max(profile.g_max))
        .collect();
    let mut out = Vec::new();
    for &beta in &SIZES {
        for &l in grid.iter().filter(|&&l| l <= profile.l_max) {
            for &g in grid.iter().filter(|&&g| g <= profile.g_max) {
                out.push(TimingExample {
                    features: BatchFeatures::new(beta, l, g),
                    serving_time: serving_time_for(beta, l, g, &profile.cost),
                });
            }
        }
    }
    out
}
