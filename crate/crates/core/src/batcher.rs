//! Wasted-memory-access (WMA) accounting and the adaptive batcher that
//! places each arriving request into the queued batch where it wastes least.
//!
//! A request wastes KV reads in two ways: pad tokens read while it is still
//! generating (`wma_gen`), and whole-sequence reads after its EOS while it
//! waits for the longest member of its batch (`wma_wait`). A batch's WMA is
//! the worst member's total. All quantities use predicted generation
//! lengths, since actual ones are unknown before serving.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Batch, LlmProfile, ModelError, Request, Tokens};

#[derive(Debug, Error, PartialEq)]
pub enum BatcherError {
    #[error("batch length {batch_len} is shorter than request length {request_len}")]
    BatchShorterThanRequest { batch_len: Tokens, request_len: Tokens },
    #[error("batch generation length {batch_gen} is shorter than request generation length {request_gen}")]
    BatchGenShorterThanRequest { batch_gen: Tokens, request_gen: Tokens },
    #[error("batch {0} holds a single request and cannot be split")]
    Unsplittable(u64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which iterations count as waiting.
///
/// `Verbatim` sums from the request's own last generating iteration through
/// the batch's last iteration, inclusive on both ends. `Exclusive` starts one
/// iteration later and so counts only strictly post-EOS iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaitBounds {
    #[default]
    Verbatim,
    Exclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatcherConfig {
    /// WMA threshold below which a request may join an existing batch.
    pub phi: f64,
    #[serde(default)]
    pub wait_bounds: WaitBounds,
    /// Optional cap on batch size (the fixed-size ablation uses this).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_batch_size: Option<usize>,
}

impl Default for BatcherConfig {
    fn default() -> Self {
        Self {
            phi: 50_000.0,
            wait_bounds: WaitBounds::Verbatim,
            max_batch_size: None,
        }
    }
}

/// Pad reads of a request before its EOS: `G'(p) * (L_B - L(p))`.
pub fn wma_gen(p: &Request, batch_len: Tokens) -> Result<u64, BatcherError> {
    let gen = p.predicted()?;
    pad_reads(p.request_len, gen, batch_len)
}

fn pad_reads(request_len: Tokens, gen: Tokens, batch_len: Tokens) -> Result<u64, BatcherError> {
    if batch_len < request_len {
        return Err(BatcherError::BatchShorterThanRequest {
            batch_len,
            request_len,
        });
    }
    Ok(gen as u64 * (batch_len - request_len) as u64)
}

/// Reads spent while the request waits for the batch to finish.
pub fn wma_wait(
    p: &Request,
    batch_len: Tokens,
    batch_gen: Tokens,
    bounds: WaitBounds,
) -> Result<u64, BatcherError> {
    wait_reads(p.predicted()?, batch_len, batch_gen, bounds)
}

fn wait_reads(
    gen: Tokens,
    batch_len: Tokens,
    batch_gen: Tokens,
    bounds: WaitBounds,
) -> Result<u64, BatcherError> {
    if batch_gen < gen {
        return Err(BatcherError::BatchGenShorterThanRequest {
            batch_gen,
            request_gen: gen,
        });
    }
    let lo = match bounds {
        WaitBounds::Verbatim => gen as u64,
        WaitBounds::Exclusive => gen as u64 + 1,
    };
    let hi = batch_gen as u64;
    if lo > hi {
        return Ok(0);
    }
    let terms = hi - lo + 1;
    // sum of g over [lo, hi] plus terms * L_B
    Ok((lo + hi) * terms / 2 + terms * batch_len as u64)
}

/// WMA of a batch: the worst member's `wma_gen + wma_wait`.
pub fn wma_batch(batch: &Batch, bounds: WaitBounds) -> Result<u64, BatcherError> {
    wma_members(batch.requests.iter(), bounds)
}

fn wma_members<'a, I>(members: I, bounds: WaitBounds) -> Result<u64, BatcherError>
where
    I: Iterator<Item = &'a Request> + Clone,
{
    let mut batch_len = 0;
    let mut batch_gen = 0;
    let mut any = false;
    for r in members.clone() {
        any = true;
        batch_len = batch_len.max(r.request_len);
        batch_gen = batch_gen.max(r.predicted()?);
    }
    if !any {
        return Err(ModelError::EmptyBatch.into());
    }
    let mut worst = 0;
    for r in members {
        let gen = r.predicted()?;
        let w = pad_reads(r.request_len, gen, batch_len)? + wait_reads(gen, batch_len, batch_gen, bounds)?;
        worst = worst.max(w);
    }
    Ok(worst)
}

/// Estimated KV memory of a batch: `beta * (L(B) + G'(B)) * delta`.
pub fn mem_estimate(batch: &Batch, delta: f64) -> Result<f64, BatcherError> {
    let gen = batch.predicted_gen_len()?;
    Ok(batch.size() as f64 * (batch.batch_length() as f64 + gen as f64) * delta)
}

fn mem_with(batch: &Batch, p: &Request, delta: f64) -> Result<f64, BatcherError> {
    let len = batch.batch_length().max(p.request_len);
    let gen = batch.predicted_gen_len()?.max(p.predicted()?);
    Ok((batch.size() + 1) as f64 * (len as f64 + gen as f64) * delta)
}

/// Where `insert` put a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Placement {
    Joined(u64),
    Created(u64),
}

impl Placement {
    pub fn batch_id(self) -> u64 {
        match self {
            Placement::Joined(id) | Placement::Created(id) => id,
        }
    }
}

/// Waiting batches, kept in `created_at` order (ties by id).
#[derive(Debug, Clone, Default)]
pub struct BatchQueue {
    batches: Vec<Batch>,
    next_id: u64,
}

impl BatchQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn batches(&self) -> &[Batch] {
        &self.batches
    }

    pub fn get(&self, id: u64) -> Option<&Batch> {
        self.batches.iter().find(|b| b.id == id)
    }

    pub fn allocate_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    /// Opens a new singleton batch at the back of the queue.
    pub fn push_new(&mut self, p: Request, now: f64) -> u64 {
        let id = self.allocate_id();
        self.enqueue(Batch::singleton(id, p, now));
        id
    }

    /// Places a batch at its `created_at` position.
    pub fn enqueue(&mut self, batch: Batch) {
        let pos = self
            .batches
            .partition_point(|b| (b.created_at, b.id) <= (batch.created_at, batch.id));
        self.batches.insert(pos, batch);
    }

    pub fn remove(&mut self, id: u64) -> Option<Batch> {
        let pos = self.batches.iter().position(|b| b.id == id)?;
        Some(self.batches.remove(pos))
    }

    /// Appends `p` to an existing batch, bypassing WMA checks.
    pub fn push_into(&mut self, id: u64, p: Request) -> bool {
        match self.batches.iter_mut().find(|b| b.id == id) {
            Some(b) => {
                b.requests.push(p);
                true
            }
            None => false,
        }
    }

    /// Removes and returns the earliest-created batch.
    pub fn pop_front(&mut self) -> Option<Batch> {
        if self.batches.is_empty() {
            None
        } else {
            Some(self.batches.remove(0))
        }
    }

    /// The batch `insert` would join, or `None` if a new batch is needed.
    ///
    /// Scans insertable batches in queue order and keeps the strictly
    /// smallest post-insert WMA among those whose post-insert memory
    /// estimate fits in `theta`; equal WMA keeps the earlier batch.
    pub fn best_fit(
        &self,
        p: &Request,
        profile: &LlmProfile,
        config: &BatcherConfig,
    ) -> Result<Option<(u64, u64)>, BatcherError> {
        p.predicted()?;
        let mut best: Option<(u64, u64)> = None;
        for b in self.batches.iter().filter(|b| b.insertable) {
            if let Some(cap) = config.max_batch_size {
                if b.size() >= cap {
                    continue;
                }
            }
            if mem_with(b, p, profile.delta)? > profile.theta {
                continue;
            }
            let w = wma_members(b.requests.iter().chain(std::iter::once(p)), config.wait_bounds)?;
            if best.map_or(true, |(_, bw)| w < bw) {
                best = Some((b.id, w));
            }
        }
        Ok(best.filter(|&(_, w)| (w as f64) < config.phi))
    }

    /// Runs the WMA-directed insertion for one arriving request.
    pub fn insert(
        &mut self,
        p: Request,
        profile: &LlmProfile,
        config: &BatcherConfig,
        now: f64,
    ) -> Result<Placement, BatcherError> {
        match self.best_fit(&p, profile, config)? {
            Some((id, _)) => {
                self.push_into(id, p);
                Ok(Placement::Joined(id))
            }
            None => Ok(Placement::Created(self.push_new(p, now))),
        }
    }
}

/// Halves a batch that ran out of memory. The first `ceil(beta/2)` members
/// form the first half. Both halves are sealed and keep the original
/// `created_at` so they return to the front of the queue.
pub fn split_on_oom(batch: &Batch, first_id: u64, second_id: u64) -> Result<(Batch, Batch), BatcherError> {
    if batch.size() < 2 {
        return Err(BatcherError::Unsplittable(batch.id));
    }
    let mid = batch.size().div_ceil(2);
    let half = |id, reqs: &[Request]| Batch {
        id,
        requests: reqs.to_vec(),
        insertable: false,
        created_at: batch.created_at,
    };
    Ok((
        half(first_id, &batch.requests[..mid]),
        half(second_id, &batch.requests[mid..]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_util::{batch_of, req};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// What one KV entry holds, for the token-level oracle.
    #[derive(Clone, Copy, PartialEq)]
    enum Slot {
        Pad,
        Prompt,
        Valid,
        Invalid,
    }

    /// Replays serving token by token for one member and counts wasted reads.
    /// Iteration `i` reads the whole cache after appending its own entry.
    /// Before EOS only pad entries are wasted; after EOS every read is. The
    /// verbatim convention also charges the EOS iteration's full read.
    fn oracle_wma(len: u32, gen: u32, batch_len: u32, batch_gen: u32, bounds: WaitBounds) -> u64 {
        let mut cache: Vec<Slot> = (0..batch_len)
            .map(|i| if i < batch_len - len { Slot::Pad } else { Slot::Prompt })
            .collect();
        let mut wasted = 0u64;
        for i in 1..=batch_gen {
            cache.push(if i <= gen { Slot::Valid } else { Slot::Invalid });
            let reads = cache.len() as u64;
            let pads = cache.iter().filter(|s| **s == Slot::Pad).count() as u64;
            let waiting = i > gen || (i == gen && bounds == WaitBounds::Verbatim);
            if i <= gen {
                wasted += pads;
            }
            if waiting {
                wasted += reads;
            }
        }
        wasted
    }

    #[test]
    fn wma_gen_examples() {
        assert_eq!(wma_gen(&req(0, 5, 9), 5).unwrap(), 0);
        assert_eq!(wma_gen(&req(0, 3, 3), 5).unwrap(), 6);
        assert!(matches!(
            wma_gen(&req(0, 6, 3), 5),
            Err(BatcherError::BatchShorterThanRequest { .. })
        ));
    }

    #[test]
    fn wma_wait_examples() {
        let p = req(0, 1, 2);
        assert_eq!(wma_wait(&p, 5, 4, WaitBounds::Verbatim).unwrap(), 24);
        let p = req(0, 1, 4);
        assert_eq!(wma_wait(&p, 5, 4, WaitBounds::Exclusive).unwrap(), 0);
        assert_eq!(wma_wait(&p, 5, 4, WaitBounds::Verbatim).unwrap(), 9);
        assert!(matches!(
            wma_wait(&p, 5, 3, WaitBounds::Verbatim),
            Err(BatcherError::BatchGenShorterThanRequest { .. })
        ));
    }

    #[test]
    fn closed_forms_match_token_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let beta = rng.gen_range(1..=8);
            let reqs: Vec<_> = (0..beta)
                .map(|i| req(i, rng.gen_range(1..=64), rng.gen_range(1..=64)))
                .collect();
            let b = batch_of(0, reqs);
            let (bl, bg) = (b.batch_length(), b.predicted_gen_len().unwrap());
            for bounds in [WaitBounds::Verbatim, WaitBounds::Exclusive] {
                let mut worst = 0;
                for r in &b.requests {
                    let g = r.predicted_gen_len.unwrap();
                    let closed = wma_gen(r, bl).unwrap() + wma_wait(r, bl, bg, bounds).unwrap();
                    let oracle = oracle_wma(r.request_len, g, bl, bg, bounds);
                    assert_eq!(closed, oracle);
                    worst = worst.max(oracle);
                }
                assert_eq!(wma_batch(&b, bounds).unwrap(), worst);
            }
        }
    }

    #[test]
    fn wma_batch_examples() {
        let single = batch_of(0, vec![req(0, 17, 33)]);
        assert_eq!(wma_batch(&single, WaitBounds::Exclusive).unwrap(), 0);
        let twins = batch_of(0, vec![req(0, 17, 33), req(1, 17, 33)]);
        assert_eq!(wma_batch(&twins, WaitBounds::Exclusive).unwrap(), 0);
        let mut missing = req(2, 1, 1);
        missing.predicted_gen_len = None;
        let b = batch_of(0, vec![req(0, 1, 1), missing]);
        assert!(matches!(
            wma_batch(&b, WaitBounds::Verbatim),
            Err(BatcherError::Model(ModelError::MissingPrediction(2)))
        ));
    }

    #[test]
    fn mem_estimate_examples() {
        let b = batch_of(0, vec![req(0, 100, 200), req(1, 50, 10), req(2, 1, 1)]);
        assert_eq!(mem_estimate(&b, 2.0).unwrap(), 1800.0);
        assert_eq!(mem_estimate(&batch_of(0, vec![req(0, 1, 1)]), 1.0).unwrap(), 2.0);
    }

    #[test]
    fn empty_queue_creates_batch() {
        let mut q = BatchQueue::new();
        let p = q
            .insert(req(0, 10, 10), &LlmProfile::default(), &BatcherConfig::default(), 0.0)
            .unwrap();
        assert_eq!(p, Placement::Created(0));
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn small_and_large_requests_separate() {
        let mut q = BatchQueue::new();
        let profile = LlmProfile::default();
        let cfg = BatcherConfig::default();
        let mut id = 0;
        for i in 0..21 {
            let r = if i % 7 == 3 { req(id, 1000, 1000) } else { req(id, 10, 10) };
            id += 1;
            q.insert(r, &profile, &cfg, 0.0).unwrap();
        }
        let mut sizes: Vec<_> = q.batches().iter().map(|b| b.size()).collect();
        sizes.sort();
        assert_eq!(sizes, vec![3, 18]);
    }

    #[test]
    fn tiny_phi_never_joins() {
        let mut q = BatchQueue::new();
        let cfg = BatcherConfig {
            phi: 1e-9,
            ..Default::default()
        };
        for i in 0..5 {
            q.insert(req(i, 10, 10), &LlmProfile::default(), &cfg, 0.0).unwrap();
        }
        assert_eq!(q.len(), 5);
    }

    #[test]
    fn size_cap_is_respected() {
        let mut q = BatchQueue::new();
        let cfg = BatcherConfig {
            max_batch_size: Some(7),
            ..Default::default()
        };
        for i in 0..20 {
            q.insert(req(i, 10, 10), &LlmProfile::default(), &cfg, 0.0).unwrap();
        }
        let sizes: Vec<_> = q.batches().iter().map(|b| b.size()).collect();
        assert_eq!(sizes, vec![7, 7, 6]);
    }

    #[test]
    fn memory_guard_blocks_joins() {
        let profile = LlmProfile {
            theta: 3000.0,
            ..Default::default()
        };
        let mut q = BatchQueue::new();
        q.insert(req(0, 1000, 1000), &profile, &BatcherConfig::default(), 0.0).unwrap();
        let p = q.insert(req(1, 1000, 1000), &profile, &BatcherConfig::default(), 0.0).unwrap();
        assert_eq!(p, Placement::Created(1));
    }

    #[test]
    fn sealed_batches_are_skipped() {
        let mut q = BatchQueue::new();
        let profile = LlmProfile::default();
        let cfg = BatcherConfig::default();
        q.insert(req(0, 10, 10), &profile, &cfg, 0.0).unwrap();
        let mut b = q.remove(0).unwrap();
        b.insertable = false;
        let before = b.clone();
        q.enqueue(b);
        let p = q.insert(req(1, 10, 10), &profile, &cfg, 1.0).unwrap();
        assert_eq!(p, Placement::Created(1));
        assert_eq!(q.get(0).unwrap(), &before);
    }

    #[test]
    fn split_examples() {
        let b = batch_of(3, (0..4).map(|i| req(i, 5, 5)).collect());
        let (a, c) = split_on_oom(&b, 10, 11).unwrap();
        assert_eq!((a.size(), c.size()), (2, 2));
        assert!(!a.insertable && !c.insertable);
        let b = batch_of(3, (0..5).map(|i| req(i, 5, 5)).collect());
        let (a, c) = split_on_oom(&b, 10, 11).unwrap();
        assert_eq!((a.size(), c.size()), (3, 2));
        assert_eq!(a.requests[0].id, 0);
        assert_eq!(c.requests[0].id, 3);
        let b = batch_of(3, vec![req(0, 5, 5)]);
        assert_eq!(split_on_oom(&b, 1, 2), Err(BatcherError::Unsplittable(3)));
    }

    /// Exhaustive oracle for the placement rule: evaluate every feasible
    /// batch independently, then pick the minimum with earliest-first ties.
    fn oracle_choice(q: &BatchQueue, p: &Request, profile: &LlmProfile, cfg: &BatcherConfig) -> Option<u64> {
        let mut feasible = Vec::new();
        for b in q.batches().iter().filter(|b| b.insertable) {
            let mut merged = b.clone();
            merged.requests.push(p.clone());
            if mem_estimate(&merged, profile.delta).unwrap() <= profile.theta {
                feasible.push((wma_batch(&merged, cfg.wait_bounds).unwrap(), b.created_at, b.id));
            }
        }
        feasible.sort_by(|a, b| a.partial_cmp(b).unwrap());
        feasible.first().filter(|f| (f.0 as f64) < cfg.phi).map(|f| f.2)
    }

    proptest! {
        #[test]
        fn insert_matches_exhaustive_scan(
            batches in proptest::collection::vec(
                (proptest::collection::vec((1u32..200, 1u32..200), 1..5), any::<bool>()), 0..5),
            p in (1u32..200, 1u32..200),
            phi in 100.0f64..60_000.0,
            exclusive in any::<bool>(),
        ) {
            let profile = LlmProfile { theta: 2000.0, ..Default::default() };
            let cfg = BatcherConfig {
                phi,
                wait_bounds: if exclusive { WaitBounds::Exclusive } else { WaitBounds::Verbatim },
                max_batch_size: None,
            };
            let mut q = BatchQueue::new();
            let mut rid = 100;
            for (i, (members, sealed)) in batches.iter().enumerate() {
                let id = q.allocate_id();
                let reqs = members.iter().map(|&(l, g)| { rid += 1; req(rid, l, g) }).collect();
                q.enqueue(Batch { id, requests: reqs, insertable: !sealed, created_at: i as f64 });
            }
            let incoming = req(1, p.0, p.1);
            let expected = oracle_choice(&q, &incoming, &profile, &cfg);
            let sealed_before: Vec<_> = q.batches().iter().filter(|b| !b.insertable).cloned().collect();
            let placement = q.insert(incoming, &profile, &cfg, 10.0).unwrap();
            match expected {
                Some(id) => prop_assert_eq!(placement, Placement::Joined(id)),
                None => prop_assert!(matches!(placement, Placement::Created(_))),
            }
            if let Placement::Joined(id) = placement {
                prop_assert!(mem_estimate(q.get(id).unwrap(), profile.delta).unwrap() <= profile.theta);
            }
            for b in sealed_before {
                prop_assert_eq!(q.get(b.id).unwrap(), &b);
            }
        }

        #[test]
        fn mem_estimate_never_decreases_on_insert(
            members in proptest::collection::vec((1u32..500, 1u32..500), 1..10),
            extra in (1u32..500, 1u32..500),
        ) {
            let mut b = batch_of(0, members.iter().enumerate().map(|(i, &(l, g))| req(i as u64, l, g)).collect());
            let before = mem_estimate(&b, 1.0).unwrap();
            b.requests.push(req(99, extra.0, extra.1));
            prop_assert!(mem_estimate(&b, 1.0).unwrap() >= before);
        }

        #[test]
        fn exclusive_zero_iff_homogeneous(
            members in proptest::collection::vec((1u32..6, 1u32..6), 1..6),
        ) {
            let b = batch_of(0, members.iter().enumerate().map(|(i, &(l, g))| req(i as u64, l, g)).collect());
            let homogeneous = members.iter().all(|m| *m == members[0]);
            prop_assert_eq!(wma_batch(&b, WaitBounds::Exclusive).unwrap() == 0, homogeneous);
        }
    }
}
