//! Random-forest regressor (CART trees on bootstrap samples, variance
//! reduction splits, per-split feature subsampling).
//!
//! Each tree presorts its bootstrap sample once per feature and keeps every
//! column sorted while partitioning, so a node costs O(features * rows)
//! instead of a sort per candidate feature.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ForestError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("feature vector has {got} entries, expected {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("invalid hyperparameters: {0}")]
    Hyperparams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` means `ceil(D / 3)`.
    #[serde(default)]
    pub max_features: Option<usize>,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 24,
            min_leaf: 2,
            max_features: None,
        }
    }
}

impl ForestConfig {
    pub fn features_per_split(&self, dim: usize) -> usize {
        self.max_features.unwrap_or_else(|| dim.div_ceil(3)).clamp(1, dim.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub features: Vec<f64>,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    pub seed: u64,
    pub feature_dim: usize,
    pub config: ForestConfig,
}

impl ForestModel {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Mean of the tree outputs.
    pub fn predict(&self, x: &[f64]) -> Result<f64, ForestError> {
        if x.len() != self.feature_dim {
            return Err(ForestError::FeatureDim {
                expected: self.feature_dim,
                got: x.len(),
            });
        }
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        Ok(sum / self.trees.len() as f64)
    }
}

/// Trains a forest; deterministic for a given `seed`.
pub fn train_forest(
    examples: &[TrainExample],
    config: &ForestConfig,
    seed: u64,
) -> Result<ForestModel, ForestError> {
    let first = examples.first().ok_or(ForestError::EmptyTrainingSet)?;
    let dim = first.features.len();
    if let Some(bad) = examples.iter().find(|e| e.features.len() != dim) {
        return Err(ForestError::FeatureDim {
            expected: dim,
            got: bad.features.len(),
        });
    }
    if config.n_trees == 0 || config.min_leaf == 0 {
        return Err(ForestError::Hyperparams("n_trees and min_leaf must be >= 1".into()));
    }
    // column-major copy for cache-friendly scans
    let columns: Vec<Vec<f64>> = (0..dim).map(|f| examples.iter().map(|e| e.features[f]).collect()).collect();
    let targets: Vec<f64> = examples.iter().map(|e| e.target).collect();
    let data = Data {
        columns: &columns,
        targets: &targets,
    };
    let trees = (0..config.n_trees)
        .map(|t| {
            let tree_seed = seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let mut rng = ChaCha8Rng::seed_from_u64(tree_seed);
            grow_tree(&data, config, &mut rng)
        })
        .collect();
    Ok(ForestModel {
        trees,
        seed,
        feature_dim: dim,
        config: *config,
    })
}

struct Data<'a> {
    columns: &'a [Vec<f64>],
    targets: &'a [f64],
}

struct Builder<'a> {
    data: &'a Data<'a>,
    config: &'a ForestConfig,
    mtry: usize,
    /// One array per feature holding sample row ids sorted by that feature.
    sorted: Vec<Vec<u32>>,
    goes_left: Vec<bool>,
    scratch: Vec<u32>,
    nodes: Vec<Node>,
}

fn grow_tree(data: &Data<'_>, config: &ForestConfig, rng: &mut ChaCha8Rng) -> Tree {
    let n = data.targets.len();
    let dim = data.columns.len();
    let mut rows: Vec<u32> = (0..n).map(|_| rng.gen_range(0..n) as u32).collect();
    rows.sort_unstable();
    let sorted = (0..dim)
        .map(|f| {
            let col = &data.columns[f];
            let mut r = rows.clone();
            r.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
            r
        })
        .collect();
    let mut b = Builder {
        data,
        config,
        mtry: config.features_per_split(dim),
        sorted,
        goes_left: vec![false; n],
        scratch: Vec::with_capacity(n),
        nodes: Vec::new(),
    };
    if dim == 0 {
        let mean = rows.iter().map(|&r| data.targets[r as usize]).sum::<f64>() / n as f64;
        return Tree {
            nodes: vec![Node::Leaf { value: mean }],
        };
    }
    b.build(0, n, 0, rng);
    Tree { nodes: b.nodes }
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    left_count: usize,
}

impl Builder<'_> {
    fn build(&mut self, lo: usize, hi: usize, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let idx = self.nodes.len();
        let (sum, sumsq) = self.sorted[0][lo..hi].iter().fold((0.0, 0.0), |(s, q), &r| {
            let y = self.data.targets[r as usize];
            (s + y, q + y * y)
        });
        let count = (hi - lo) as f64;
        let mean = sum / count;
        self.nodes.push(Node::Leaf { value: mean });
        let variance_free = sumsq - sum * sum / count <= 1e-12 * sumsq.abs().max(1.0);
        if depth >= self.config.max_depth || hi - lo < 2 * self.config.min_leaf || variance_free {
            return idx;
        }
        let Some(split) = self.find_split(lo, hi, sum, rng) else {
            return idx;
        };
        self.partition(lo, hi, &split);
        let mid = lo + split.left_count;
        let left = self.build(lo, mid, depth + 1, rng);
        let right = self.build(mid, hi, depth + 1, rng);
        self.nodes[idx] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        idx
    }

    fn find_split(&self, lo: usize, hi: usize, total: f64, rng: &mut ChaCha8Rng) -> Option<SplitChoice> {
        let dim = self.sorted.len();
        let n = hi - lo;
        let min_leaf = self.config.min_leaf;
        let mut best: Option<(f64, SplitChoice)> = None;
        for f in sample(rng, dim, self.mtry).into_iter() {
            let col = &self.data.columns[f];
            let rows = &self.sorted[f][lo..hi];
            let mut left_sum = 0.0;
            for i in 0..n - 1 {
                let r = rows[i] as usize;
                left_sum += self.data.targets[r];
                let nl = i + 1;
                let nr = n - nl;
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let (a, b) = (col[r], col[rows[i + 1] as usize]);
                if a >= b {
                    continue;
                }
                let right_sum = total - left_sum;
                // maximising this is the same as minimising child SSE
                let score = left_sum * left_sum / nl as f64 + right_sum * right_sum / nr as f64;
                if best.as_ref().map_or(true, |(s, _)| score > *s) {
                    let mut threshold = a + (b - a) / 2.0;
                    if threshold >= b {
                        threshold = a;
                    }
                    best = Some((
                        score,
                        SplitChoice {
                            feature: f,
                            threshold,
                            left_count: nl,
                        },
                    ));
                }
            }
        }
        // only accept splits that actually reduce the parent's SSE
        let parent = total * total / n as f64;
        best.filter(|(s, _)| *s > parent + 1e-12 * parent.abs().max(1.0)).map(|(_, c)| c)
    }

    fn partition(&mut self, lo: usize, hi: usize, split: &SplitChoice) {
        let col = &self.data.columns[split.feature];
        for &r in &self.sorted[split.feature][lo..hi] {
            self.goes_left[r as usize] = col[r as usize] <= split.threshold;
        }
        for f in 0..self.sorted.len() {
            let seg = &mut self.sorted[f][lo..hi];
            self.scratch.clear();
            let mut w = 0;
            for i in 0..seg.len() {
                let r = seg[i];
                if self.goes_left[r as usize] {
                    seg[w] = r;
                    w += 1;
                } else {
                    self.scratch.push(r);
                }
            }
            seg[w..].copy_from_slice(&self.scratch);
            debug_assert_eq!(w, split.left_count);
        }
    }
}
