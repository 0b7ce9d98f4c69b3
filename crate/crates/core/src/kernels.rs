//! Numeric kernels shared by every other module: tempered softmax,
//! interpolation, perplexity, entropy and deterministic top-k selection.
//!
//! All probability math is done in `f64`. Masked scores are `-inf`. Ties in
//! any ranking are broken by the smaller index. Logarithms are natural.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when validating that a vector is normalized.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Similarity function between a key and a query. Scores are always
/// "larger is better": `L2` is the negative squared distance, `Ip` the dot
/// product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    L2,
    Ip,
}

impl Metric {
    pub fn as_u8(self) -> u8 {
        match self {
            Metric::L2 => 0,
            Metric::Ip => 1,
        }
    }

    pub fn from_u8(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Metric::L2),
            1 => Some(Metric::Ip),
            _ => None,
        }
    }

    /// Score of `key` against `query`.
    #[inline]
    pub fn score(self, key: &[f64], query: &[f64]) -> f64 {
        match self {
            Metric::L2 => -squared_l2(key, query),
            Metric::Ip => dot(key, query),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::L2 => "l2",
            Metric::Ip => "ip",
        })
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(Metric::L2),
            "ip" => Ok(Metric::Ip),
            other => Err(Error::param(format!("unknown metric `{other}`"))),
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

#[inline]
pub fn squared_l2(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |acc, (x, y)| {
        let d = x - y;
        acc + d * d
    })
}

/// A probability distribution over a vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates non-negativity and normalization.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::param("probability vector must be non-empty"));
        }
        if let Some(i) = entries.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::param(format!(
                "entry {i} is not a non-negative finite probability ({})",
                entries[i]
            )));
        }
        let total: f64 = entries.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::param(format!("entries sum to {total}, not 1")));
        }
        Ok(ProbVector(entries))
    }

    pub(crate) fn from_vec_unchecked(entries: Vec<f64>) -> Self {
        ProbVector(entries)
    }

    pub fn one_hot(vocab_size: usize, id: usize) -> Result<Self> {
        if id >= vocab_size {
            return Err(Error::param(format!(
                "id {id} outside vocabulary of size {vocab_size}"
            )));
        }
        let mut v = vec![0.0; vocab_size];
        v[id] = 1.0;
        Ok(ProbVector(v))
    }

    pub fn uniform(vocab_size: usize) -> Self {
        ProbVector(vec![1.0 / vocab_size as f64; vocab_size])
    }

    pub fn vocab_size(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        entropy(&self.0)
    }
}

impl Deref for ProbVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A score per candidate, tagged with the metric that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    entries: Vec<f64>,
    metric: Metric,
}

impl ScoreVector {
    pub fn new(entries: Vec<f64>, metric: Metric) -> Self {
        ScoreVector { entries, metric }
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Keeps the `k` best scores and sets every other entry to `-inf`.
    pub fn mask_to_k(&self, k: usize) -> Result<ScoreVector> {
        let keep = topk_indices(&self.entries, k)?;
        let mut masked = vec![f64::NEG_INFINITY; self.entries.len()];
        for i in keep {
            masked[i] = self.entries[i];
        }
        Ok(ScoreVector::new(masked, self.metric))
    }

    pub fn softmax(&self, tau: f64) -> Result<ProbVector> {
        softmax_with_temperature(&self.entries, tau)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::param(format!("temperature must be > 0, got {tau}")))
    }
}

/// `exp(s_i / tau) / sum_j exp(s_j / tau)`, with `-inf` scores mapping to 0.
pub fn softmax_with_temperature(scores: &[f64], tau: f64) -> Result<ProbVector> {
    check_tau(tau)?;
    let mut max = f64::NEG_INFINITY;
    for &s in scores {
        if s.is_nan() || s == f64::INFINITY {
            return Err(Error::param(format!("score {s} is not admissible")));
        }
        if s > max {
            max = s;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::Degenerate(
            "softmax needs at least one finite score".into(),
        ));
    }
    let mut out: Vec<f64> = scores
        .iter()
        .map(|&s| {
            if s == f64::NEG_INFINITY {
                0.0
            } else {
                ((s - max) / tau).exp()
            }
        })
        .collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(ProbVector(out))
}

/// Log-sum-exp of `scores / tau`, ignoring `-inf` entries.
pub fn log_sum_exp(scores: &[f64], tau: f64) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = scores
        .iter()
        .filter(|s| **s != f64::NEG_INFINITY)
        .map(|&s| ((s - max) / tau).exp())
        .sum();
    max / tau + sum.ln()
}

/// `(1 - lambda) * p_lm + lambda * p_knn`.
pub fn interpolate(p_lm: &ProbVector, p_knn: &ProbVector, lambda: f64) -> Result<ProbVector> {
    check_lambda(lambda)?;
    if p_lm.len() != p_knn.len() {
        return Err(Error::shape("interpolate", p_lm.len(), p_knn.len()));
    }
    Ok(ProbVector(mix(p_lm, p_knn, lambda)))
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::param(format!("lambda must lie in [0, 1], got {lambda}")))
    }
}

pub(crate) fn mix(a: &[f64], b: &[f64], lambda: f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(x, y)| (1.0 - lambda) * x + lambda * y)
        .collect()
}

/// `exp(-mean(log_probs))`; `+inf` as soon as one token has probability 0.
pub fn perplexity(log_probs: &[f64]) -> Result<f64> {
    if log_probs.is_empty() {
        return Err(Error::param("perplexity of an empty series"));
    }
    if let Some(bad) = log_probs.iter().find(|l| l.is_nan() || **l > 0.0) {
        return Err(Error::param(format!("{bad} is not a log-probability")));
    }
    if log_probs.contains(&f64::NEG_INFINITY) {
        return Ok(f64::INFINITY);
    }
    let mean = log_probs.iter().sum::<f64>() / log_probs.len() as f64;
    Ok((-mean).exp())
}

/// Shannon entropy in nats; zero entries contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|x| **x > 0.0)
        .map(|x| x * x.ln())
        .sum::<f64>()
}

/// Indices of the `k` largest finite scores, best first, smaller index on
/// ties. Returns every finite index when fewer than `k` exist.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::param("k must be at least 1"));
    }
    let mut acc = TopK::new(k);
    for (i, &s) in scores.iter().enumerate() {
        if s.is_finite() {
            acc.push(i, s);
        }
    }
    Ok(acc.into_sorted().into_iter().map(|(i, _)| i).collect())
}

/// Ranking order used everywhere: higher score first, then smaller index.
#[inline]
pub fn rank_order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

#[derive(Debug, Clone, Copy)]
struct Ranked {
    index: usize,
    score: f64,
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

// Greater means worse, so the max-heap root is the weakest survivor.
impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order((self.index, self.score), (other.index, other.score))
    }
}

/// Bounded accumulator of the `k` best `(index, score)` pairs under
/// [`rank_order`]. Because the order is total, the result does not depend on
/// insertion order, which makes sharded and parallel merges exact.
#[derive(Debug, Clone)]
pub struct TopK {
    k: usize,
    heap: BinaryHeap<Ranked>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k.min(1 << 16) + 1),
        }
    }

    #[inline]
    pub fn push(&mut self, index: usize, score: f64) {
        let item = Ranked { index, score };
        if self.heap.len() < self.k {
            self.heap.push(item);
        } else if let Some(worst) = self.heap.peek() {
            if item < *worst {
                self.heap.pop();
                self.heap.push(item);
            }
        }
    }

    pub fn merge(&mut self, other: TopK) {
        for r in other.heap {
            self.push(r.index, r.score);
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn into_sorted(self) -> Vec<(usize, f64)> {
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|r| (r.index, r.score))
            .collect()
    }
}
