//! Realizations of the right-hand term: kNN heads, aggregation maps, learned
//! multi-embedding heads, mixture of softmaxes, cluster heads and the
//! sparsifier, plus the one-shot generalized predictor.

mod alloc;
mod generalized;
mod io;
mod mos;

use crate::ann::{kmeans, NeighborSet};
use crate::error::{Error, Result};
use crate::kernels::{softmax_with_temperature, Metric, ProbVector, ScoreVector};
use crate::store::Datastore;

pub use alloc::{allocate_embeddings, AllocationScheme};
pub use generalized::{generalized_predict, retrieve, HeadConfig, HeadKind, HeadModels, Prediction};
pub use io::SavedHead;
pub use mos::{mos_predict, MoSForward, MoSHead};

/// Tolerance on the column sums of a fractional aggregation map.
const COLUMN_TOL: f64 = 1e-12;

/// Maps each score row (datastore entry or head embedding) to vocabulary
/// mass: `out[v] = sum_i w_i * M[v, i]`.
#[derive(Debug, Clone, PartialEq)]
pub enum AggregationMap {
    /// Row `i` belongs entirely to vocabulary id `owners[i]`.
    OneHot { owners: Vec<u32>, vocab_size: usize },
    /// Row `i` spreads over `(id, weight)` pairs summing to 1.
    Sparse {
        columns: Vec<Vec<(u32, f64)>>,
        vocab_size: usize,
    },
}

impl AggregationMap {
    pub fn one_hot(owners: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if let Some(o) = owners.iter().find(|o| **o as usize >= vocab_size) {
            return Err(Error::input(format!(
                "owner id {o} outside vocabulary of size {vocab_size}"
            )));
        }
        Ok(AggregationMap::OneHot { owners, vocab_size })
    }

    pub fn sparse(columns: Vec<Vec<(u32, f64)>>, vocab_size: usize) -> Result<Self> {
        for (i, col) in columns.iter().enumerate() {
            if col.is_empty() {
                return Err(Error::input(format!("aggregation column {i} is empty")));
            }
            let mut total = 0.0;
            for &(v, w) in col {
                if v as usize >= vocab_size || !(w.is_finite() && w >= 0.0) {
                    return Err(Error::input(format!(
                        "aggregation column {i} has invalid entry ({v}, {w})"
                    )));
                }
                total += w;
            }
            if (total - 1.0).abs() > COLUMN_TOL {
                return Err(Error::input(format!(
                    "aggregation column {i} sums to {total}"
                )));
            }
        }
        Ok(AggregationMap::Sparse { columns, vocab_size })
    }

    /// Number of rows (columns of `M`).
    pub fn len(&self) -> usize {
        match self {
            AggregationMap::OneHot { owners, .. } => owners.len(),
            AggregationMap::Sparse { columns, .. } => columns.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            AggregationMap::OneHot { vocab_size, .. } | AggregationMap::Sparse { vocab_size, .. } => {
                *vocab_size
            }
        }
    }

    pub fn is_one_hot(&self) -> bool {
        matches!(self, AggregationMap::OneHot { .. })
    }

    /// Column `i` as `(id, weight)` pairs.
    pub fn column(&self, i: usize) -> Vec<(u32, f64)> {
        match self {
            AggregationMap::OneHot { owners, .. } => vec![(owners[i], 1.0)],
            AggregationMap::Sparse { columns, .. } => columns[i].clone(),
        }
    }

    /// `M w`; `weights` has one entry per row.
    pub fn aggregate(&self, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab_size()];
        match self {
            AggregationMap::OneHot { owners, .. } => {
                for (o, w) in owners.iter().zip(weights) {
                    out[*o as usize] += w;
                }
            }
            AggregationMap::Sparse { columns, .. } => {
                for (col, w) in columns.iter().zip(weights) {
                    for &(v, m) in col {
                        out[v as usize] += w * m;
                    }
                }
            }
        }
        out
    }

    /// `M^T g`: the per-row pull-back of a vocabulary-space vector.
    pub fn pull_back(&self, g: &[f64]) -> Vec<f64> {
        match self {
            AggregationMap::OneHot { owners, .. } => owners.iter().map(|o| g[*o as usize]).collect(),
            AggregationMap::Sparse { columns, .. } => columns
                .iter()
                .map(|col| col.iter().map(|&(v, m)| m * g[v as usize]).sum())
                .collect(),
        }
    }
}

/// A parametric head: `n_total` embedding rows whose softmax mass is
/// aggregated onto the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedHead {
    dim: usize,
    /// `n_total x dim`, row-major.
    embeddings: Vec<f64>,
    map: AggregationMap,
    /// Rows per vocabulary id when built from an allocation; empty for
    /// cluster heads.
    allocation: Vec<usize>,
    metric: Metric,
}

impl LearnedHead {
    /// Rows laid out type by type: `allocation[v]` rows owned by id `v`.
    pub fn from_allocation(dim: usize, allocation: Vec<usize>, embeddings: Vec<f64>) -> Result<Self> {
        if let Some(v) = allocation.iter().position(|a| *a == 0) {
            return Err(Error::Config(format!("vocabulary id {v} owns no embedding")));
        }
        let owners: Vec<u32> = allocation
            .iter()
            .enumerate()
            .flat_map(|(v, &n)| std::iter::repeat_n(v as u32, n))
            .collect();
        let map = AggregationMap::one_hot(owners, allocation.len())?;
        Self::new(dim, embeddings, map, allocation, Metric::Ip)
    }

    pub fn new(
        dim: usize,
        embeddings: Vec<f64>,
        map: AggregationMap,
        allocation: Vec<usize>,
        metric: Metric,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("head width must be at least 1"));
        }
        if embeddings.len() != map.len() * dim {
            return Err(Error::shape("head embeddings", map.len() * dim, embeddings.len()));
        }
        if embeddings.iter().any(|x| !x.is_finite()) {
            return Err(Error::input("head embeddings must be finite"));
        }
        if !allocation.is_empty() {
            if allocation.len() != map.vocab_size() {
                return Err(Error::shape("allocation", map.vocab_size(), allocation.len()));
            }
            if allocation.iter().sum::<usize>() != map.len() {
                return Err(Error::Config("allocation total differs from row count".into()));
            }
        }
        Ok(LearnedHead {
            dim,
            embeddings,
            map,
            allocation,
            metric,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.map.vocab_size()
    }

    pub fn n_total(&self) -> usize {
        self.map.len()
    }

    pub fn embeddings(&self) -> &[f64] {
        &self.embeddings
    }

    /// Same head with replaced embeddings.
    pub fn with_embeddings(&self, embeddings: Vec<f64>) -> Result<LearnedHead> {
        LearnedHead::new(self.dim, embeddings, self.map.clone(), self.allocation.clone(), self.metric)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn map(&self) -> &AggregationMap {
        &self.map
    }

    pub fn allocation(&self) -> &[usize] {
        &self.allocation
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    /// Score of every row against `h`.
    pub fn scores(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.dim {
            return Err(Error::shape("head query", self.dim, h.len()));
        }
        Ok(self
            .embeddings
            .chunks_exact(self.dim)
            .map(|row| self.metric.score(row, h))
            .collect())
    }
}

fn aggregated(map: &AggregationMap, weights: &ProbVector) -> ProbVector {
    ProbVector::from_vec_unchecked(map.aggregate(weights))
}

/// Softmax over neighbor scores at temperature `tau`, summed per value.
/// An empty set is a degenerate input: the head assigns no mass anywhere.
pub fn knn_distribution(
    neighbors: &NeighborSet,
    values: &[u32],
    tau: f64,
    vocab_size: usize,
) -> Result<ProbVector> {
    if neighbors.is_empty() {
        return Err(Error::Degenerate("empty neighbor set".into()));
    }
    let weights = softmax_with_temperature(&neighbors.scores(), tau)?;
    let mut out = vec![0.0; vocab_size];
    for (n, w) in neighbors.entries().iter().zip(weights.iter()) {
        let v = *values.get(n.row).ok_or_else(|| {
            Error::input(format!("neighbor row {} has no value", n.row))
        })? as usize;
        if v >= vocab_size {
            return Err(Error::input(format!(
                "value {v} outside vocabulary of size {vocab_size}"
            )));
        }
        out[v] += w;
    }
    Ok(ProbVector::from_vec_unchecked(out))
}

/// The kNN head with every datastore entry as a neighbor.
pub fn full_knn_distribution(
    ds: &Datastore,
    query: &[f64],
    tau: f64,
    metric: Metric,
    vocab_size: usize,
) -> Result<ProbVector> {
    if query.len() != ds.dim() {
        return Err(Error::shape("query width", ds.dim(), query.len()));
    }
    let scores: Vec<f64> = (0..ds.len()).map(|r| ds.score(r, query, metric)).collect();
    let weights = softmax_with_temperature(&scores, tau)?;
    let map = AggregationMap::one_hot(ds.values().to_vec(), vocab_size)?;
    Ok(aggregated(&map, &weights))
}

/// Softmax over all head rows (no mask), aggregated by owner.
pub fn learned_head_predict(h: &[f64], head: &LearnedHead, tau: f64) -> Result<ProbVector> {
    let weights = softmax_with_temperature(&head.scores(h)?, tau)?;
    Ok(aggregated(&head.map, &weights))
}

/// Clusters the datastore keys; each centroid becomes a head row whose
/// aggregation column is the value distribution of its members. Clusters
/// that end up empty are dropped.
pub fn cluster_head_from_datastore(
    ds: &Datastore,
    vocab_size: usize,
    n_centroids: usize,
    iters: usize,
    seed: u64,
) -> Result<LearnedHead> {
    let km = kmeans(&ds.rows_f64(), ds.dim(), n_centroids, iters, seed)?;
    let mut counts: Vec<std::collections::BTreeMap<u32, usize>> = vec![Default::default(); n_centroids];
    for (c, v) in km.assignments.iter().zip(ds.values()) {
        *counts[*c].entry(*v).or_default() += 1;
    }
    let mut embeddings = Vec::new();
    let mut columns = Vec::new();
    for (c, hist) in counts.iter().enumerate() {
        let total: usize = hist.values().sum();
        if total == 0 {
            continue;
        }
        embeddings.extend_from_slice(km.centroid(c));
        columns.push(
            hist.iter()
                .map(|(v, n)| (*v, *n as f64 / total as f64))
                .collect(),
        );
    }
    let map = AggregationMap::sparse(columns, vocab_size)?;
    LearnedHead::new(ds.dim(), embeddings, map, Vec::new(), Metric::L2)
}

/// `softmax(mask_to_k(log p) / tau)`; masked ids get exactly 0.
pub fn sparsify_distribution(p: &ProbVector, k: usize, tau: f64) -> Result<ProbVector> {
    let logs: Vec<f64> = p.iter().map(|x| x.ln()).collect();
    ScoreVector::new(logs, Metric::Ip).mask_to_k(k)?.softmax(tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::{exact_search, Neighbor, Regime};
    use crate::store::Precision;
    use proptest::prelude::*;

    fn set(scores: &[f64]) -> NeighborSet {
        let entries = scores
            .iter()
            .enumerate()
            .map(|(row, &score)| Neighbor { row, score })
            .collect();
        NeighborSet::new(entries, Metric::L2, Regime::Exact, Regime::Exact).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn knn_examples() {
        let p = knn_distribution(&set(&[-3.0]), &[2], 1.0, 4).unwrap();
        assert_eq!(p.as_slice(), &[0.0, 0.0, 1.0, 0.0]);

        for tau in [0.1, 1.0, 7.0] {
            let p = knn_distribution(&set(&[-1.0, -1.0]), &[0, 1], tau, 2).unwrap();
            assert!(close(&p, &[0.5, 0.5], 1e-15));
        }

        let ln2 = 2f64.ln();
        let p = knn_distribution(&set(&[0.0, -ln2, -ln2]), &[0, 1, 0], 1.0, 2).unwrap();
        assert!(close(&p, &[0.75, 0.25], 1e-12));

        let empty = NeighborSet::new(vec![], Metric::L2, Regime::Approx, Regime::Approx).unwrap();
        assert!(matches!(
            knn_distribution(&empty, &[], 1.0, 3),
            Err(Error::Degenerate(_))
        ));
        assert!(knn_distribution(&set(&[0.0]), &[9], 1.0, 3).is_err());
    }

    #[test]
    fn full_knn_examples() {
        let ds = Datastore::from_rows(&[0.0, 1.0], 1, vec![0, 1], Precision::F32).unwrap();
        let p = full_knn_distribution(&ds, &[0.0], 1.0, Metric::L2, 2).unwrap();
        let e = std::f64::consts::E;
        assert!(close(&p, &[e / (e + 1.0), 1.0 / (e + 1.0)], 1e-12));

        let ds = Datastore::from_rows(&[0.0, 1.0, 5.0], 1, vec![2, 2, 2], Precision::F32).unwrap();
        let p = full_knn_distribution(&ds, &[3.3], 0.5, Metric::Ip, 3).unwrap();
        assert!(close(&p, &[0.0, 0.0, 1.0], 1e-15));
    }

    #[test]
    fn learned_head_examples() {
        // n = 1: ordinary softmax over the rows
        let emb = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let head = LearnedHead::from_allocation(2, vec![1, 1, 1], emb.clone()).unwrap();
        let h = [0.3, -0.7];
        let direct = softmax_with_temperature(&[0.3, -0.7, -0.4], 1.0).unwrap();
        assert!(close(&learned_head_predict(&h, &head, 1.0).unwrap(), &direct, 1e-15));

        // duplicated rows leave the prediction unchanged
        let dup: Vec<f64> = emb.chunks(2).flat_map(|r| [r, r].concat()).collect();
        let head2 = LearnedHead::from_allocation(2, vec![2, 2, 2], dup).unwrap();
        assert!(close(
            &learned_head_predict(&h, &head2, 0.8).unwrap(),
            &learned_head_predict(&h, &head, 0.8).unwrap(),
            1e-12
        ));

        // rows {a1, a2, b} with masses {1/4, 1/4, 1/2}
        let ln2 = 2f64.ln();
        let head = LearnedHead::from_allocation(1, vec![2, 1], vec![0.0, 0.0, ln2]).unwrap();
        let p = learned_head_predict(&[1.0], &head, 1.0).unwrap();
        assert!(close(&p, &[0.5, 0.5], 1e-12));

        assert!(matches!(
            LearnedHead::from_allocation(1, vec![1, 0], vec![0.0]),
            Err(Error::Config(_))
        ));
        assert!(learned_head_predict(&[1.0, 2.0], &head, 1.0).is_err());
    }

    #[test]
    fn cluster_head_examples() {
        let rows = [0.0, 0.0, 0.0, 9.0, 9.0, 9.0];
        let ds = Datastore::from_rows(&rows, 1, vec![0, 0, 0, 1, 1, 1], Precision::F32).unwrap();
        let head = cluster_head_from_datastore(&ds, 2, 2, 5, 0).unwrap();
        let mut rows: Vec<(f64, Vec<(u32, f64)>)> =
            (0..2).map(|c| (head.row(c)[0], head.map().column(c))).collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert_eq!(rows, vec![(0.0, vec![(0, 1.0)]), (9.0, vec![(1, 1.0)])]);

        // one cluster per entry: rows are the keys, columns one-hot
        let keys = [0.0, 1.0, 2.0, 4.0];
        let ds = Datastore::from_rows(&keys, 1, vec![3, 1, 2, 1], Precision::F32).unwrap();
        let head = cluster_head_from_datastore(&ds, 4, 4, 3, 1).unwrap();
        let mut got: Vec<(f64, Vec<(u32, f64)>)> =
            (0..4).map(|c| (head.row(c)[0], head.map().column(c))).collect();
        got.sort_by(|a, b| a.0.total_cmp(&b.0));
        let want: Vec<(f64, Vec<(u32, f64)>)> =
            vec![(0.0, vec![(3, 1.0)]), (1.0, vec![(1, 1.0)]), (2.0, vec![(2, 1.0)]), (4.0, vec![(1, 1.0)])];
        assert_eq!(got, want);

        // a cluster with values [a, a, b]
        let ds = Datastore::from_rows(&[1.0, 1.1, 0.9], 1, vec![0, 0, 1], Precision::F32).unwrap();
        let head = cluster_head_from_datastore(&ds, 2, 1, 3, 0).unwrap();
        let col = head.map().column(0);
        assert_eq!(col[0].0, 0);
        assert!((col[0].1 - 2.0 / 3.0).abs() < 1e-15 && (col[1].1 - 1.0 / 3.0).abs() < 1e-15);

        assert!(cluster_head_from_datastore(&ds, 2, 4, 3, 0).is_err());
    }

    #[test]
    fn sparsify_examples() {
        let p = ProbVector::new(vec![0.5, 0.3, 0.2]).unwrap();
        let s = sparsify_distribution(&p, 2, 1.0).unwrap();
        assert!(close(&s, &[0.625, 0.375, 0.0], 1e-12));
        assert_eq!(s[2], 0.0);
        assert!(close(&sparsify_distribution(&p, 3, 1.0).unwrap(), &p, 1e-12));
        let tie = ProbVector::new(vec![0.4, 0.4, 0.2]).unwrap();
        assert_eq!(sparsify_distribution(&tie, 1, 1.0).unwrap().as_slice(), &[1.0, 0.0, 0.0]);
        assert!(sparsify_distribution(&p, 0, 1.0).is_err());
        assert!(sparsify_distribution(&p, 1, 0.0).is_err());
    }

    #[test]
    fn sparse_map_validation() {
        assert!(AggregationMap::sparse(vec![vec![(0, 0.5), (1, 0.4)]], 2).is_err());
        assert!(AggregationMap::sparse(vec![vec![(2, 1.0)]], 2).is_err());
        assert!(AggregationMap::sparse(vec![vec![]], 2).is_err());
        let m = AggregationMap::sparse(vec![vec![(0, 0.25), (1, 0.75)], vec![(1, 1.0)]], 2).unwrap();
        assert_eq!(m.aggregate(&[0.4, 0.6]), vec![0.1, 0.9]);
        assert_eq!(m.pull_back(&[1.0, 2.0]), vec![1.75, 2.0]);
    }

    proptest! {
        #[test]
        fn full_knn_matches_knn_at_full_k(
            keys in prop::collection::vec(-3.0f64..3.0, 2..120),
            q in prop::collection::vec(-3.0f64..3.0, 2),
            tau in 0.2f64..3.0,
            ip in any::<bool>(),
        ) {
            let n = keys.len() / 2;
            let values: Vec<u32> = (0..n as u32).map(|i| i % 5).collect();
            let ds = Datastore::from_rows(&keys[..n * 2], 2, values, Precision::F16).unwrap();
            let metric = if ip { Metric::Ip } else { Metric::L2 };
            let full = full_knn_distribution(&ds, &q, tau, metric, 5).unwrap();
            let ns = exact_search(&ds, &q, n, metric, 16).unwrap();
            let knn = knn_distribution(&ns, ds.values(), tau, 5).unwrap();
            prop_assert!(close(&full, &knn, 1e-9));
        }

        #[test]
        fn knn_support_is_neighbor_values(
            scores in prop::collection::vec(-5.0f64..0.0, 1..20),
            tau in 0.1f64..4.0,
        ) {
            let values: Vec<u32> = (0..scores.len() as u32).map(|i| (i * 3) % 11).collect();
            let p = knn_distribution(&set(&scores), &values, tau, 11).unwrap();
            for (v, x) in p.iter().enumerate() {
                if *x > 0.0 {
                    prop_assert!(values.contains(&(v as u32)));
                }
            }
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn sparsify_identity_at_full_k(raw in prop::collection::vec(0.01f64..1.0, 1..30)) {
            let total: f64 = raw.iter().sum();
            let p = ProbVector::new(raw.iter().map(|x| x / total).collect()).unwrap();
            let s = sparsify_distribution(&p, p.len(), 1.0).unwrap();
            prop_assert!(close(&s, &p, 1e-9));
        }
    }
}
