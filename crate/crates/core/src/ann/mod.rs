//! Nearest-neighbor search over a [`Datastore`].
//!
//! Four retrieval regimes are available, crossing how the neighbor set is
//! chosen (exact scan vs. IVF probing) with how its scores are computed
//! (exact metric vs. product-quantized approximation):
//!
//! | mask   | score  | how                                              |
//! |--------|--------|--------------------------------------------------|
//! | exact  | exact  | [`exact_search`]                                 |
//! | approx | approx | [`approx_search`] on a PQ index                  |
//! | approx | exact  | [`approx_search`] then [`rescore`]               |
//! | exact  | approx | [`exact_search`] then [`AnnIndex::approx_rescore`] |

mod ivf;
mod kmeans;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{rank_order, Metric, TopK};
use crate::store::Datastore;

pub use ivf::{approx_search, train_index, AnnIndex, IndexParams, ProductQuantizer, DEFAULT_N_PROBE};
pub use kmeans::{kmeans, nearest_centroid, KMeans};

/// Whether a neighbor set or its scores come from exact or approximate
/// computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    #[default]
    Exact,
    Approx,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exact" | "real" => Ok(Regime::Exact),
            "approx" => Ok(Regime::Approx),
            other => Err(Error::param(format!("unknown regime `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub row: usize,
    pub score: f64,
}

/// Retrieved datastore rows, best first (index tie-break), with the regime
/// that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSet {
    entries: Vec<Neighbor>,
    metric: Metric,
    mask: Regime,
    score: Regime,
}

impl NeighborSet {
    /// Sorts `entries` under the ranking order. Rows must be unique.
    pub fn new(mut entries: Vec<Neighbor>, metric: Metric, mask: Regime, score: Regime) -> Result<Self> {
        entries.sort_by(|a, b| rank_order((a.row, a.score), (b.row, b.score)));
        if has_duplicates(&entries) {
            return Err(Error::input("neighbor rows must be unique"));
        }
        Ok(NeighborSet {
            entries,
            metric,
            mask,
            score,
        })
    }

    fn from_topk(acc: TopK, metric: Metric, mask: Regime, score: Regime) -> Self {
        NeighborSet {
            entries: acc
                .into_sorted()
                .into_iter()
                .map(|(row, score)| Neighbor { row, score })
                .collect(),
            metric,
            mask,
            score,
        }
    }

    pub fn entries(&self) -> &[Neighbor] {
        &self.entries
    }

    pub fn rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|n| n.row)
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|n| n.score).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn mask_source(&self) -> Regime {
        self.mask
    }

    pub fn score_source(&self) -> Regime {
        self.score
    }

    /// Keeps the first `k` entries.
    pub fn truncated(&self, k: usize) -> NeighborSet {
        NeighborSet {
            entries: self.entries[..k.min(self.entries.len())].to_vec(),
            ..self.clone()
        }
    }
}

fn has_duplicates(entries: &[Neighbor]) -> bool {
    let mut rows: Vec<usize> = entries.iter().map(|n| n.row).collect();
    rows.sort_unstable();
    rows.windows(2).any(|w| w[0] == w[1])
}

fn check_query(ds: &Datastore, query: &[f64]) -> Result<()> {
    if query.len() != ds.dim() {
        return Err(Error::shape("query width", ds.dim(), query.len()));
    }
    Ok(())
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        Err(Error::param("k must be at least 1"))
    } else {
        Ok(())
    }
}

/// True top-`k` by brute force. The datastore is scanned in shards of
/// `shard_size` rows whose partial top-`k` lists are merged; the result does
/// not depend on `shard_size`.
pub fn exact_search(
    ds: &Datastore,
    query: &[f64],
    k: usize,
    metric: Metric,
    shard_size: usize,
) -> Result<NeighborSet> {
    check_query(ds, query)?;
    check_k(k)?;
    if shard_size == 0 {
        return Err(Error::param("shard size must be at least 1"));
    }
    let mut merged = TopK::new(k);
    let mut start = 0;
    while start < ds.len() {
        let end = (start + shard_size).min(ds.len());
        let mut shard = TopK::new(k);
        for row in start..end {
            shard.push(row, ds.score(row, query, metric));
        }
        merged.merge(shard);
        start = end;
    }
    Ok(NeighborSet::from_topk(merged, metric, Regime::Exact, Regime::Exact))
}

/// Replaces every score with the exact metric value against the raw keys and
/// re-sorts. The row set is unchanged.
pub fn rescore(ds: &Datastore, query: &[f64], neighbors: &NeighborSet, metric: Metric) -> Result<NeighborSet> {
    check_query(ds, query)?;
    let entries = neighbors
        .entries
        .iter()
        .map(|n| {
            if n.row >= ds.len() {
                Err(Error::input(format!(
                    "neighbor row {} outside datastore of {} rows",
                    n.row,
                    ds.len()
                )))
            } else {
                Ok(Neighbor {
                    row: n.row,
                    score: ds.score(n.row, query, metric),
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    NeighborSet::new(entries, metric, neighbors.mask, Regime::Exact)
}

/// Fraction of `truth`'s rows that `found` also contains.
pub fn recall(found: &NeighborSet, truth: &NeighborSet) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let hit = truth
        .rows()
        .filter(|r| found.rows().any(|f| f == *r))
        .count();
    hit as f64 / truth.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Precision;

    fn store(rows: &[f64], dim: usize) -> Datastore {
        let n = rows.len() / dim;
        Datastore::from_rows(rows, dim, (0..n as u32).collect(), Precision::F32).unwrap()
    }

    fn rows_of(ns: &NeighborSet) -> Vec<usize> {
        ns.rows().collect()
    }

    #[test]
    fn self_match_first() {
        let ds = store(&[0.0, 1.0, 2.0, 3.0, -1.0, 5.0], 2);
        let q = ds.row(1);
        let ns = exact_search(&ds, &q, 2, Metric::L2, 2).unwrap();
        assert_eq!(ns.entries()[0].row, 1);
        assert_eq!(ns.entries()[0].score, 0.0);
    }

    #[test]
    fn one_dimensional_examples() {
        let ds = store(&[0.0, 1.0, 3.0], 1);
        let ns = exact_search(&ds, &[2.0], 2, Metric::L2, 1).unwrap();
        assert_eq!(rows_of(&ns), vec![1, 2]);
        assert_eq!(ns.scores(), vec![-1.0, -1.0]);

        let ds = store(&[1.0, 2.0], 1);
        let ns = exact_search(&ds, &[1.0], 1, Metric::Ip, 5).unwrap();
        assert_eq!(rows_of(&ns), vec![1]);
        assert_eq!(ns.scores(), vec![2.0]);
    }

    #[test]
    fn errors() {
        let ds = store(&[0.0, 1.0], 1);
        assert!(matches!(
            exact_search(&ds, &[1.0, 2.0], 1, Metric::L2, 1),
            Err(Error::Shape { .. })
        ));
        assert!(exact_search(&ds, &[1.0], 0, Metric::L2, 1).is_err());
        let bogus = NeighborSet::new(
            vec![Neighbor { row: 9, score: 0.0 }],
            Metric::L2,
            Regime::Approx,
            Regime::Approx,
        )
        .unwrap();
        assert!(matches!(rescore(&ds, &[1.0], &bogus, Metric::L2), Err(Error::Input(_))));
    }

    #[test]
    fn shard_independence() {
        let rows: Vec<f64> = (0..300).map(|i| ((i * 37 % 101) as f64 - 50.0) / 7.0).collect();
        let ds = store(&rows, 3);
        for metric in [Metric::L2, Metric::Ip] {
            let q = [0.4, -1.1, 2.0];
            let base = exact_search(&ds, &q, 13, metric, ds.len()).unwrap();
            for shard in [1, 7, 64] {
                assert_eq!(exact_search(&ds, &q, 13, metric, shard).unwrap(), base);
            }
        }
    }

    #[test]
    fn rescore_is_idempotent_on_exact_results() {
        let rows: Vec<f64> = (0..90).map(|i| (i as f64 * 0.37).sin()).collect();
        let ds = store(&rows, 3);
        let q = [0.1, 0.2, -0.3];
        let ns = exact_search(&ds, &q, 8, Metric::L2, 4).unwrap();
        let again = rescore(&ds, &q, &ns, Metric::L2).unwrap();
        assert_eq!(rows_of(&again), rows_of(&ns));
        for (a, b) in again.entries().iter().zip(ns.entries()) {
            assert!((a.score - b.score).abs() <= 1e-9);
        }
        let empty = NeighborSet::new(vec![], Metric::L2, Regime::Approx, Regime::Approx).unwrap();
        assert!(rescore(&ds, &q, &empty, Metric::L2).unwrap().is_empty());
    }
}
