//! Inverted-file index with optional residual product quantization.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans, nearest_centroid};
use super::{check_k, check_query, Neighbor, NeighborSet, Regime};
use crate::binfmt::{read_file, to_u32, Reader, Writer};
use crate::error::{Error, Result};
use crate::kernels::{dot, squared_l2, topk_indices, Metric, TopK};
use crate::store::Datastore;

const INDEX_MAGIC: &[u8; 8] = b"KNLMIX01";
const VERSION: u32 = 1;
const CHUNK: usize = 1024;

/// Probes used when none is given.
pub const DEFAULT_N_PROBE: usize = 32;

/// Build parameters for [`train_index`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexParams {
    pub n_list: usize,
    /// Number of PQ sub-quantizers; 0 disables PQ.
    pub pq_m: usize,
    /// Bits per PQ code (at most 8).
    pub pq_nbits: u8,
    pub seed: u64,
    pub kmeans_iters: usize,
    /// Coarse training uses at most `sample_per_list * n_list` rows.
    pub sample_per_list: usize,
}

impl Default for IndexParams {
    fn default() -> Self {
        IndexParams {
            n_list: 1024,
            pq_m: 0,
            pq_nbits: 8,
            seed: 0,
            kmeans_iters: 20,
            sample_per_list: 256,
        }
    }
}

impl IndexParams {
    /// Defaults with PQ enabled at one sub-quantizer per four dimensions.
    pub fn for_dim(dim: usize) -> Self {
        IndexParams {
            pq_m: if dim.is_multiple_of(4) { dim / 4 } else { 0 },
            ..Self::default()
        }
    }

    pub fn exact(n_list: usize, seed: u64) -> Self {
        IndexParams {
            n_list,
            seed,
            ..Self::default()
        }
    }
}

/// `m` codebooks over `dim / m`-wide sub-spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductQuantizer {
    m: usize,
    nbits: u8,
    dsub: usize,
    /// Codewords per sub-space; `2^nbits` unless fewer training rows exist.
    ksub: usize,
    /// `m x ksub x dsub`.
    codebooks: Vec<f64>,
}

impl ProductQuantizer {
    /// Trains one k-means codebook per sub-space. Also returns, per
    /// sub-space, the quantization error after every Lloyd step.
    pub fn train(
        vectors: &[f64],
        dim: usize,
        m: usize,
        nbits: u8,
        iters: usize,
        seed: u64,
    ) -> Result<(ProductQuantizer, Vec<Vec<f64>>)> {
        if m == 0 || !dim.is_multiple_of(m) {
            return Err(Error::param(format!("pq_m = {m} must divide D = {dim}")));
        }
        if nbits == 0 || nbits > 8 {
            return Err(Error::param(format!("pq_nbits = {nbits} must be in 1..=8")));
        }
        let n = vectors.len() / dim;
        if n == 0 {
            return Err(Error::param("no vectors to train a product quantizer on"));
        }
        let dsub = dim / m;
        let ksub = (1usize << nbits).min(n);
        let mut codebooks = Vec::with_capacity(m * ksub * dsub);
        let mut traces = Vec::with_capacity(m);
        for s in 0..m {
            let sub: Vec<f64> = vectors
                .chunks_exact(dim)
                .flat_map(|v| v[s * dsub..(s + 1) * dsub].iter().copied())
                .collect();
            let sub_seed = seed ^ (s as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let km = kmeans(&sub, dsub, ksub, iters, sub_seed)?;
            codebooks.extend_from_slice(&km.centroids);
            traces.push(km.inertia);
        }
        Ok((
            ProductQuantizer {
                m,
                nbits,
                dsub,
                ksub,
                codebooks,
            },
            traces,
        ))
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn nbits(&self) -> u8 {
        self.nbits
    }

    pub fn sub_dim(&self) -> usize {
        self.dsub
    }

    pub fn codebook_size(&self) -> usize {
        self.ksub
    }

    pub fn codeword(&self, s: usize, j: usize) -> &[f64] {
        let at = (s * self.ksub + j) * self.dsub;
        &self.codebooks[at..at + self.dsub]
    }

    pub fn encode(&self, v: &[f64], out: &mut [u8]) {
        for (s, code) in out.iter_mut().enumerate() {
            let book = &self.codebooks[s * self.ksub * self.dsub..(s + 1) * self.ksub * self.dsub];
            *code = nearest_centroid(book, self.dsub, &v[s * self.dsub..(s + 1) * self.dsub]).0 as u8;
        }
    }

    pub fn decode(&self, codes: &[u8]) -> Vec<f64> {
        codes
            .iter()
            .enumerate()
            .flat_map(|(s, &c)| self.codeword(s, c as usize).iter().copied())
            .collect()
    }

    /// Table of per-sub-space, per-codeword score contributions.
    /// L2: `-||target_s - c||^2` with `target` the query residual; IP: `q_s . c`.
    fn table(&self, target: &[f64], metric: Metric) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.m * self.ksub);
        for s in 0..self.m {
            let part = &target[s * self.dsub..(s + 1) * self.dsub];
            for j in 0..self.ksub {
                t.push(metric.score(self.codeword(s, j), part));
            }
        }
        t
    }

    fn lookup(&self, table: &[f64], codes: &[u8]) -> f64 {
        codes
            .iter()
            .enumerate()
            .fold(0.0, |acc, (s, &c)| acc + table[s * self.ksub + c as usize])
    }
}

/// Coarse centroids plus per-centroid lists of datastore rows (and PQ codes).
#[derive(Debug, Clone, PartialEq)]
pub struct AnnIndex {
    dim: usize,
    n_rows: usize,
    seed: u64,
    centroids: Vec<f64>,
    lists: Vec<Vec<usize>>,
    pq: Option<ProductQuantizer>,
    /// Per list, `len x m` codes.
    codes: Vec<Vec<u8>>,
    /// `(list, position)` of every row.
    row_loc: Vec<(u32, u32)>,
}

fn locate(lists: &[Vec<usize>], n_rows: usize) -> Option<Vec<(u32, u32)>> {
    let mut loc = vec![(u32::MAX, u32::MAX); n_rows];
    for (l, rows) in lists.iter().enumerate() {
        for (p, &r) in rows.iter().enumerate() {
            if r >= n_rows || loc[r].0 != u32::MAX {
                return None;
            }
            loc[r] = (l as u32, p as u32);
        }
    }
    loc.iter().all(|x| x.0 != u32::MAX).then_some(loc)
}

/// Builds an IVF index over `ds`: coarse k-means on a seeded sample, nearest
/// centroid assignment for every row, and (if `pq_m > 0`) residual PQ.
pub fn train_index(ds: &Datastore, params: &IndexParams) -> Result<AnnIndex> {
    let dim = ds.dim();
    let n = ds.len();
    if params.n_list == 0 {
        return Err(Error::param("n_list must be at least 1"));
    }
    if params.pq_m > 0 && !dim.is_multiple_of(params.pq_m) {
        return Err(Error::param(format!(
            "pq_m = {} must divide D = {dim}",
            params.pq_m
        )));
    }
    if params.pq_m > 0 && (params.pq_nbits == 0 || params.pq_nbits > 8) {
        return Err(Error::param(format!(
            "pq_nbits = {} must be in 1..=8",
            params.pq_nbits
        )));
    }
    if params.n_list > n {
        return Err(Error::param(format!(
            "n_list = {} exceeds the {n} datastore rows",
            params.n_list
        )));
    }
    let cap = params.sample_per_list.saturating_mul(params.n_list).max(params.n_list);
    let sample: Vec<usize> = if cap >= n {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut idx = rand::seq::index::sample(&mut rng, n, cap).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut train = vec![0.0; sample.len() * dim];
    for (out, &r) in train.chunks_exact_mut(dim).zip(&sample) {
        ds.row_into(r, out);
    }
    let coarse = kmeans(&train, dim, params.n_list, params.kmeans_iters, params.seed)?;
    let centroids = coarse.centroids;

    let assign: Vec<usize> = (0..n)
        .into_par_iter()
        .with_min_len(CHUNK)
        .map_init(
            || vec![0.0; dim],
            |buf, r| {
                ds.row_into(r, buf);
                nearest_centroid(&centroids, dim, buf).0
            },
        )
        .collect();
    let mut lists = vec![Vec::new(); params.n_list];
    for (r, &l) in assign.iter().enumerate() {
        lists[l].push(r);
    }

    let (pq, codes) = if params.pq_m > 0 {
        let mut residuals = train;
        for (res, &l) in residuals.chunks_exact_mut(dim).zip(&coarse.assignments) {
            for (x, c) in res.iter_mut().zip(&centroids[l * dim..(l + 1) * dim]) {
                *x -= c;
            }
        }
        let (pq, _) = ProductQuantizer::train(
            &residuals,
            dim,
            params.pq_m,
            params.pq_nbits,
            params.kmeans_iters,
            params.seed.wrapping_add(1),
        )?;
        let codes: Vec<Vec<u8>> = lists
            .iter()
            .enumerate()
            .map(|(l, rows)| {
                let centroid = &centroids[l * dim..(l + 1) * dim];
                let per_row: Vec<Vec<u8>> = rows
                    .par_iter()
                    .with_min_len(CHUNK)
                    .map(|&r| {
                        let mut v = ds.row(r);
                        for (x, c) in v.iter_mut().zip(centroid) {
                            *x -= c;
                        }
                        let mut code = vec![0u8; pq.m];
                        pq.encode(&v, &mut code);
                        code
                    })
                    .collect();
                per_row.concat()
            })
            .collect();
        (Some(pq), codes)
    } else {
        (None, vec![Vec::new(); params.n_list])
    };
    let row_loc = locate(&lists, n).expect("every row assigned once");
    Ok(AnnIndex {
        dim,
        n_rows: n,
        seed: params.seed,
        centroids,
        lists,
        pq,
        codes,
        row_loc,
    })
}

impl AnnIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_list(&self) -> usize {
        self.lists.len()
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn list(&self, l: usize) -> &[usize] {
        &self.lists[l]
    }

    pub fn pq(&self) -> Option<&ProductQuantizer> {
        self.pq.as_ref()
    }

    /// The regime of the scores this index produces.
    pub fn score_regime(&self) -> Regime {
        if self.pq.is_some() {
            Regime::Approx
        } else {
            Regime::Exact
        }
    }

    fn check_store(&self, ds: &Datastore) -> Result<()> {
        if ds.len() != self.n_rows {
            return Err(Error::input(format!(
                "index covers {} rows but the datastore has {}",
                self.n_rows,
                ds.len()
            )));
        }
        if ds.dim() != self.dim {
            return Err(Error::shape("datastore width", self.dim, ds.dim()));
        }
        Ok(())
    }

    fn centroid(&self, l: usize) -> &[f64] {
        &self.centroids[l * self.dim..(l + 1) * self.dim]
    }

    /// Scores rows of list `l` (given by position) against `query`.
    fn list_scorer<'a>(
        &'a self,
        ds: &'a Datastore,
        query: &'a [f64],
        l: usize,
        metric: Metric,
    ) -> impl Fn(usize) -> f64 + 'a {
        let adc = self.pq.as_ref().map(|pq| {
            let centroid = self.centroid(l);
            match metric {
                Metric::L2 => {
                    let residual: Vec<f64> = query.iter().zip(centroid).map(|(q, c)| q - c).collect();
                    (pq.table(&residual, metric), 0.0)
                }
                Metric::Ip => (pq.table(query, metric), dot(query, centroid)),
            }
        });
        move |pos| match (&self.pq, &adc) {
            (Some(pq), Some((table, base))) => {
                let codes = &self.codes[l][pos * pq.m..(pos + 1) * pq.m];
                base + pq.lookup(table, codes)
            }
            _ => ds.score(self.lists[l][pos], query, metric),
        }
    }

    /// The `n_probe` lists whose centroids score best against `query`.
    pub fn probe(&self, query: &[f64], n_probe: usize, metric: Metric) -> Vec<usize> {
        let scores: Vec<f64> = self
            .centroids
            .chunks_exact(self.dim)
            .map(|c| match metric {
                Metric::L2 => -squared_l2(c, query),
                Metric::Ip => dot(c, query),
            })
            .collect();
        topk_indices(&scores, n_probe.clamp(1, self.n_list())).expect("n_probe >= 1")
    }

    /// PQ-approximate scores for an existing neighbor set (the
    /// "exact mask, approximate score" regime). Without PQ the scores are exact.
    pub fn approx_rescore(
        &self,
        ds: &Datastore,
        query: &[f64],
        neighbors: &NeighborSet,
        metric: Metric,
    ) -> Result<NeighborSet> {
        check_query(ds, query)?;
        self.check_store(ds)?;
        let entries = neighbors
            .entries()
            .iter()
            .map(|n| {
                let &(l, pos) = self.row_loc.get(n.row).ok_or_else(|| {
                    Error::input(format!(
                        "neighbor row {} outside datastore of {} rows",
                        n.row, self.n_rows
                    ))
                })?;
                let score = self.list_scorer(ds, query, l as usize, metric)(pos as usize);
                Ok(Neighbor { row: n.row, score })
            })
            .collect::<Result<Vec<_>>>()?;
        NeighborSet::new(entries, metric, neighbors.mask_source(), self.score_regime())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = Writer::create(path)?;
        w.bytes(INDEX_MAGIC)?;
        w.u32(VERSION)?;
        w.u32(to_u32(self.n_list(), "n_list")?)?;
        let (m, nbits, ksub) = self.pq.as_ref().map_or((0, 0, 0), |p| (p.m, p.nbits, p.ksub));
        w.u32(to_u32(m, "pq_m")?)?;
        w.u8(nbits)?;
        w.u64(self.seed)?;
        w.u32(to_u32(self.dim, "D")?)?;
        w.u32(to_u32(ksub, "codebook size")?)?;
        w.f64s(&self.centroids)?;
        if let Some(pq) = &self.pq {
            w.f64s(&pq.codebooks)?;
        }
        for (rows, codes) in self.lists.iter().zip(&self.codes) {
            w.u64(rows.len() as u64)?;
            for r in rows {
                w.u64(*r as u64)?;
            }
            w.bytes(codes)?;
        }
        w.finish()
    }

    pub fn read(path: &Path) -> Result<AnnIndex> {
        let buf = read_file(path)?;
        let mut r = Reader::new(&buf, path);
        r.magic(INDEX_MAGIC)?;
        r.version(VERSION)?;
        let at = r.pos();
        let n_list = r.u32("n_list")? as usize;
        if n_list == 0 {
            return Err(r.error(at, "n_list must be at least 1"));
        }
        let m = r.u32("pq_m")? as usize;
        let at = r.pos();
        let nbits = r.u8("pq_nbits")?;
        if m > 0 && (nbits == 0 || nbits > 8) {
            return Err(r.error(at, format!("pq_nbits = {nbits} must be in 1..=8")));
        }
        let seed = r.u64("seed")?;
        let at = r.pos();
        let dim = r.u32("D")? as usize;
        if dim == 0 || (m > 0 && !dim.is_multiple_of(m)) {
            return Err(r.error(at, format!("D = {dim} is zero or not divisible by pq_m = {m}")));
        }
        let at = r.pos();
        let ksub = r.u32("codebook size")? as usize;
        if m > 0 && (ksub == 0 || ksub > 1 << nbits) {
            return Err(r.error(at, format!("codebook size {ksub} invalid for {nbits} bits")));
        }
        let cen_len = n_list
            .checked_mul(dim)
            .ok_or_else(|| r.error(at, "centroid block size overflows"))?;
        let at = r.pos();
        let centroids = r.f64s(cen_len, "centroids")?;
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(r.error(at, "non-finite centroid"));
        }
        let pq = if m > 0 {
            let codebooks = r.f64s(m * ksub * (dim / m), "codebooks")?;
            Some(ProductQuantizer {
                m,
                nbits,
                dsub: dim / m,
                ksub,
                codebooks,
            })
        } else {
            None
        };
        let mut lists = Vec::with_capacity(n_list);
        let mut codes = Vec::with_capacity(n_list);
        for _ in 0..n_list {
            let at = r.pos();
            let len = r.u64("list length")?;
            let len = usize::try_from(len)
                .ok()
                .filter(|l| l.saturating_mul(8) <= r.remaining())
                .ok_or_else(|| r.error(at, format!("list length {len} exceeds the file")))?;
            let mut rows = Vec::with_capacity(len);
            for _ in 0..len {
                rows.push(r.u64("row id")? as usize);
            }
            let at = r.pos();
            let c = r.bytes(len * m, "codes")?;
            if c.iter().any(|&x| x as usize >= ksub.max(1)) {
                return Err(r.error(at, "code outside the codebook"));
            }
            lists.push(rows);
            codes.push(c.to_vec());
        }
        r.finish()?;
        let n_rows = lists.iter().map(Vec::len).sum();
        let row_loc = locate(&lists, n_rows)
            .ok_or_else(|| r.error(buf.len(), "inverted lists do not cover each row exactly once"))?;
        Ok(AnnIndex {
            dim,
            n_rows,
            seed,
            centroids,
            lists,
            pq,
            codes,
            row_loc,
        })
    }
}

/// Scans the `n_probe` best lists (the approximate mask). Scores are PQ
/// asymmetric-distance estimates when the index has PQ, exact otherwise.
/// May return fewer than `k` neighbors.
pub fn approx_search(
    index: &AnnIndex,
    ds: &Datastore,
    query: &[f64],
    k: usize,
    n_probe: usize,
    metric: Metric,
) -> Result<NeighborSet> {
    check_query(ds, query)?;
    check_k(k)?;
    index.check_store(ds)?;
    let mut acc = TopK::new(k);
    for l in index.probe(query, n_probe, metric) {
        let score = index.list_scorer(ds, query, l, metric);
        for (pos, &row) in index.lists[l].iter().enumerate() {
            acc.push(row, score(pos));
        }
    }
    Ok(NeighborSet::from_topk(acc, metric, Regime::Approx, index.score_regime()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::{exact_search, recall, rescore};
    use crate::store::Precision;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_store(n: usize, dim: usize, seed: u64, precision: Precision) -> Datastore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<f64> = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Datastore::from_rows(&rows, dim, (0..n as u32).collect(), precision).unwrap()
    }

    fn query(dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn pq_structure_and_divisibility() {
        let ds = random_store(600, 16, 1, Precision::F32);
        let p = IndexParams {
            n_list: 4,
            pq_m: 4,
            pq_nbits: 4,
            ..IndexParams::default()
        };
        let idx = train_index(&ds, &p).unwrap();
        let pq = idx.pq().unwrap();
        assert_eq!((pq.m(), pq.sub_dim(), pq.codebook_size()), (4, 4, 16));
        let bad = IndexParams { pq_m: 5, ..p };
        assert!(matches!(train_index(&ds, &bad), Err(Error::Parameter(_))));
        let too_wide = IndexParams { pq_nbits: 9, ..p };
        assert!(train_index(&ds, &too_wide).is_err());
        assert!(train_index(&ds, &IndexParams::exact(0, 0)).is_err());
    }

    #[test]
    fn every_row_in_exactly_one_list() {
        let ds = random_store(777, 8, 2, Precision::F16);
        let idx = train_index(&ds, &IndexParams::exact(13, 5)).unwrap();
        let mut seen: Vec<usize> = (0..idx.n_list()).flat_map(|l| idx.list(l).to_vec()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..777).collect::<Vec<_>>());
        assert!(idx.centroids().iter().all(|c| c.is_finite()));
    }

    #[test]
    fn single_list_equals_exact_search() {
        let ds = random_store(300, 6, 3, Precision::F16);
        let idx = train_index(&ds, &IndexParams::exact(1, 9)).unwrap();
        for s in 0..10 {
            let q = query(6, 100 + s);
            for metric in [Metric::L2, Metric::Ip] {
                let a = approx_search(&idx, &ds, &q, 10, 1, metric).unwrap();
                let e = exact_search(&ds, &q, 10, metric, 64).unwrap();
                assert_eq!(a.entries(), e.entries());
            }
        }
    }

    #[test]
    fn full_probe_equals_exact_search() {
        let ds = random_store(1000, 8, 4, Precision::F16);
        let idx = train_index(&ds, &IndexParams::exact(16, 1)).unwrap();
        for s in 0..10 {
            let q = query(8, 200 + s);
            let a = approx_search(&idx, &ds, &q, 25, 16, Metric::L2).unwrap();
            let e = exact_search(&ds, &q, 25, Metric::L2, 100).unwrap();
            assert_eq!(a.entries(), e.entries());
        }
    }

    #[test]
    fn two_separated_clusters() {
        let mut rows = Vec::new();
        for i in 0..20 {
            rows.extend([i as f64 * 0.01, 0.0]);
        }
        for i in 0..20 {
            rows.extend([100.0 + i as f64 * 0.01, 0.0]);
        }
        let ds = Datastore::from_rows(&rows, 2, vec![0; 40], Precision::F32).unwrap();
        let idx = train_index(&ds, &IndexParams::exact(2, 3)).unwrap();
        let ns = approx_search(&idx, &ds, &[0.05, 0.0], 30, 1, Metric::L2).unwrap();
        assert_eq!(ns.len(), 20);
        assert!(ns.rows().all(|r| r < 20));
    }

    #[test]
    fn short_lists_return_fewer_than_k() {
        let rows = [0.0, 0.1, 0.2, 50.0, 50.1, 50.2, 50.3];
        let ds = Datastore::from_rows(&rows, 1, vec![0; 7], Precision::F32).unwrap();
        let idx = train_index(&ds, &IndexParams::exact(2, 0)).unwrap();
        let ns = approx_search(&idx, &ds, &[0.1], 5, 1, Metric::L2).unwrap();
        assert_eq!(ns.len(), 3);
        assert_eq!(ns.mask_source(), Regime::Approx);
    }

    #[test]
    fn recall_non_decreasing_in_n_probe() {
        for seed in 0..4 {
            let ds = random_store(2000, 8, 10 + seed, Precision::F16);
            let idx = train_index(&ds, &IndexParams::exact(32, seed)).unwrap();
            let q = query(8, 300 + seed);
            let truth = exact_search(&ds, &q, 20, Metric::L2, 512).unwrap();
            let mut last = 0.0;
            for probe in [1, 2, 4, 8, 16, 32] {
                let r = recall(&approx_search(&idx, &ds, &q, 20, probe, Metric::L2).unwrap(), &truth);
                assert!(r >= last, "seed {seed} probe {probe}: {r} < {last}");
                last = r;
            }
            assert_eq!(last, 1.0);
        }
    }

    #[test]
    fn pq_scores_rescore_to_exact() {
        let ds = random_store(1500, 16, 5, Precision::F16);
        let p = IndexParams {
            n_list: 8,
            pq_m: 4,
            pq_nbits: 6,
            seed: 2,
            ..IndexParams::default()
        };
        let idx = train_index(&ds, &p).unwrap();
        let q = query(16, 7);
        for metric in [Metric::L2, Metric::Ip] {
            let a = approx_search(&idx, &ds, &q, 15, 3, metric).unwrap();
            assert_eq!(a.score_source(), Regime::Approx);
            let r = rescore(&ds, &q, &a, metric).unwrap();
            for n in r.entries() {
                assert!((n.score - ds.score(n.row, &q, metric)).abs() <= 1e-9);
            }
            // approximate scores track the exact ones
            let worst = a
                .entries()
                .iter()
                .map(|n| (n.score - ds.score(n.row, &q, metric)).abs())
                .fold(0.0, f64::max);
            assert!(worst < 10.0, "{worst}");
        }
    }

    #[test]
    fn approx_rescore_matches_search_scores() {
        let ds = random_store(900, 8, 6, Precision::F32);
        let p = IndexParams {
            n_list: 4,
            pq_m: 2,
            pq_nbits: 5,
            ..IndexParams::default()
        };
        let idx = train_index(&ds, &p).unwrap();
        let q = query(8, 8);
        let approx = approx_search(&idx, &ds, &q, 12, 4, Metric::L2).unwrap();
        let exact_mask = exact_search(&ds, &q, 12, Metric::L2, 100).unwrap();
        let swapped = idx.approx_rescore(&ds, &q, &exact_mask, Metric::L2).unwrap();
        assert_eq!(swapped.mask_source(), Regime::Exact);
        assert_eq!(swapped.score_source(), Regime::Approx);
        for n in swapped.entries() {
            if let Some(m) = approx.entries().iter().find(|m| m.row == n.row) {
                assert_eq!(m.score, n.score);
            }
        }
    }

    #[test]
    fn pq_error_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..4000 * 8).map(|_| rng.random::<f64>()).collect();
        let (_, traces) = ProductQuantizer::train(&v, 8, 4, 4, 15, 1).unwrap();
        for t in traces {
            for w in t.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let ds = random_store(3000, 8, 7, Precision::F16);
        let p = IndexParams {
            n_list: 12,
            pq_m: 4,
            pq_nbits: 4,
            seed: 4,
            ..IndexParams::default()
        };
        let build = |t| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .unwrap()
                .install(|| train_index(&ds, &p).unwrap())
        };
        assert_eq!(build(1), build(4));
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let ds = random_store(500, 8, 8, Precision::F16);
        for pq_m in [0, 2] {
            let p = IndexParams {
                n_list: 5,
                pq_m,
                pq_nbits: 3,
                ..IndexParams::default()
            };
            let idx = train_index(&ds, &p).unwrap();
            let path = dir.path().join(format!("ix{pq_m}"));
            idx.write(&path).unwrap();
            assert_eq!(AnnIndex::read(&path).unwrap(), idx);

            let bytes = std::fs::read(&path).unwrap();
            std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
            assert!(matches!(AnnIndex::read(&path), Err(Error::Format { .. })));
            let mut bad = bytes.clone();
            bad[0] = b'X';
            std::fs::write(&path, &bad).unwrap();
            assert!(matches!(AnnIndex::read(&path), Err(Error::Format { offset: 0, .. })));
        }
    }

    #[test]
    fn mismatched_store_is_rejected() {
        let ds = random_store(100, 4, 9, Precision::F32);
        let idx = train_index(&ds, &IndexParams::exact(2, 0)).unwrap();
        let other = random_store(99, 4, 9, Precision::F32);
        assert!(approx_search(&idx, &other, &[0.0; 4], 3, 1, Metric::L2).is_err());
        assert!(matches!(
            approx_search(&idx, &ds, &[0.0; 3], 3, 1, Metric::L2),
            Err(Error::Shape { .. })
        ));
    }
}
