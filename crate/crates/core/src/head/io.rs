//! Head file format.
//!
//! ```text
//! "KNLMHD01" u32 version u8 kind
//! kind 0 (learned / cluster):
//!   u8 metric u32 D u32 V u64 n_total u32 n_alloc [u32; n_alloc]
//!   [f64; n_total * D] u8 map_kind u64 n_triplets [(u64 row, u32 id, f64 weight)]
//! kind 1 (mixture of softmaxes):
//!   u32 D u32 V u32 R u8 finetuned [f64; R*D*D] [f64; R*D] [f64; R*D] [f64; V*D]
//! ```

use std::path::Path;

use super::{AggregationMap, LearnedHead, MoSHead};
use crate::binfmt::{read_file, to_u32, Reader, Writer};
use crate::error::{Error, Result};
use crate::kernels::Metric;

const HEAD_MAGIC: &[u8; 8] = b"KNLMHD01";
const VERSION: u32 = 1;
const KIND_LEARNED: u8 = 0;
const KIND_MOS: u8 = 1;

/// Any trained head that can be stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum SavedHead {
    Learned(LearnedHead),
    Mos(MoSHead),
}

impl SavedHead {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = Writer::create(path)?;
        w.bytes(HEAD_MAGIC)?;
        w.u32(VERSION)?;
        match self {
            SavedHead::Learned(h) => write_learned(&mut w, h)?,
            SavedHead::Mos(h) => write_mos(&mut w, h)?,
        }
        w.finish()
    }

    pub fn read(path: &Path) -> Result<SavedHead> {
        let buf = read_file(path)?;
        let mut r = Reader::new(&buf, path);
        r.magic(HEAD_MAGIC)?;
        r.version(VERSION)?;
        let at = r.pos();
        let head = match r.u8("head kind")? {
            KIND_LEARNED => SavedHead::Learned(read_learned(&mut r)?),
            KIND_MOS => SavedHead::Mos(read_mos(&mut r)?),
            other => return Err(r.error(at, format!("unknown head kind {other}"))),
        };
        r.finish()?;
        Ok(head)
    }

    pub fn into_learned(self) -> Result<LearnedHead> {
        match self {
            SavedHead::Learned(h) => Ok(h),
            SavedHead::Mos(_) => Err(Error::Config("expected a learned head, found a MoS head".into())),
        }
    }

    pub fn into_mos(self) -> Result<MoSHead> {
        match self {
            SavedHead::Mos(h) => Ok(h),
            SavedHead::Learned(_) => Err(Error::Config("expected a MoS head, found a learned head".into())),
        }
    }
}

fn write_learned(w: &mut Writer, h: &LearnedHead) -> Result<()> {
    w.u8(KIND_LEARNED)?;
    w.u8(h.metric().as_u8())?;
    w.u32(to_u32(h.dim(), "D")?)?;
    w.u32(to_u32(h.vocab_size(), "V")?)?;
    w.u64(h.n_total() as u64)?;
    w.u32(to_u32(h.allocation().len(), "allocation length")?)?;
    for a in h.allocation() {
        w.u32(to_u32(*a, "allocation entry")?)?;
    }
    w.f64s(h.embeddings())?;
    w.u8(u8::from(!h.map().is_one_hot()))?;
    let triplets: Vec<(usize, u32, f64)> = (0..h.n_total())
        .flat_map(|i| h.map().column(i).into_iter().map(move |(v, m)| (i, v, m)))
        .collect();
    w.u64(triplets.len() as u64)?;
    for (i, v, m) in triplets {
        w.u64(i as u64)?;
        w.u32(v)?;
        w.f64(m)?;
    }
    Ok(())
}

fn read_learned(r: &mut Reader<'_>) -> Result<LearnedHead> {
    let at = r.pos();
    let metric = Metric::from_u8(r.u8("metric")?).ok_or_else(|| r.error(at, "unknown metric tag"))?;
    let dim = r.u32("D")? as usize;
    let vocab = r.u32("V")? as usize;
    let at = r.pos();
    let n_total = usize::try_from(r.u64("n_total")?)
        .ok()
        .filter(|n| n.saturating_mul(dim).saturating_mul(8) <= r.remaining())
        .ok_or_else(|| r.error(at, "row count exceeds the file"))?;
    let n_alloc = r.u32("allocation length")? as usize;
    let allocation: Vec<usize> = r.u32s(n_alloc, "allocation")?.into_iter().map(|a| a as usize).collect();
    let embeddings = r.f64s(n_total * dim, "embeddings")?;
    let at = r.pos();
    let sparse = match r.u8("map kind")? {
        0 => false,
        1 => true,
        other => return Err(r.error(at, format!("unknown map kind {other}"))),
    };
    let at = r.pos();
    let n_trip = usize::try_from(r.u64("triplet count")?)
        .ok()
        .filter(|n| n.saturating_mul(20) <= r.remaining())
        .ok_or_else(|| r.error(at, "triplet count exceeds the file"))?;
    let mut columns: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n_total];
    for _ in 0..n_trip {
        let at = r.pos();
        let row = r.u64("triplet row")? as usize;
        let id = r.u32("triplet id")?;
        let weight = r.f64("triplet weight")?;
        let col = columns
            .get_mut(row)
            .ok_or_else(|| r.error(at, format!("triplet row {row} outside {n_total} rows")))?;
        col.push((id, weight));
    }
    let map = if sparse {
        AggregationMap::sparse(columns, vocab)
    } else {
        let owners = columns
            .iter()
            .map(|c| match c.as_slice() {
                [(id, w)] if *w == 1.0 => Some(*id),
                _ => None,
            })
            .collect::<Option<Vec<u32>>>()
            .ok_or_else(|| r.error(r.pos(), "one-hot map must hold one unit weight per row"))?;
        AggregationMap::one_hot(owners, vocab)
    }
    .map_err(|e| r.error(r.pos(), e.to_string()))?;
    LearnedHead::new(dim, embeddings, map, allocation, metric).map_err(|e| r.error(r.pos(), e.to_string()))
}

fn write_mos(w: &mut Writer, h: &MoSHead) -> Result<()> {
    w.u8(KIND_MOS)?;
    w.u32(to_u32(h.dim(), "D")?)?;
    w.u32(to_u32(h.vocab_size(), "V")?)?;
    w.u32(to_u32(h.components(), "R")?)?;
    w.u8(u8::from(h.finetuned()))?;
    w.f64s(&h.proj)?;
    w.f64s(&h.bias)?;
    w.f64s(&h.prior)?;
    w.f64s(&h.output)
}

fn read_mos(r: &mut Reader<'_>) -> Result<MoSHead> {
    let at = r.pos();
    let dim = r.u32("D")? as usize;
    let vocab = r.u32("V")? as usize;
    let comps = r.u32("R")? as usize;
    if dim == 0 || vocab == 0 || comps == 0 {
        return Err(r.error(at, "D, V and R must all be positive"));
    }
    let finetuned = r.u8("finetuned flag")? != 0;
    let need = comps
        .checked_mul(dim * dim + 2 * dim)
        .and_then(|x| x.checked_add(vocab * dim))
        .filter(|x| x.saturating_mul(8) <= r.remaining())
        .ok_or_else(|| r.error(at, "MoS dimensions exceed the file"))?;
    debug_assert!(need > 0);
    let proj = r.f64s(comps * dim * dim, "projections")?;
    let bias = r.f64s(comps * dim, "biases")?;
    let prior = r.f64s(comps * dim, "prior projection")?;
    let output = r.f64s(vocab * dim, "output embedding")?;
    Ok(MoSHead::from_parts(dim, vocab, comps, proj, bias, prior, output, finetuned))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::cluster_head_from_datastore;
    use crate::store::{Datastore, OutputEmbedding, Precision};

    fn round_trip(head: SavedHead) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.bin");
        head.write(&path).unwrap();
        assert_eq!(SavedHead::read(&path).unwrap(), head);
        let bytes = std::fs::read(&path).unwrap();
        for cut in [3, 13, bytes.len() / 2, bytes.len() - 1] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            match SavedHead::read(&path) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn learned_round_trip() {
        let emb: Vec<f64> = (0..10).map(|i| i as f64 * 0.37 - 1.0).collect();
        let head = LearnedHead::from_allocation(2, vec![2, 1, 2], emb).unwrap();
        round_trip(SavedHead::Learned(head));
    }

    #[test]
    fn cluster_round_trip() {
        let ds = Datastore::from_rows(&[0.0, 0.1, 5.0, 5.2, 5.1], 1, vec![0, 1, 1, 1, 2], Precision::F32)
            .unwrap();
        let head = cluster_head_from_datastore(&ds, 3, 2, 5, 1).unwrap();
        assert!(!head.map().is_one_hot());
        round_trip(SavedHead::Learned(head));
    }

    #[test]
    fn mos_round_trip() {
        let w = OutputEmbedding::new(3, 2, vec![0.5, 1.0, -1.0, 0.25, 2.0, 0.0]).unwrap();
        let head = MoSHead::new(&w, 2, (0..8).map(|i| i as f64).collect(), vec![0.1; 4], vec![-0.3; 4]).unwrap();
        round_trip(SavedHead::Mos(head.clone()));
        assert!(SavedHead::Mos(head).into_learned().is_err());
    }
}
