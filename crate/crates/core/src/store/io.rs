//! On-disk formats. All integers and floats are little-endian.
//!
//! ```text
//! datastore  "KNLMDS01" u32 version u8 dtype u32 D u64 N | keys (N*D) | N x u32 values
//! dump       "KNLMCD01" u32 version u8 flags u8 dtype u32 D u64 N | N x ([att][ffn] u32 target)
//! embedding  "KNLMWM01" u32 version u8 dtype u32 V u32 D | V*D matrix
//! vocabulary UTF-8 lines "<id>\t<token>"
//! ```
//! `dtype` is 0 for f32 and 1 for f16; dump `flags` bit 0 is has_att, bit 1
//! has_ffn.

use std::fs::File;
use std::path::Path;
use std::sync::Arc;

use half::f16;
use memmap2::Mmap;

use super::{ContextDump, Datastore, KeyMatrix, MappedKeys, OutputEmbedding, Precision, SourceTag, Vocabulary};
use crate::binfmt::{read_file, to_u32, Reader, Writer};
use crate::error::{Error, Result};

pub const DATASTORE_MAGIC: &[u8; 8] = b"KNLMDS01";
pub const DUMP_MAGIC: &[u8; 8] = b"KNLMCD01";
pub const EMBEDDING_MAGIC: &[u8; 8] = b"KNLMWM01";
const VERSION: u32 = 1;

fn precision_at(r: &mut Reader<'_>) -> Result<Precision> {
    let at = r.pos();
    let tag = r.u8("dtype")?;
    Precision::from_dtype_tag(tag).ok_or_else(|| r.error(at, format!("unknown dtype {tag}")))
}

fn write_floats(w: &mut Writer, data: &[f32], precision: Precision) -> Result<()> {
    match precision {
        Precision::F32 => {
            for x in data {
                w.bytes(&x.to_le_bytes())?;
            }
        }
        Precision::F16 => {
            for x in data {
                w.bytes(&f16::from_f32(*x).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn decode_floats(bytes: &[u8], precision: Precision) -> Vec<f32> {
    match precision {
        Precision::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Precision::F16 => bytes
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
    }
}

fn checked_len(r: &Reader<'_>, parts: &[u64], what: &str) -> Result<usize> {
    parts
        .iter()
        .try_fold(1u64, |acc, p| acc.checked_mul(*p))
        .and_then(|v| usize::try_from(v).ok())
        .ok_or_else(|| r.error(r.pos(), format!("{what} size overflows")))
}

struct DatastoreHeader {
    precision: Precision,
    dim: usize,
    n: usize,
    keys_offset: usize,
    key_len: usize,
}

fn datastore_header(r: &mut Reader<'_>) -> Result<DatastoreHeader> {
    r.magic(DATASTORE_MAGIC)?;
    r.version(VERSION)?;
    let precision = precision_at(r)?;
    let dim_at = r.pos();
    let dim = r.u32("D")? as usize;
    if dim == 0 {
        return Err(r.error(dim_at, "D must be positive"));
    }
    let n = r.u64("N")?;
    let key_len = checked_len(r, &[n, dim as u64, precision.bytes() as u64], "key block")?;
    Ok(DatastoreHeader {
        precision,
        dim,
        n: n as usize,
        keys_offset: r.pos(),
        key_len,
    })
}

impl Datastore {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = Writer::create(path)?;
        w.bytes(DATASTORE_MAGIC)?;
        w.u32(VERSION)?;
        w.u8(self.precision().dtype_tag())?;
        w.u32(to_u32(self.dim, "D")?)?;
        w.u64(self.len() as u64)?;
        w.bytes(&self.keys.le_bytes())?;
        for v in &self.values {
            w.u32(*v)?;
        }
        w.finish()
    }

    /// Reads the whole file into memory.
    pub fn read(path: &Path) -> Result<Datastore> {
        let buf = read_file(path)?;
        let mut r = Reader::new(&buf, path);
        let h = datastore_header(&mut r)?;
        let raw = r.bytes(h.key_len, "keys")?;
        let keys = match h.precision {
            Precision::F32 => KeyMatrix::F32(decode_floats(raw, Precision::F32)),
            Precision::F16 => KeyMatrix::F16(
                raw.chunks_exact(2)
                    .map(|c| f16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
        };
        let values = r.u32s(h.n, "values")?;
        r.finish()?;
        Datastore::new(keys, values, h.dim, SourceTag::Unknown)
    }

    /// Memory-maps the key block; values are copied into memory.
    pub fn open(path: &Path) -> Result<Datastore> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        // SAFETY: the mapping is read-only; the file must not be modified
        // while the datastore is alive.
        let map = unsafe { Mmap::map(&file) }.map_err(|e| Error::io(path, e))?;
        let map = Arc::new(map);
        let mut r = Reader::new(&map, path);
        let h = datastore_header(&mut r)?;
        r.skip(h.key_len, "keys")?;
        let values = r.u32s(h.n, "values")?;
        r.finish()?;
        let keys = KeyMatrix::Mapped(MappedKeys {
            map: map.clone(),
            offset: h.keys_offset,
            precision: h.precision,
            elements: h.n * h.dim,
        });
        Datastore::new(keys, values, h.dim, SourceTag::Unknown)
    }
}

impl ContextDump {
    pub fn write(&self, path: &Path, precision: Precision) -> Result<()> {
        let mut w = Writer::create(path)?;
        w.bytes(DUMP_MAGIC)?;
        w.u32(VERSION)?;
        let flags = u8::from(self.att.is_some()) | (u8::from(self.ffn.is_some()) << 1);
        w.u8(flags)?;
        w.u8(precision.dtype_tag())?;
        w.u32(to_u32(self.dim, "D")?)?;
        w.u64(self.len() as u64)?;
        let d = self.dim;
        for (i, t) in self.targets.iter().enumerate() {
            if let Some(att) = &self.att {
                write_floats(&mut w, &att[i * d..(i + 1) * d], precision)?;
            }
            if let Some(ffn) = &self.ffn {
                write_floats(&mut w, &ffn[i * d..(i + 1) * d], precision)?;
            }
            w.u32(*t)?;
        }
        w.finish()
    }

    pub fn read(path: &Path) -> Result<ContextDump> {
        let buf = read_file(path)?;
        let mut r = Reader::new(&buf, path);
        r.magic(DUMP_MAGIC)?;
        r.version(VERSION)?;
        let flags_at = r.pos();
        let flags = r.u8("flags")?;
        if flags & !0b11 != 0 {
            return Err(r.error(flags_at, format!("unknown flag bits {flags:#04b}")));
        }
        let (has_att, has_ffn) = (flags & 1 != 0, flags & 2 != 0);
        let precision = precision_at(&mut r)?;
        let dim_at = r.pos();
        let dim = r.u32("D")? as usize;
        if dim == 0 {
            return Err(r.error(dim_at, "D must be positive"));
        }
        let n = r.u64("N")?;
        let views = usize::from(has_att) + usize::from(has_ffn);
        let record = views * dim * precision.bytes() + 4;
        let total = checked_len(&r, &[n, record as u64], "record block")?;
        if r.remaining() < total {
            return Err(r.error(
                buf.len(),
                format!(
                    "truncated: {n} records need {total} bytes after the header, {} present",
                    r.remaining()
                ),
            ));
        }
        let n = n as usize;
        let mut att = has_att.then(|| Vec::with_capacity(n * dim));
        let mut ffn = has_ffn.then(|| Vec::with_capacity(n * dim));
        let mut targets = Vec::with_capacity(n);
        let width = dim * precision.bytes();
        for _ in 0..n {
            if let Some(a) = att.as_mut() {
                a.extend(decode_floats(r.bytes(width, "h_att")?, precision));
            }
            if let Some(f) = ffn.as_mut() {
                f.extend(decode_floats(r.bytes(width, "h_ffn")?, precision));
            }
            targets.push(r.u32("target")?);
        }
        r.finish()?;
        ContextDump::new(dim, att, ffn, targets)
    }
}

impl OutputEmbedding {
    pub fn write(&self, path: &Path, precision: Precision) -> Result<()> {
        let mut w = Writer::create(path)?;
        w.bytes(EMBEDDING_MAGIC)?;
        w.u32(VERSION)?;
        w.u8(precision.dtype_tag())?;
        w.u32(to_u32(self.vocab_size, "V")?)?;
        w.u32(to_u32(self.dim, "D")?)?;
        write_floats(&mut w, &self.data, precision)?;
        w.finish()
    }

    pub fn read(path: &Path) -> Result<OutputEmbedding> {
        let buf = read_file(path)?;
        let mut r = Reader::new(&buf, path);
        r.magic(EMBEDDING_MAGIC)?;
        r.version(VERSION)?;
        let precision = precision_at(&mut r)?;
        let v_at = r.pos();
        let v = r.u32("V")? as usize;
        let d = r.u32("D")? as usize;
        if v == 0 || d == 0 {
            return Err(r.error(v_at, "V and D must be positive"));
        }
        let len = checked_len(&r, &[v as u64, d as u64, precision.bytes() as u64], "matrix")?;
        let data = decode_floats(r.bytes(len, "matrix")?, precision);
        r.finish()?;
        OutputEmbedding::new(v, d, data)
    }
}

impl Vocabulary {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            text.push_str(&format!("{i}\t{t}\n"));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Vocabulary> {
        let buf = read_file(path)?;
        let text = std::str::from_utf8(&buf).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: e.valid_up_to() as u64,
            message: "vocabulary is not valid UTF-8".into(),
        })?;
        let mut slots: Vec<Option<String>> = Vec::new();
        let mut offset = 0usize;
        for line in text.split_inclusive('\n') {
            let bad = |msg: String| Error::Format {
                path: path.to_path_buf(),
                offset: offset as u64,
                message: msg,
            };
            let body = line.trim_end_matches('\n').trim_end_matches('\r');
            if !body.is_empty() {
                let (id, token) = body
                    .split_once('\t')
                    .ok_or_else(|| bad(format!("expected `<id>\\t<token>`, got {body:?}")))?;
                let id: usize = id.parse().map_err(|_| bad(format!("bad id {id:?}")))?;
                if token.is_empty() {
                    return Err(bad(format!("empty token for id {id}")));
                }
                if id >= slots.len() {
                    slots.resize(id + 1, None);
                }
                if slots[id].replace(token.to_string()).is_some() {
                    return Err(bad(format!("duplicate id {id}")));
                }
            }
            offset += line.len();
        }
        let tokens = slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                s.ok_or_else(|| Error::Format {
                    path: path.to_path_buf(),
                    offset: offset as u64,
                    message: format!("ids are not dense: {i} missing"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Vocabulary::new(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{build_datastore, View};
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn dump(n: usize, d: usize, seed: u64) -> ContextDump {
        let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let mut next = || {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((x >> 11) as f64 / (1u64 << 53) as f64 * 8.0 - 4.0) as f32
        };
        let att: Vec<f32> = (0..n * d).map(|_| next()).collect();
        let ffn: Vec<f32> = (0..n * d).map(|_| next()).collect();
        let targets = (0..n as u32).map(|i| i % 13).collect();
        ContextDump::new(d, Some(att), Some(ffn), targets).unwrap()
    }

    #[test]
    fn datastore_roundtrip_read_and_mmap() {
        let dir = tempdir().unwrap();
        for precision in [Precision::F32, Precision::F16] {
            let ds = build_datastore(&dump(37, 5, 1), View::Att, precision).unwrap();
            let path = dir.path().join("ds.bin");
            ds.write(&path).unwrap();
            let read = Datastore::read(&path).unwrap();
            let mapped = Datastore::open(&path).unwrap();
            assert_eq!(read, ds);
            assert_eq!(mapped, ds);
            assert!(mapped.keys().is_mapped());
            for r in [0, 17, 36] {
                assert_eq!(mapped.row(r), ds.row(r));
            }
        }
    }

    #[test]
    fn truncated_datastore_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        build_datastore(&dump(10, 4, 2), View::Ffn, Precision::F16)
            .unwrap()
            .write(&path)
            .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [3usize, 12, 25, 40, bytes.len() - 1] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            for res in [Datastore::read(&path), Datastore::open(&path)] {
                match res {
                    Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
                    other => panic!("cut {cut}: expected format error, got {other:?}"),
                }
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(Datastore::read(&path), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn dump_roundtrip_f32_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let d = dump(20, 3, 4);
        d.write(&path, Precision::F32).unwrap();
        assert_eq!(ContextDump::read(&path).unwrap(), d);
        let only_att = ContextDump::new(3, d.att.clone(), None, d.targets.clone()).unwrap();
        only_att.write(&path, Precision::F16).unwrap();
        let back = ContextDump::read(&path).unwrap();
        assert!(back.view(View::Ffn).is_none());
        assert_eq!(back, only_att.quantized(Precision::F16));
    }

    #[test]
    fn truncated_dump_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.bin");
        dump(5, 2, 9).write(&path, Precision::F32).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(ContextDump::read(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn embedding_and_vocab_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let w = OutputEmbedding::new(3, 2, vec![1.0, -2.5, 0.125, 3.0, 1e-3, 7.0]).unwrap();
        w.write(&path, Precision::F32).unwrap();
        assert_eq!(OutputEmbedding::read(&path).unwrap(), w);

        let vpath = dir.path().join("vocab.txt");
        let v = Vocabulary::new(vec!["the".into(), "Fran cisco".into(), "é".into()]).unwrap();
        v.write(&vpath).unwrap();
        assert_eq!(std::fs::read_to_string(&vpath).unwrap(), "0\tthe\n1\tFran cisco\n2\té\n");
        assert_eq!(Vocabulary::read(&vpath).unwrap(), v);

        std::fs::write(&vpath, "0\ta\n2\tc\n").unwrap();
        assert!(matches!(Vocabulary::read(&vpath), Err(Error::Format { .. })));
        std::fs::write(&vpath, "0\ta\n0\tb\n").unwrap();
        assert!(matches!(Vocabulary::read(&vpath), Err(Error::Format { offset: 4, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn f16_dump_within_half_ulp(values in prop::collection::vec(-6.0e4f32..6.0e4, 1..64)) {
            let n = values.len();
            let dump = ContextDump::new(1, Some(values.clone()), None, vec![0; n]).unwrap();
            let dir = tempdir().unwrap();
            let path = dir.path().join("d.bin");
            dump.write(&path, Precision::F16).unwrap();
            let back = ContextDump::read(&path).unwrap();
            for (a, b) in values.iter().zip(back.view(View::Att).unwrap()) {
                // normal f16 range: relative rounding error at most 2^-11
                if a.abs() >= 6.2e-5 {
                    prop_assert!(((a - b) / a).abs() <= 2f32.powi(-11));
                }
            }
        }

        #[test]
        fn datastore_roundtrip_bit_exact(n in 1usize..40, d in 1usize..9, seed in any::<u64>(), half in any::<bool>()) {
            let precision = if half { Precision::F16 } else { Precision::F32 };
            let ds = build_datastore(&dump(n, d, seed), View::Att, precision).unwrap();
            let dir = tempdir().unwrap();
            let path = dir.path().join("ds.bin");
            ds.write(&path).unwrap();
            let back = Datastore::open(&path).unwrap();
            prop_assert_eq!(back.values(), ds.values());
            prop_assert_eq!(back.keys().le_bytes(), ds.keys().le_bytes());
        }
    }
}
