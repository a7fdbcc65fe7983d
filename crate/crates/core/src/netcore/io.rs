//! Binary weights container.
//!
//! Layout (all integers `u64` little-endian, floats `f64` little-endian):
//!
//! ```text
//! "RFW1" count { name_len name rank extents[rank] payload[prod(extents)] }*count
//! meta_len meta_json
//! ```
//!
//! The trailing JSON block carries the architecture and training provenance
//! so a file is self-describing.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelSpec, ModelWeights, NamedTensor, TrainingMeta};
use super::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RFW1";

#[derive(Serialize, Deserialize)]
struct Trailer {
    spec: ModelSpec,
    meta: TrainingMeta,
}

pub fn encode_weights(w: &ModelWeights) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(w.tensors.len() as u64).to_le_bytes());
    for t in &w.tensors {
        out.extend_from_slice(&(t.name.len() as u64).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.tensor.rank() as u64).to_le_bytes());
        for &e in t.tensor.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let trailer = serde_json::to_vec(&Trailer { spec: w.spec.clone(), meta: w.meta.clone() })?;
    out.extend_from_slice(&(trailer.len() as u64).to_le_bytes());
    out.extend_from_slice(&trailer);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::CorruptFile(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        // Anything larger than the remaining buffer cannot be valid.
        if v > (self.buf.len() - self.pos) as u64 * 8 + 64 {
            return Err(Error::CorruptFile(format!("implausible {what} {v}")));
        }
        Ok(v as usize)
    }
}

pub fn decode_weights(buf: &[u8]) -> Result<ModelWeights> {
    if buf.len() < 4 {
        return Err(Error::CorruptFile("file shorter than the magic header".into()));
    }
    if &buf[..4] != MAGIC {
        if &buf[..3] == b"RFW" {
            return Err(Error::VersionMismatch {
                found: String::from_utf8_lossy(&buf[..4]).into_owned(),
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
            });
        }
        return Err(Error::CorruptFile("bad magic bytes".into()));
    }
    let mut r = Reader { buf, pos: 4 };
    let count = r.len("tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let nlen = r.len("name length")?;
        let name = std::str::from_utf8(r.take(nlen, "name")?)
            .map_err(|_| Error::CorruptFile("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.len("rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.len("extent")?);
        }
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let n = n.ok_or_else(|| Error::CorruptFile(format!("extents of `{name}` overflow")))?;
        let bytes = r.take(n.saturating_mul(8), "payload")?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::CorruptFile(e.to_string()))?;
        tensors.push(NamedTensor { name, tensor });
    }
    let tlen = r.len("metadata length")?;
    let trailer: Trailer = serde_json::from_slice(r.take(tlen, "metadata")?)
        .map_err(|e| Error::CorruptFile(format!("metadata: {e}")))?;
    if r.pos != buf.len() {
        return Err(Error::CorruptFile(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(ModelWeights { tensors, spec: trailer.spec, meta: trailer.meta })
}

pub fn save_weights(path: &Path, w: &ModelWeights) -> Result<()> {
    let bytes = encode_weights(w)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    decode_weights(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{Model, ModelSpec};

    fn sample() -> ModelWeights {
        let mut m = Model::init(ModelSpec::pointnet_lite(4), 5).unwrap();
        m.meta_mut().dataset_id = "synthetic".into();
        m.meta_mut().class_names = vec!["a".into(), "b".into(), "c".into(), "d".into()];
        m.into_weights()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.rfw");
        let w = sample();
        save_weights(&p, &w).unwrap();
        let back = load_weights(&p).unwrap();
        assert_eq!(back, w);
        for (a, b) in back.tensors.iter().zip(&w.tensors) {
            assert!(a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = encode_weights(&sample()).unwrap();
        for cut in [2, 10, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_weights(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::CorruptFile(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn bumped_version_is_rejected() {
        let mut bytes = encode_weights(&sample()).unwrap();
        bytes[3] = b'2';
        assert!(matches!(decode_weights(&bytes), Err(Error::VersionMismatch { .. })));
    }

    #[test]
    fn header_layout() {
        let w = sample();
        let bytes = encode_weights(&w).unwrap();
        assert_eq!(&bytes[..4], b"RFW1");
        assert_eq!(u64::from_le_bytes(bytes[4..12].try_into().unwrap()), w.tensors.len() as u64);
        let nlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        assert_eq!(&bytes[20..20 + nlen], w.tensors[0].name.as_bytes());
    }
}
