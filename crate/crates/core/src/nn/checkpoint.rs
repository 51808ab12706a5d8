//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "CODCHAIN"
//! version    u32      1
//! header     u64 length + UTF-8 JSON (model config, vocabularies)
//! count      u64      number of tensors
//! per tensor:
//!   name     u32 length + UTF-8
//!   dtype    u8       1 = f32, 2 = f64
//!   ndim     u32, then ndim × u64 dims
//!   values   product(dims) little-endian floats
//! ```

use std::path::Path;

use super::{ParamStore, ParamTensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CODCHAIN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

pub fn encode(header: &serde_json::Value, params: &ParamStore, dtype: DType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let header = serde_json::to_vec(header)?;
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for t in params.tensors() {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(dtype as u8);
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &t.values {
            match dtype {
                DType::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
                DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(serde_json::Value, Vec<ParamTensor>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = r.len()?;
    let header: serde_json::Value = serde_json::from_slice(r.take(hlen)?)?;
    let count = r.len()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let dtype = r.take(1)?[0];
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values = match dtype {
            1 => r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            2 => r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            other => return Err(Error::Checkpoint(format!("unknown dtype {other} for {name}"))),
        };
        tensors.push(ParamTensor { name, shape, values });
    }
    Ok((header, tensors))
}

pub fn save(path: &Path, header: &serde_json::Value, params: &ParamStore, dtype: DType) -> Result<()> {
    crate::corpus::write_file(path, &encode(header, params, dtype)?)
}

pub fn load(path: &Path) -> Result<(serde_json::Value, Vec<ParamTensor>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Copy values from loaded tensors into `params` by name, checking shapes.
pub fn restore(params: &mut ParamStore, tensors: Vec<ParamTensor>) -> Result<()> {
    if tensors.len() != params.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {}", params.len(), tensors.len())));
    }
    for t in tensors {
        let id = params.find(&t.name).ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", t.name)))?;
        let slot = &mut params.tensors_mut()[id.0];
        if slot.shape != t.shape {
            return Err(Error::Checkpoint(format!("shape mismatch for {}: {:?} vs {:?}", t.name, slot.shape, t.shape)));
        }
        slot.values = t.values;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::xavier_init;

    fn store() -> ParamStore {
        let mut p = ParamStore::new();
        p.add(xavier_init("enc.w", &[3, 4], 1));
        p.add(xavier_init("out.b", &[5], 2));
        p
    }

    #[test]
    fn roundtrip_f64_exact() {
        let p = store();
        let header = serde_json::json!({"kind": "test"});
        let bytes = encode(&header, &p, DType::F64).unwrap();
        let (h, tensors) = decode(&bytes).unwrap();
        assert_eq!(h, header);
        assert_eq!(tensors, p.tensors());
    }

    #[test]
    fn roundtrip_f32_rounds() {
        let p = store();
        let (_, tensors) = decode(&encode(&serde_json::Value::Null, &p, DType::F32).unwrap()).unwrap();
        for (a, b) in tensors.iter().zip(p.tensors()) {
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn rejects_corruption() {
        let p = store();
        let mut bytes = encode(&serde_json::Value::Null, &p, DType::F64).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn restore_checks_shapes() {
        let mut p = store();
        let mut other = ParamStore::new();
        other.add(xavier_init("enc.w", &[4, 3], 1));
        other.add(xavier_init("out.b", &[5], 2));
        assert!(restore(&mut p, other.tensors().to_vec()).is_err());
        let src = store();
        let mut dst = store();
        dst.tensors_mut()[0].values[0] = 99.0;
        restore(&mut dst, src.tensors().to_vec()).unwrap();
        assert_eq!(dst, src);
    }
}
