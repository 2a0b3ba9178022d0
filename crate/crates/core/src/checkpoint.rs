//! Flat named-tensor container (little-endian f32) and JSON manifests.
//!
//! Layout: `MAGIC`, `u32` tensor count, then per tensor `u32` name length,
//! UTF-8 name, `u32` rank, `u64` dims, f32 data.

use std::fs;
use std::path::Path;

use ldz_tensor::{ParamStore, Scalar, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{io_err, LdzError, Result};

pub const MAGIC: &[u8; 8] = b"LDZTNS01";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn encode_store<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_scalars() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_f32c().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| LdzError::Checkpoint("truncated tensor container".into()))?;
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
}

pub fn decode_tensors<T: Scalar>(buf: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(LdzError::Checkpoint("bad magic header".into()));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| LdzError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::from_f64c(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(LdzError::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

/// Overwrites every entry of `store` from `tensors`. Names and shapes must
/// match exactly.
pub fn fill_store<T: Scalar>(store: &mut ParamStore<T>, tensors: Vec<(String, Tensor<T>)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(LdzError::Checkpoint(format!(
            "container holds {} tensors, model expects {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        store
            .set(&name, t)
            .map_err(|e| LdzError::Checkpoint(format!("loading `{name}`: {e}")))?;
    }
    Ok(())
}

pub fn save_store<T: Scalar>(path: &Path, store: &ParamStore<T>) -> Result<String> {
    let bytes = encode_store(store);
    fs::write(path, &bytes).map_err(io_err(path))?;
    Ok(sha256_hex(&bytes))
}

pub fn load_store<T: Scalar>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    fill_store(store, decode_tensors(&bytes)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of the parameters as they would be serialized.
pub fn store_hash<T: Scalar>(store: &ParamStore<T>) -> String {
    sha256_hex(&encode_store(store))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(sha256_hex(&bytes))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_corruption() {
        let mut s = ParamStore::<f32>::new();
        s.add("a.weight", Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, 9.0]).unwrap());
        s.add("b", Tensor::scalar(4.0));
        let bytes = encode_store(&s);
        let mut t = ParamStore::<f32>::new();
        t.add("a.weight", Tensor::zeros(&[2, 3]));
        t.add("b", Tensor::zeros(&[]));
        fill_store(&mut t, decode_tensors(&bytes).unwrap()).unwrap();
        assert_eq!(store_hash(&s), store_hash(&t));
        assert!(decode_tensors::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_tensors::<f32>(&bad).is_err());
        let mut wrong = ParamStore::<f32>::new();
        wrong.add("a.weight", Tensor::zeros(&[3, 2]));
        wrong.add("b", Tensor::zeros(&[]));
        assert!(fill_store(&mut wrong, decode_tensors(&bytes).unwrap()).is_err());
    }
}
