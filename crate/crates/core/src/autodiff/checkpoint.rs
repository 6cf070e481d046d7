//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "VSFCKPT\0"
//! version  u32 LE   currently 1
//! count    u32 LE   number of records
//! record*  name_len u32 LE, name UTF-8 bytes,
//!          trainable u8 (0 buffer / 1 parameter),
//!          ndim u32 LE, dims u64 LE × ndim,
//!          values f64 LE × prod(dims)
//! ```
//!
//! Values are written with `to_le_bytes`, so a save/load round trip is
//! bit-exact.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"VSFCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor,
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for e in store.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.trainable as u8);
        out.extend_from_slice(&(e.value.shape().len() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Invalid("parameter name is not UTF-8".into()))?;
        let trainable = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(CheckpointError::Invalid(format!("bad trainable flag {b} for {name}"))),
        };
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(CheckpointError::Truncated)?;
        let raw = r.take(len.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let value = Tensor::new(&dims, data).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        records.push(Record { name, trainable, value });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Invalid("trailing bytes after last record".into()));
    }
    Ok(records)
}

/// Copies checkpoint values into `store`, requiring identical names, order,
/// kinds and shapes.
pub fn restore(store: &mut ParamStore, records: &[Record]) -> Result<(), CheckpointError> {
    if records.len() != store.len() {
        return Err(CheckpointError::Mismatch(format!(
            "checkpoint has {} tensors, model has {}",
            records.len(),
            store.len()
        )));
    }
    for (e, r) in store.entries().iter().zip(records) {
        if e.name != r.name || e.trainable != r.trainable || e.value.shape() != r.value.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "model tensor {} {:?} vs checkpoint tensor {} {:?}",
                e.name,
                e.value.shape(),
                r.name,
                r.value.shape()
            )));
        }
    }
    for (e, r) in store.entries_mut().iter_mut().zip(records) {
        e.value = r.value.clone();
    }
    Ok(())
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, encode(store))?;
    Ok(())
}

pub fn load_into(store: &mut ParamStore, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let records = decode(&fs::read(path)?)?;
    restore(store, &records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::from_fn(&[2, 3], |i| (i as f64).sin() * 1e-300), true).unwrap();
        s.add("a.bias", Tensor::new(&[2], vec![f64::MIN_POSITIVE, -0.0]).unwrap(), true).unwrap();
        s.add("bn.running_var", Tensor::filled(&[4], 1.0 / 3.0), false).unwrap();
        s.add("scalar", Tensor::scalar(std::f64::consts::PI), true).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let bytes = encode(&s);
        let recs = decode(&bytes).unwrap();
        let mut fresh = s.clone();
        for e in fresh.entries_mut() {
            e.value.data_mut().iter_mut().for_each(|v| *v = 7.0);
        }
        restore(&mut fresh, &recs).unwrap();
        for (a, b) in fresh.entries().iter().zip(s.entries()) {
            let ab: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(encode(&fresh), bytes);
    }

    #[test]
    fn rejects_corruption_and_mismatch() {
        let s = store();
        let bytes = encode(&s);
        assert!(matches!(decode(&bytes[..5]), Err(CheckpointError::BadMagic)));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated)));
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(matches!(decode(&wrong), Err(CheckpointError::Version(9))));

        let mut other = ParamStore::new();
        other.add("a.weight", Tensor::zeros(&[3, 2]), true).unwrap();
        other.add("a.bias", Tensor::zeros(&[2]), true).unwrap();
        other.add("bn.running_var", Tensor::zeros(&[4]), false).unwrap();
        other.add("scalar", Tensor::scalar(0.0), true).unwrap();
        assert!(matches!(restore(&mut other, &decode(&bytes).unwrap()), Err(CheckpointError::Mismatch(_))));
    }
}
