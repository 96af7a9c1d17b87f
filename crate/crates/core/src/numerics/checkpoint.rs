//! `NHCK` checkpoint files.
//!
//! Layout (little-endian): magic `NHCK`, version `u32`, parameter count
//! `u32`, then per parameter: name length `u32`, UTF-8 name, rank `u32`,
//! dims `u32 x rank`, `f32` data. The global step travels as the
//! `__step` entry.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::optim::{join_counter, split_counter};
use crate::numerics::tensor::{ParameterStore, Tensor};

pub const MAGIC: &[u8; 4] = b"NHCK";
pub const VERSION: u32 = 1;
const STEP_KEY: &str = "__step";

pub fn encode_params(store: &ParameterStore) -> Vec<u8> {
    let mut entries: Vec<(&str, &Tensor)> = store.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let step = Tensor::new(&[2], split_counter(store.step)).expect("step tensor");
    if !store.contains(STEP_KEY) {
        entries.push((STEP_KEY, &step));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_params(store: &ParameterStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_params(store)).map_err(|e| Error::io(path, e))
}

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("{}: truncated at byte {}", self.what, self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format(format!("{}: size overflow", self.what)))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        let m = self.take(4)?;
        if m != magic {
            return Err(Error::Format(format!(
                "{}: bad magic {:?}, expected {:?}",
                self.what,
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        let v = self.u32()?;
        if v != version {
            return Err(Error::Format(format!("{}: version {v}, expected {version}", self.what)));
        }
        Ok(())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<ParameterStore> {
    let mut c = Cursor::new(bytes, "checkpoint");
    c.expect_magic(MAGIC, VERSION)?;
    let n = c.u32()?;
    let mut store = ParameterStore::new();
    for _ in 0..n {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Format("checkpoint: parameter name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("checkpoint: parameter {name} has rank {rank}")));
        }
        let dims: Vec<usize> = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Format("checkpoint: size overflow".into()))?;
        let data = c.f32s(numel)?;
        if name == STEP_KEY {
            store.step = join_counter(&data);
            continue;
        }
        let mut t = Tensor::new(&dims, data).map_err(|e| Error::Format(e.to_string()))?;
        if !name.starts_with("__") {
            t = t.with_grad();
        }
        store.insert(name, t).map_err(|e| Error::Format(e.to_string()))?;
    }
    if c.remaining() != 0 {
        return Err(Error::Format(format!("checkpoint: {} trailing bytes", c.remaining())));
    }
    Ok(store)
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParameterStore> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_params(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("enc.w", Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap().with_grad())
            .unwrap();
        s.insert("enc.b", Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap().with_grad()).unwrap();
        s.step = 77;
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample_store();
        let back = decode_params(&encode_params(&s)).unwrap();
        assert_eq!(back.step, 77);
        for ((n1, t1), (n2, t2)) in s.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn truncated_file_is_format_error() {
        let bytes = encode_params(&sample_store());
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(decode_params(&bytes[..cut]), Err(Error::Format(_))));
        }
    }

    #[test]
    fn wrong_magic_or_version() {
        let mut bytes = encode_params(&sample_store());
        bytes[4] = 9;
        assert!(matches!(decode_params(&bytes), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_params(&bytes), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn arbitrary_stores_round_trip(vals in proptest::collection::vec(proptest::num::f32::ANY, 1..64), step in 0u64..(1 << 40)) {
            let mut s = ParameterStore::new();
            s.insert("p", Tensor::new(&[vals.len()], vals.clone()).unwrap().with_grad()).unwrap();
            s.step = step;
            let back = decode_params(&encode_params(&s)).unwrap();
            let bits: Vec<u32> = back.get("p").unwrap().data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, vals.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back.step, step);
        }
    }
}
