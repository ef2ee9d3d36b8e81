//! Named-tensor archive: the on-disk format for checkpoints, fitted
//! gaussians and dataset samples.
//!
//! Layout, all integers little-endian:
//! `b"GSSL1"`, `u32` entry count, then per entry `u32` name length, name
//! bytes (UTF-8), `u8` dtype tag (`0` = f32), `u32` rank, `rank x u64` dims
//! and the `f32` payload.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"GSSL1";
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorArchive {
    entries: Vec<Entry>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn push_f32(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<()> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Data(format!("duplicate archive entry `{name}`")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "entry `{name}`: shape {shape:?} holds {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        self.entries.push(Entry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        Ok(())
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
        self.push_f32(name, shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Data(format!("archive has no entry `{name}`")))
    }

    /// Entry values widened to f64, checked against the expected shape.
    pub fn get_f64(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let e = self.get(name)?;
        if e.shape != shape {
            return Err(Error::Shape(format!(
                "entry `{name}` has shape {:?}, expected {shape:?}",
                e.shape
            )));
        }
        Ok(e.data.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Data("not a tensor archive (bad magic)".into()));
        }
        let count = r.u32()? as usize;
        let mut archive = TensorArchive::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Data("entry name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Data(format!("entry `{name}`: unknown dtype tag {dtype}")));
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Data("dimension overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::Data(format!("entry `{name}`: implausible shape {shape:?}")))?;
            let payload = r.take(n * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            archive.push_f32(&name, &shape, data)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Data(format!("{} trailing bytes after last entry", bytes.len() - r.pos)));
        }
        Ok(archive)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(reason) => Error::Data(format!("{}: {reason}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Data(format!("archive truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_stable() {
        let mut a = TensorArchive::new();
        a.push("w", &[2], &[1.0, -2.0]).unwrap();
        let b = a.to_bytes();
        assert_eq!(&b[..5], b"GSSL1");
        assert_eq!(&b[5..9], &1u32.to_le_bytes());
        assert_eq!(&b[9..13], &1u32.to_le_bytes());
        assert_eq!(b[13], b'w');
        assert_eq!(b[14], 0);
        assert_eq!(&b[15..19], &1u32.to_le_bytes());
        assert_eq!(&b[19..27], &2u64.to_le_bytes());
        assert_eq!(&b[27..31], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 35);
    }

    #[test]
    fn rejects_bad_input() {
        let mut a = TensorArchive::new();
        a.push("x", &[1], &[0.0]).unwrap();
        assert!(a.push("x", &[1], &[0.0]).is_err());
        assert!(a.push("y", &[3], &[0.0]).is_err());
        let bytes = a.to_bytes();
        assert!(TensorArchive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(TensorArchive::from_bytes(b"GSSL2\0\0\0\0").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(TensorArchive::from_bytes(&extra).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_identical(
            entries in prop::collection::vec(
                (prop::collection::vec(1usize..4, 0..3), any::<u32>()),
                0..6,
            )
        ) {
            let mut a = TensorArchive::new();
            for (i, (shape, bits)) in entries.iter().enumerate() {
                let n: usize = shape.iter().product();
                let data: Vec<f32> = (0..n).map(|j| f32::from_bits(bits.wrapping_add(j as u32 * 7919))).collect();
                a.push_f32(&format!("t{i}"), shape, data).unwrap();
            }
            let bytes = a.to_bytes();
            let b = TensorArchive::from_bytes(&bytes).unwrap();
            prop_assert_eq!(b.to_bytes(), bytes);
            for (x, y) in a.entries().iter().zip(b.entries()) {
                prop_assert_eq!(&x.shape, &y.shape);
                let xb: Vec<u32> = x.data.iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u32> = y.data.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(xb, yb);
            }
        }
    }
}
