//! NPDL1: a flat, little-endian container of named f32 tensors.
//!
//! ```text
//! "NPDL" | u32 version (=1) | u32 count
//! per tensor: u16 name_len | name (UTF-8) | u8 rank | u32 dims[rank] | u8 dtype (0 = f32) | f32 payload
//! ```

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NPDL";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                expected: n,
                actual: data.len(),
            });
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("tensor name too long ({} bytes)", name.len())));
        }
        if shape.len() > u8::MAX as usize || shape.iter().any(|d| *d > u32::MAX as usize) {
            return Err(Error::Format(format!("unrepresentable shape {shape:?}")));
        }
        Ok(Self { name, shape, data })
    }

    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(name, shape, data.iter().map(|v| *v as f32).collect())
    }
}

/// Ordered set of uniquely named tensors. Order is preserved on write and read,
/// so `write(read(bytes)) == bytes`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    tensors: Vec<Tensor>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tensor: Tensor) -> Result<()> {
        if self.get(&tensor.name).is_some() {
            return Err(Error::Format(format!("duplicate tensor name {:?}", tensor.name)));
        }
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.tensors.iter().map(|t| t.data.len() * 4 + t.name.len() + 16).sum();
        let mut out = Vec::with_capacity(12 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for d in &t.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            out.push(DTYPE_F32);
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic, not an NPDL file".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported NPDL version {version}")));
        }
        let count = r.u32("tensor count")?;
        let mut c = Self::new();
        for i in 0..count {
            let name_len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap());
            let name = std::str::from_utf8(r.take(name_len as usize, "name")?)
                .map_err(|_| Error::Format(format!("tensor {i} name is not UTF-8")))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dims")? as usize);
            }
            let dtype = r.take(1, "dtype")?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("tensor {name:?} has unsupported dtype {dtype}")));
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Format(format!("tensor {name:?} is too large")))?;
            let data = r
                .take(n, "payload")?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            c.push(Tensor { name, shape, data })?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(c)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated file while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TensorContainer {
        let mut c = TensorContainer::new();
        c.push(Tensor::new("a", vec![2, 3], (0..6).map(|i| i as f32 * 0.5).collect()).unwrap())
            .unwrap();
        c.push(Tensor::new("scalar", vec![], vec![f32::MIN_POSITIVE]).unwrap())
            .unwrap();
        c.push(Tensor::new("é/empty", vec![0, 4], vec![]).unwrap())
            .unwrap();
        c
    }

    #[test]
    fn layout_matches_hand_encoding() {
        let mut c = TensorContainer::new();
        c.push(Tensor::new("w", vec![2], vec![1.0, -2.0]).unwrap()).unwrap();
        let mut want = b"NPDL".to_vec();
        want.extend([1, 0, 0, 0, 1, 0, 0, 0]);
        want.extend([1, 0, b'w', 1, 2, 0, 0, 0, 0]);
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.0f32).to_le_bytes());
        assert_eq!(c.to_bytes(), want);
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let bytes = sample().to_bytes();
        let back = TensorContainer::from_bytes(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_malformed_files() {
        let good = sample().to_bytes();
        let mut bad_magic = good.clone();
        bad_magic[..4].copy_from_slice(b"XXXX");
        assert!(matches!(TensorContainer::from_bytes(&bad_magic), Err(Error::Format(_))));

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(TensorContainer::from_bytes(&bad_version).is_err());

        for cut in [0, 3, 11, 14, good.len() - 1] {
            assert!(TensorContainer::from_bytes(&good[..cut]).is_err(), "cut at {cut}");
        }

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(TensorContainer::from_bytes(&trailing).is_err());

        let mut dup = TensorContainer::new();
        dup.push(Tensor::new("x", vec![1], vec![0.0]).unwrap()).unwrap();
        assert!(dup.push(Tensor::new("x", vec![1], vec![1.0]).unwrap()).is_err());
        let mut raw = dup.to_bytes();
        raw[8] = 2;
        let tail = raw[12..].to_vec();
        raw.extend(tail);
        assert!(TensorContainer::from_bytes(&raw).is_err(), "duplicate names on disk");

        let mut bad_dtype = TensorContainer::new();
        bad_dtype.push(Tensor::new("x", vec![1], vec![0.0]).unwrap()).unwrap();
        let mut raw = bad_dtype.to_bytes();
        let dtype_at = 12 + 2 + 1 + 1 + 4;
        raw[dtype_at] = 7;
        assert!(TensorContainer::from_bytes(&raw).is_err());
    }

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(Tensor::new("x", vec![2, 2], vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_containers_round_trip(
            tensors in proptest::collection::vec(
                (proptest::collection::vec(0usize..4, 0..4), any::<u32>()),
                0..6,
            )
        ) {
            let mut c = TensorContainer::new();
            for (i, (shape, seed)) in tensors.into_iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|j| f32::from_bits(seed.wrapping_add((j as u32).wrapping_mul(2654435761)))).collect();
                c.push(Tensor::new(format!("t{i}"), shape, data).unwrap()).unwrap();
            }
            let bytes = c.to_bytes();
            let back = TensorContainer::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
