//! MBRT tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MBRT" | u32 version = 1 | u32 count
//! per tensor: u16 name_len | name (UTF-8) | u8 dtype (0 = f32, 1 = f64)
//!             | u8 rank | rank × u64 dims | raw little-endian data
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::{numel, Tensor};

pub const MAGIC: [u8; 4] = *b"MBRT";
pub const VERSION: u32 = 1;

/// A tensor as stored, in either dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    /// Converts to `T`, exactly when the dtypes agree.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for StoredTensor {
    fn from(t: Tensor<f32>) -> Self {
        StoredTensor::F32(t)
    }
}

impl From<Tensor<f64>> for StoredTensor {
    fn from(t: Tensor<f64>) -> Self {
        StoredTensor::F64(t)
    }
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, StoredTensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: impl Into<StoredTensor>) {
        self.entries.push((name.into(), tensor.into()));
    }

    pub fn push_tensor<T: Scalar>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        let stored = match T::DTYPE {
            DType::F32 => StoredTensor::F32(tensor.cast()),
            DType::F64 => StoredTensor::F64(tensor.cast()),
        };
        self.entries.push((name.into(), stored));
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &StoredTensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            let name_len = u16::try_from(name.len())
                .map_err(|_| FormatError::NameTooLong(name.clone()))?;
            let rank = u8::try_from(tensor.shape().len())
                .map_err(|_| FormatError::RankTooLarge(name.clone()))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(tensor.dtype().tag());
            out.push(rank);
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match tensor {
                StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(FormatError::BadMagic { found: magic });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let count = r.u32("tensor count")?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2"));
            let name = std::str::from_utf8(r.take(name_len as usize, "name")?)
                .map_err(|_| FormatError::InvalidName)?
                .to_owned();
            let tag = r.take(1, "dtype")?[0];
            let dtype = DType::from_tag(tag).ok_or(FormatError::UnknownDtype(tag))?;
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = u64::from_le_bytes(r.take(8, "dims")?.try_into().expect("8"));
                shape.push(usize::try_from(d).map_err(|_| FormatError::Truncated("dims"))?);
            }
            let n = numel(&shape);
            if shape.contains(&0) {
                return Err(FormatError::Truncated("dims"));
            }
            let byte_len = n
                .checked_mul(dtype.size_of())
                .ok_or(FormatError::Truncated("data"))?;
            let raw = r.take(byte_len, "data")?;
            let stored = match dtype {
                DType::F32 => StoredTensor::F32(decode(shape, raw)),
                DType::F64 => StoredTensor::F64(decode(shape, raw)),
            };
            entries.push((name, stored));
        }
        if r.pos != bytes.len() {
            return Err(FormatError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(Error::from)
    }
}

fn decode<T: Scalar>(shape: Vec<usize>, raw: &[u8]) -> Tensor<T> {
    let size = T::DTYPE.size_of();
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    Tensor::from_parts(shape, data)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(FormatError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.push("a", Tensor::new(vec![2, 2], vec![1.0f32, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap());
        c.push("block0.fwd.a_log", Tensor::scalar(std::f64::consts::PI));
        c
    }

    #[test]
    fn header_layout_is_exact() {
        let mut c = Container::new();
        c.push("x", Tensor::from_vec(vec![1.0f64]));
        let b = c.to_bytes().unwrap();
        let mut want = b"MBRT".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u16.to_le_bytes());
        want.push(b'x');
        want.push(1);
        want.push(1);
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&1.0f64.to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn corrupted_magic_is_named() {
        let mut b = sample().to_bytes().unwrap();
        b[0] = b'X';
        let err = Container::from_bytes(&b).unwrap_err();
        assert_eq!(err, FormatError::BadMagic { found: *b"XBRT" });
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn truncation_and_bad_tags_are_rejected() {
        let b = sample().to_bytes().unwrap();
        assert!(matches!(
            Container::from_bytes(&b[..b.len() - 1]),
            Err(FormatError::Truncated(_))
        ));
        let mut v = b.clone();
        v[4] = 2;
        assert_eq!(Container::from_bytes(&v), Err(FormatError::UnsupportedVersion(2)));
        let mut t = b.clone();
        // dtype byte of the first tensor: 12-byte header, 2-byte length, 1-byte name.
        t[15] = 9;
        assert_eq!(Container::from_bytes(&t), Err(FormatError::UnknownDtype(9)));
        let mut extra = b;
        extra.push(0);
        assert_eq!(Container::from_bytes(&extra), Err(FormatError::TrailingBytes(1)));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            vals32 in prop::collection::vec(any::<u32>(), 1..40),
            vals64 in prop::collection::vec(any::<u64>(), 1..40),
            name in "[a-z0-9_.]{0,24}",
        ) {
            let mut c = Container::new();
            let t32: Vec<f32> = vals32.iter().map(|&b| f32::from_bits(b)).collect();
            let t64: Vec<f64> = vals64.iter().map(|&b| f64::from_bits(b)).collect();
            c.push(name.clone(), Tensor::from_vec(t32.clone()));
            c.push(format!("{name}.2"), Tensor::from_vec(t64.clone()));
            let bytes = c.to_bytes().unwrap();
            let back = Container::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            match back.get(&name).unwrap() {
                StoredTensor::F32(t) => {
                    let bits: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
                    prop_assert_eq!(bits, vals32);
                }
                StoredTensor::F64(_) => prop_assert!(false, "dtype changed"),
            }
        }
    }
}
