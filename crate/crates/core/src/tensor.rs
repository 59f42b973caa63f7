//! Dense `f32` tensors and the `RTN1` container format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RTN1" | u8 dtype (0 = f32) | u8 ndim | u16 reserved (0) | ndim x u64 extents | payload
//! ```
//!
//! The payload is the row-major `f32` data, little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"RTN1";
const HEADER_FIXED: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            _ => None,
        }
    }
}

/// Row-major dense tensor. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::contract(format!(
                "tensor shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            dtype: DType::F32,
            shape,
            data,
        })
    }

    /// Builds a tensor from `f64` values, rounding each to `f32`.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            dtype: DType::F32,
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Serializes to the `RTN1` byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_FIXED + 8 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(self.dtype.code());
        out.push(self.shape.len() as u8);
        out.extend_from_slice(&0u16.to_le_bytes());
        for &extent in &self.shape {
            out.extend_from_slice(&(extent as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses `RTN1` bytes. `origin` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path, allow_nonfinite: bool) -> Result<Self> {
        if bytes.len() < HEADER_FIXED || &bytes[..4] != TENSOR_MAGIC {
            return Err(Error::format(origin, "not a tensor file"));
        }
        let dtype = DType::from_code(bytes[4])
            .ok_or_else(|| Error::format(origin, format!("unsupported dtype code {}", bytes[4])))?;
        let ndim = bytes[5] as usize;
        let header_len = HEADER_FIXED + 8 * ndim;
        if bytes.len() < header_len {
            return Err(Error::format(origin, "length mismatch: truncated header"));
        }
        let shape: Vec<usize> = bytes[HEADER_FIXED..header_len]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::format(origin, "length mismatch: extents overflow"))?;
        let payload = &bytes[header_len..];
        if Some(payload.len()) != count.checked_mul(4) {
            return Err(Error::format(
                origin,
                format!(
                    "length mismatch: header declares {count} elements, payload holds {} bytes",
                    payload.len()
                ),
            ));
        }
        let mut data = Vec::with_capacity(count);
        for (i, c) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if !allow_nonfinite && !v.is_finite() {
                return Err(Error::format(origin, format!("non-finite value at index {i}")));
            }
            data.push(v);
        }
        Ok(Tensor { dtype, shape, data })
    }
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&t.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    load_tensor_with(path, false)
}

pub fn load_tensor_with(path: impl AsRef<Path>, allow_nonfinite: bool) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes, path, allow_nonfinite)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_file_is_forty_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.rtn");
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        save_tensor(&t, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 40);
        assert_eq!(&bytes[..4], b"RTN1");
        assert_eq!(bytes[4], 0);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..8], &[0, 0]);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(bytes[36..40].try_into().unwrap()), 4.0);
        assert_eq!(load_tensor(&p).unwrap(), t);
    }

    #[test]
    fn scalar_shape() {
        let t = Tensor::new(vec![], vec![7.5]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(bytes.len(), 12);
        assert_eq!(Tensor::from_bytes(&bytes, Path::new("x"), false).unwrap(), t);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = Tensor::new(vec![1], vec![1.0]).unwrap().to_bytes();
        bytes[..4].copy_from_slice(b"XXXX");
        let err = Tensor::from_bytes(&bytes, Path::new("x"), false).unwrap_err();
        assert!(err.to_string().contains("not a tensor file"), "{err}");
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = Tensor::new(vec![10], vec![0.5; 10]).unwrap().to_bytes();
        bytes.truncate(bytes.len() - 8);
        let err = Tensor::from_bytes(&bytes, Path::new("x"), false).unwrap_err();
        assert!(err.to_string().contains("length mismatch"), "{err}");
    }

    #[test]
    fn nonfinite_rejected_unless_allowed() {
        let bytes = Tensor::new(vec![3], vec![1.0, f32::NAN, 2.0]).unwrap().to_bytes();
        let err = Tensor::from_bytes(&bytes, Path::new("x"), false).unwrap_err();
        assert!(err.to_string().contains("non-finite value at index 1"), "{err}");
        let t = Tensor::from_bytes(&bytes, Path::new("x"), true).unwrap();
        assert!(t.data()[1].is_nan());
    }

    #[test]
    fn shape_payload_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shape in prop::collection::vec(0usize..5, 0..4),
            seed in any::<u32>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits((seed as u64 * 2654435761 + i as u64 * 40503) as u32 & 0x3fff_ffff))
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = Tensor::from_bytes(&t.to_bytes(), Path::new("x"), false).unwrap();
            prop_assert_eq!(back.to_bytes(), t.to_bytes());
            prop_assert_eq!(back, t);
        }
    }
}
