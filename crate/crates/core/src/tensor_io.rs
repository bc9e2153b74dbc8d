//! Binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size        field
//! 0       4           magic "VANC"
//! 4       2           version (u16, currently 1)
//! 6       1           dtype code (0 = f32, 1 = f64)
//! 7       1           rank (1 or 2)
//! 8       8 * rank    dims (u64 each)
//! ...     n * width   payload, row-major
//! ```
//!
//! Matrices are stored row-major on disk and converted to nalgebra's
//! column-major storage on read.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"VANC";
pub const VERSION: u16 = 1;

/// Scalar width of a tensor payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// A rank-1 or rank-2 tensor held in memory as `f64`.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Vector(DVector<f64>),
    Matrix(DMatrix<f64>),
}

impl Tensor {
    pub fn rank(&self) -> u8 {
        match self {
            Tensor::Vector(_) => 1,
            Tensor::Matrix(_) => 2,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match self {
            Tensor::Vector(v) => vec![v.len()],
            Tensor::Matrix(m) => vec![m.nrows(), m.ncols()],
        }
    }

    /// Scalars in on-disk (row-major) order.
    fn row_major(&self) -> Vec<f64> {
        match self {
            Tensor::Vector(v) => v.iter().copied().collect(),
            Tensor::Matrix(m) => m.transpose().iter().copied().collect(),
        }
    }

    pub fn into_matrix(self) -> Result<DMatrix<f64>> {
        match self {
            Tensor::Matrix(m) => Ok(m),
            Tensor::Vector(v) => Err(Error::Shape(format!(
                "expected a rank-2 tensor, found a vector of length {}",
                v.len()
            ))),
        }
    }

    /// Vectors pass through; single-row or single-column matrices are flattened.
    pub fn into_vector(self) -> Result<DVector<f64>> {
        match self {
            Tensor::Vector(v) => Ok(v),
            Tensor::Matrix(m) if m.nrows() == 1 || m.ncols() == 1 => {
                Ok(DVector::from_iterator(m.len(), m.iter().copied()))
            }
            Tensor::Matrix(m) => Err(Error::Shape(format!(
                "expected a rank-1 tensor, found a {}x{} matrix",
                m.nrows(),
                m.ncols()
            ))),
        }
    }
}

impl From<DVector<f64>> for Tensor {
    fn from(v: DVector<f64>) -> Self {
        Tensor::Vector(v)
    }
}

impl From<DMatrix<f64>> for Tensor {
    fn from(m: DMatrix<f64>) -> Self {
        Tensor::Matrix(m)
    }
}

/// Serializes a tensor into the binary layout described in the module docs.
pub fn encode_tensor(data: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    let values = data.row_major();
    if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(idx));
    }
    let dims = data.dims();
    let mut out = Vec::with_capacity(8 + 8 * dims.len() + values.len() * dtype.width());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(data.rank());
    for d in &dims {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    match dtype {
        DType::F64 => values
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => {
            for (idx, v) in values.iter().enumerate() {
                let narrow = *v as f32;
                if !narrow.is_finite() {
                    return Err(Error::NonFinite(idx));
                }
                out.extend_from_slice(&narrow.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, expected_total: usize) -> Result<&'a [u8]> {
    let end = *at + n;
    if end > bytes.len() {
        return Err(Error::Truncated {
            expected: expected_total,
            found: bytes.len(),
        });
    }
    let slice = &bytes[*at..end];
    *at = end;
    Ok(slice)
}

/// Parses a tensor from bytes, validating the header and payload length.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut at = 0;
    let header = take(bytes, &mut at, 8, 8)?;
    let magic: [u8; 4] = header[0..4].try_into().expect("4-byte slice");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = DType::from_code(header[6])?;
    let rank = header[7];
    if !(1..=2).contains(&rank) {
        return Err(Error::UnsupportedRank(rank));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let raw = take(bytes, &mut at, 8, 8 + 8 * rank as usize)?;
        let d = u64::from_le_bytes(raw.try_into().expect("8-byte slice"));
        let d = usize::try_from(d)
            .map_err(|_| Error::Shape(format!("dimension {d} does not fit in memory")))?;
        dims.push(d);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Shape(format!("dims {dims:?} overflow")))?;
    let payload_bytes = count
        .checked_mul(dtype.width())
        .ok_or_else(|| Error::Shape(format!("dims {dims:?} overflow")))?;
    let payload = &bytes[at..];
    if payload.len() < payload_bytes {
        return Err(Error::Truncated {
            expected: payload_bytes,
            found: payload.len(),
        });
    }
    if payload.len() > payload_bytes {
        return Err(Error::Shape(format!(
            "{} trailing bytes after payload",
            payload.len() - payload_bytes
        )));
    }
    let values: Vec<f64> = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect(),
    };
    if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(idx));
    }
    Ok(match rank {
        1 => Tensor::Vector(DVector::from_vec(values)),
        _ => Tensor::Matrix(DMatrix::from_row_slice(dims[0], dims[1], &values)),
    })
}

pub fn write_tensor(path: impl AsRef<Path>, data: &Tensor, dtype: DType) -> Result<()> {
    let bytes = encode_tensor(data, dtype)?;
    let path = path.as_ref();
    fs::write(path, bytes).map_err(Error::file(path))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(Error::file(path))?;
    decode_tensor(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    #[test]
    fn matrix_round_trip_f64() {
        let m = dmatrix![1.0, 2.0; 3.0, 4.0];
        let bytes = encode_tensor(&m.clone().into(), DType::F64).unwrap();
        // row-major payload: 1, 2, 3, 4
        assert_eq!(&bytes[24..32], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[32..40], &2.0f64.to_le_bytes());
        assert_eq!(decode_tensor(&bytes).unwrap(), Tensor::Matrix(m));
    }

    #[test]
    fn empty_matrix_keeps_dims() {
        let m = DMatrix::<f64>::zeros(0, 5);
        let bytes = encode_tensor(&m.clone().into(), DType::F64).unwrap();
        assert_eq!(bytes.len(), 8 + 16);
        let back = decode_tensor(&bytes).unwrap();
        assert_eq!(back.dims(), vec![0, 5]);
        assert_eq!(back, Tensor::Matrix(m));
    }

    #[test]
    fn vector_is_rank_one() {
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let bytes = encode_tensor(&v.clone().into(), DType::F64).unwrap();
        assert_eq!(bytes[7], 1);
        assert_eq!(&bytes[8..16], &3u64.to_le_bytes());
        assert_eq!(decode_tensor(&bytes).unwrap(), Tensor::Vector(v));
    }

    #[test]
    fn f32_header_and_rounding() {
        let v = DVector::from_vec(vec![0.1, 1.0]);
        let bytes = encode_tensor(&v.into(), DType::F32).unwrap();
        assert_eq!(bytes[6], 0);
        assert_eq!(bytes.len(), 16 + 8);
        let back = decode_tensor(&bytes).unwrap().into_vector().unwrap();
        assert_eq!(back[0], 0.1f32 as f64);
        assert_eq!(back[1], 1.0);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode_tensor(&DVector::from_vec(vec![1.0]).into(), DType::F64).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_tensor(&bytes), Err(Error::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn rejects_truncated_payload() {
        let bytes = encode_tensor(&dmatrix![1.0, 2.0; 3.0, 4.0].into(), DType::F64).unwrap();
        let err = decode_tensor(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Truncated { expected: 32, found: 29 }));
        assert!(matches!(decode_tensor(&bytes[..10]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn rejects_unsupported_header_fields() {
        let good = encode_tensor(&DVector::from_vec(vec![1.0]).into(), DType::F64).unwrap();
        let mut bad = good.clone();
        bad[6] = 7;
        assert!(matches!(decode_tensor(&bad), Err(Error::UnsupportedDtype(7))));
        let mut bad = good.clone();
        bad[7] = 3;
        assert!(matches!(decode_tensor(&bad), Err(Error::UnsupportedRank(3))));
        let mut bad = good;
        bad[4] = 9;
        assert!(matches!(decode_tensor(&bad), Err(Error::UnsupportedVersion(9))));
    }

    #[test]
    fn rejects_non_finite_on_write() {
        let v = DVector::from_vec(vec![1.0, f64::NAN]);
        assert!(matches!(encode_tensor(&v.into(), DType::F64), Err(Error::NonFinite(1))));
        let v = DVector::from_vec(vec![1e300]);
        assert!(matches!(encode_tensor(&v.into(), DType::F32), Err(Error::NonFinite(0))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vanc");
        let m = dmatrix![1.5, -2.0, 3.25; 0.0, 1e-300, 7.0];
        write_tensor(&path, &m.clone().into(), DType::F64).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), Tensor::Matrix(m));
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_bit_exact(
            rows in 0usize..6,
            cols in 0usize..6,
            seed in proptest::collection::vec(-1e12f64..1e12, 36),
        ) {
            let m = DMatrix::from_fn(rows, cols, |i, j| seed[i * 6 + j]);
            let bytes = encode_tensor(&m.clone().into(), DType::F64).unwrap();
            let back = decode_tensor(&bytes).unwrap().into_matrix().unwrap();
            prop_assert_eq!(back.shape(), m.shape());
            for (a, b) in back.iter().zip(m.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
