//! `RTEN1` binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"RTEN1\0" | u32 rank | u32 dims[rank] | u8 dtype (0 = f32, 1 = f64) | data
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Precision, Real, Vector};

pub const MAGIC: &[u8; 6] = b"RTEN1\0";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// A decoded tensor of arbitrary rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn precision(&self) -> Precision {
        match self.data {
            TensorData::F32(_) => Precision::Single,
            TensorData::F64(_) => Precision::Double,
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_matrix<T: Real>(m: &Matrix<T>) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: to_data(m.data()),
        }
    }

    pub fn from_vector<T: Real>(v: &Vector<T>) -> Self {
        Self {
            dims: vec![v.len()],
            data: to_data(v.data()),
        }
    }

    /// Interprets a rank-2 tensor as a matrix of the stored precision.
    /// Fails if the precision does not match `T`.
    pub fn to_matrix<T: Real>(&self) -> Result<Matrix<T>> {
        if self.dims.len() != 2 {
            return Err(Error::Format(format!(
                "expected rank 2, got {}",
                self.dims.len()
            )));
        }
        Matrix::new(self.dims[0], self.dims[1], self.values::<T>()?)
    }

    pub fn to_vector<T: Real>(&self) -> Result<Vector<T>> {
        if self.dims.len() != 1 {
            return Err(Error::Format(format!(
                "expected rank 1, got {}",
                self.dims.len()
            )));
        }
        Vector::new(self.values::<T>()?)
    }

    /// Stacks equally shaped matrices into a rank-3 tensor.
    pub fn from_matrices<T: Real>(ms: &[Matrix<T>]) -> Result<Self> {
        let (rows, cols) = ms.first().map_or((0, 0), |m| m.shape());
        if ms.iter().any(|m| m.shape() != (rows, cols)) {
            return Err(Error::Shape("stacked matrices differ in shape".into()));
        }
        let flat: Vec<T> = ms.iter().flat_map(|m| m.data().iter().copied()).collect();
        Ok(Self {
            dims: vec![ms.len(), rows, cols],
            data: to_data(&flat),
        })
    }

    /// Splits a rank-3 tensor along its first axis.
    pub fn to_matrices<T: Real>(&self) -> Result<Vec<Matrix<T>>> {
        if self.dims.len() != 3 {
            return Err(Error::Format(format!(
                "expected rank 3, got {}",
                self.dims.len()
            )));
        }
        let (rows, cols) = (self.dims[1], self.dims[2]);
        let values = self.values::<T>()?;
        if rows * cols == 0 {
            return Ok(vec![Matrix::zeros(rows, cols); self.dims[0]]);
        }
        values
            .chunks_exact(rows * cols)
            .map(|c| Matrix::new(rows, cols, c.to_vec()))
            .collect()
    }

    fn values<T: Real>(&self) -> Result<Vec<T>> {
        if self.precision() != T::PRECISION {
            return Err(Error::Format(format!(
                "stored precision {:?} does not match requested {:?}",
                self.precision(),
                T::PRECISION
            )));
        }
        Ok(match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| T::c(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::c(x)).collect(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.dims.len() + 8 * self.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(self.precision().code());
        match &self.data {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(6)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let rank = cur.u32()? as usize;
        let dims = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let code = cur.take(1)?[0];
        let precision = Precision::from_code(code)
            .ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
        let data = match precision {
            Precision::Single => TensorData::F32(
                cur.take(4 * count)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Precision::Double => TensorData::F64(
                cur.take(8 * count)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn to_data<T: Real>(values: &[T]) -> TensorData {
    match T::PRECISION {
        Precision::Single => TensorData::F32(values.iter().map(|v| v.f64() as f32).collect()),
        Precision::Double => TensorData::F64(values.iter().map(|v| v.f64()).collect()),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format("truncated tensor file".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn write_matrix<T: Real>(path: impl AsRef<Path>, m: &Matrix<T>) -> Result<()> {
    Tensor::from_matrix(m).write(path)
}

pub fn read_matrix<T: Real>(path: impl AsRef<Path>) -> Result<Matrix<T>> {
    Tensor::read(path)?.to_matrix()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Mat;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let m = Mat::from_rows(&[&[1.0, 2.0, 3.0]]);
        let bytes = Tensor::from_matrix(&m).encode();
        assert_eq!(&bytes[..6], b"RTEN1\0");
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        assert_eq!(&bytes[10..14], &1u32.to_le_bytes());
        assert_eq!(&bytes[14..18], &3u32.to_le_bytes());
        assert_eq!(bytes[18], 1);
        assert_eq!(&bytes[19..27], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 19 + 24);
    }

    #[test]
    fn rejects_corruption() {
        let m = Mat::from_rows(&[&[1.0]]);
        let mut bytes = Tensor::from_matrix(&m).encode();
        assert!(Tensor::decode(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(Tensor::decode(&bytes).is_err());
    }

    #[test]
    fn precision_mismatch_is_an_error() {
        let m: Matrix<f32> = Mat::from_rows(&[&[1.0]]).cast();
        let t = Tensor::decode(&Tensor::from_matrix(&m).encode()).unwrap();
        assert!(t.to_matrix::<f64>().is_err());
        assert_eq!(t.to_matrix::<f32>().unwrap(), m);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            rows in 0usize..6,
            cols in 1usize..6,
            seed in any::<u64>(),
        ) {
            let mut s = seed;
            let m = Mat::from_fn(rows, cols, |_, _| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 * 200.0 - 100.0
            });
            let back: Mat = Tensor::decode(&Tensor::from_matrix(&m).encode()).unwrap().to_matrix().unwrap();
            prop_assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
