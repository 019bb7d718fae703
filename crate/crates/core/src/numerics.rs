//! Dense row-major matrices and the handful of reductions every other module
//! builds on.
//!
//! All reductions accumulate serially, left to right, per output element.
//! Parallelism (when the problem is large enough) only splits output rows,
//! so results are bit-identical regardless of the worker count.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Work threshold (multiply-adds) above which `matmul` splits rows across
/// the rayon pool.
const PAR_THRESHOLD: usize = 1 << 18;

/// Storage precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn code(self) -> u8 {
        match self {
            Precision::Single => 0,
            Precision::Double => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Precision::Single),
            1 => Some(Precision::Double),
            _ => None,
        }
    }
}

/// Floating-point element type used throughout the crate (`f32` or `f64`).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    const PRECISION: Precision;

    /// Lossy conversion from an `f64` constant.
    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to any Real")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {
    const PRECISION: Precision = Precision::Single;
}

impl Real for f64 {
    const PRECISION: Precision = Precision::Double;
}

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

pub type Mat = Matrix<f64>;

impl<T: Real> Debug for Matrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(6) {
            if r > 0 {
                write!(f, "; ")?;
            }
            let row = self.row(r);
            for (c, v) in row.iter().take(8).enumerate() {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{v:.4}")?;
            }
            if row.len() > 8 {
                write!(f, ", ..")?;
            }
        }
        if self.rows > 6 {
            write!(f, "; ..")?;
        }
        write!(f, "]")
    }
}

impl<T: Real> Matrix<T> {
    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return shape_err(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        if let Some((index, v)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                index,
                value: v.f64(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged or non-finite input;
    /// intended for literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let data = rows
            .iter()
            .flat_map(|row| {
                assert_eq!(row.len(), c, "ragged rows");
                row.iter().map(|&x| T::c(x))
            })
            .collect();
        Self::new(r, c, data).expect("valid literal matrix")
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Wraps data produced internally by a primitive. Finiteness is checked
    /// in debug builds only.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite entry");
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies rows `[start, start + len)`.
    pub fn row_block(&self, start: usize, len: usize) -> Self {
        let data = self.data[start * self.cols..(start + len) * self.cols].to_vec();
        Self::from_raw(len, self.cols, data)
    }

    /// Copies columns `[start, start + len)`.
    pub fn col_block(&self, start: usize, len: usize) -> Self {
        let mut data = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + len]);
        }
        Self::from_raw(self.rows, len, data)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_raw(self.rows, self.cols, data))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    /// Largest elementwise absolute difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::c(v.f64())).collect(),
        }
    }

    pub(crate) fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return shape_err(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        Ok(())
    }
}

/// Dense vector of reals.
#[derive(Clone, PartialEq)]
pub struct Vector<T = f64> {
    data: Vec<T>,
}

impl<T: Real> Debug for Vector<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.data.iter().take(12)).finish()
    }
}

impl<T: Real> Vector<T> {
    pub fn new(data: Vec<T>) -> Result<Self> {
        if let Some((index, v)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                index,
                value: v.f64(),
            });
        }
        Ok(Self { data })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![T::zero(); len],
        }
    }

    pub(crate) fn from_raw(data: Vec<T>) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, i: usize) -> T {
        self.data[i]
    }
}

/// Serial left-to-right dot product.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

/// `out[r] += a[r, :] · b` accumulated in inner-index order, for each output
/// row of `a`. `b` is `inner x cols` row-major and `out` is `rows x cols`.
#[inline]
pub(crate) fn gemm_rows_into<T: Real>(a: &[T], inner: usize, b: &[T], cols: usize, out: &mut [T]) {
    for (a_row, o_row) in a.chunks_exact(inner).zip(out.chunks_exact_mut(cols)) {
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b[k * cols..(k + 1) * cols];
            for (o, &bkj) in o_row.iter_mut().zip(b_row) {
                *o = *o + aik * bkj;
            }
        }
    }
}

/// Matrix product `a · b` (or `a · bᵀ` when `transpose_b`).
///
/// Every output element is accumulated over the inner index in increasing
/// order, starting from zero, so the result is bit-identical to a textbook
/// triple loop.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>, transpose_b: bool) -> Result<Matrix<T>> {
    let (inner_b, cols) = if transpose_b {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    if a.cols != inner_b {
        return shape_err(format!(
            "matmul inner dimensions {} and {} (transpose_b={transpose_b})",
            a.cols, inner_b
        ));
    }
    let bt;
    let b_rm = if transpose_b {
        bt = b.transpose();
        &bt
    } else {
        b
    };
    let inner = a.cols;
    let mut out = vec![T::zero(); a.rows * cols];
    if a.rows * inner * cols >= PAR_THRESHOLD && a.rows > 1 {
        let chunk_rows = (a.rows / rayon::current_num_threads().max(1)).max(1);
        out.par_chunks_mut(chunk_rows * cols)
            .zip(a.data.par_chunks(chunk_rows * inner))
            .for_each(|(o, a_chunk)| gemm_rows_into(a_chunk, inner, &b_rm.data, cols, o));
    } else if cols > 0 && inner > 0 {
        gemm_rows_into(&a.data, inner, &b_rm.data, cols, &mut out);
    }
    Ok(Matrix::from_raw(a.rows, cols, out))
}

/// In-place numerically stable softmax of one row.
#[inline]
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Row-wise softmax with max subtraction.
pub fn row_softmax<T: Real>(s: &Matrix<T>) -> Matrix<T> {
    let mut out = s.clone();
    if out.cols > 0 {
        for row in out.data.chunks_exact_mut(out.cols) {
            softmax_in_place(row);
        }
    }
    out
}

/// Mean over consecutive groups of `block` rows.
pub fn mean_pool<T: Real>(x: &Matrix<T>, block: usize) -> Result<Matrix<T>> {
    if block == 0 || !x.rows.is_multiple_of(block) {
        return shape_err(format!(
            "{} rows not divisible by pooling block {block}",
            x.rows
        ));
    }
    let groups = x.rows / block;
    let inv = T::one() / T::c(block as f64);
    let mut out = Matrix::zeros(groups, x.cols);
    for g in 0..groups {
        let acc = out.row_mut(g);
        for r in g * block..(g + 1) * block {
            for (a, &v) in acc.iter_mut().zip(&x.data[r * x.cols..(r + 1) * x.cols]) {
                *a = *a + v;
            }
        }
        for a in acc.iter_mut() {
            *a = *a * inv;
        }
    }
    Ok(out)
}

/// Per-row sums.
pub fn rowsum<T: Real>(x: &Matrix<T>) -> Vector<T> {
    Vector::from_raw(
        (0..x.rows)
            .map(|r| x.row(r).iter().fold(T::zero(), |a, &v| a + v))
            .collect(),
    )
}

/// Per-column mean over rows.
pub fn colmean<T: Real>(x: &Matrix<T>) -> Vector<T> {
    let mut acc = vec![T::zero(); x.cols];
    for r in 0..x.rows {
        for (a, &v) in acc.iter_mut().zip(x.row(r)) {
            *a = *a + v;
        }
    }
    let n = T::c(x.rows.max(1) as f64);
    Vector::from_raw(acc.into_iter().map(|a| a / n).collect())
}

/// Logistic sigmoid.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_is_neutral() {
        let a = Mat::from_rows(&[&[1.5, -2.0], &[0.25, 4.0]]);
        assert_eq!(matmul(&Mat::identity(2), &a, false).unwrap(), a);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Mat::from_rows(&[&[5.0], &[6.0]]);
        let c = matmul(&a, &b, false).unwrap();
        assert_eq!(c, Mat::from_rows(&[&[17.0], &[39.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let a = random(7, 5, 1);
        let b = random(5, 3, 2);
        let mut oracle = Mat::zeros(7, 3);
        for i in 0..7 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a.get(i, k) * b.get(k, j);
                }
                oracle.set(i, j, s);
            }
        }
        assert_eq!(matmul(&a, &b, false).unwrap().max_abs_diff(&oracle), 0.0);
        assert_eq!(
            matmul(&a, &b.transpose(), true)
                .unwrap()
                .max_abs_diff(&oracle),
            0.0
        );
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = random(3, 4, 1);
        assert!(matches!(matmul(&a, &a, false), Err(Error::Shape(_))));
    }

    #[test]
    fn large_matmul_is_thread_count_independent() {
        let a = random(96, 64, 3);
        let b = random(64, 80, 4);
        let serial = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| matmul(&a, &b, false).unwrap());
        let wide = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap()
            .install(|| matmul(&a, &b, false).unwrap());
        assert_eq!(serial.data(), wide.data());
    }

    #[test]
    fn softmax_zero_row_is_uniform() {
        let s = row_softmax(&Mat::zeros(1, 4));
        assert_eq!(s.row(0), &[0.25; 4]);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let s = row_softmax(&Mat::from_rows(&[&[1000.0, 1000.0]]));
        assert_eq!(s.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let x = random(6, 6, 9);
        let s = row_softmax(&x);
        for r in 0..6 {
            let denom: f64 = x.row(r).iter().map(|v| v.exp()).sum();
            for c in 0..6 {
                assert!((s.get(r, c) - x.get(r, c).exp() / denom).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn softmax_single_precision_rows_normalized() {
        let x: Matrix<f32> = random(5, 33, 4).scale(30.0).cast();
        for v in rowsum(&row_softmax(&x)).data() {
            assert!((v - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn mean_pool_cases() {
        let x = random(5, 3, 1);
        assert_eq!(mean_pool(&x, 1).unwrap(), x);
        let y = Mat::from_rows(&[&[1.0, 1.0], &[3.0, 3.0]]);
        assert_eq!(mean_pool(&y, 2).unwrap(), Mat::from_rows(&[&[2.0, 2.0]]));
        assert!(matches!(mean_pool(&x, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn mean_pool_matches_group_sum() {
        let x = random(16, 4, 5);
        let p = mean_pool(&x, 4).unwrap();
        for g in 0..4 {
            for c in 0..4 {
                let mut s = 0.0;
                for r in 4 * g..4 * g + 4 {
                    s += x.get(r, c);
                }
                assert_eq!(p.get(g, c), s * 0.25);
            }
        }
    }

    #[test]
    fn rowsum_and_colmean() {
        let p = row_softmax(&random(4, 5, 2));
        for v in rowsum(&p).data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let x = Mat::from_rows(&[&[2.0, 4.0], &[4.0, 8.0]]);
        assert_eq!(colmean(&x).data(), &[3.0, 6.0]);

        let y = random(9, 7, 3);
        let rs = rowsum(&y);
        for r in 0..9 {
            let mut s = 0.0;
            for c in 0..7 {
                s += y.get(r, c);
            }
            assert!((rs.get(r) - s).abs() <= 1e-12);
        }
    }

    #[test]
    fn construction_rejects_nan_and_bad_length() {
        assert!(matches!(
            Mat::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(matches!(Mat::new(2, 2, vec![1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn pooling_then_expansion_preserves_block_means() {
        let x = random(12, 3, 8);
        let p = mean_pool(&x, 3).unwrap();
        let expanded = Mat::from_fn(12, 3, |r, c| p.get(r / 3, c));
        assert!(mean_pool(&expanded, 3).unwrap().max_abs_diff(&p) <= 1e-15);
    }
}
