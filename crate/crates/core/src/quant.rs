//! Symmetric INT8 fake quantization with one absmax scale per block, plus the
//! key smoothing applied before quantizing K.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{colmean, Matrix, Real, Vector};

const QMAX: i32 = 127;
/// Scale assigned to all-zero blocks.
pub const ZERO_BLOCK_SCALE: f64 = f64::EPSILON;

/// Which products of the sparse branch run through quantized operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    #[serde(default = "default_bits")]
    pub bits: u8,
    #[serde(default = "yes")]
    pub qk_product: bool,
    #[serde(default = "yes")]
    pub pv_product: bool,
}

fn default_bits() -> u8 {
    8
}

fn yes() -> bool {
    true
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self::int8()
    }
}

impl QuantConfig {
    pub fn int8() -> Self {
        Self {
            bits: 8,
            qk_product: true,
            pv_product: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits != 8 {
            return Err(Error::Config(format!(
                "only 8-bit quantization is supported, got {}",
                self.bits
            )));
        }
        Ok(())
    }
}

/// Integer codes in [-127, 127] and the scale that maps them back.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<i8>,
    pub scale: f64,
}

/// Symmetric absmax quantization, rounding to nearest with ties away from zero.
pub fn quantize<T: Real>(x: &Matrix<T>) -> QuantizedBlock {
    let absmax = x.data().iter().fold(0.0f64, |m, v| m.max(v.f64().abs()));
    if absmax == 0.0 {
        return QuantizedBlock {
            rows: x.rows(),
            cols: x.cols(),
            values: vec![0; x.data().len()],
            scale: ZERO_BLOCK_SCALE,
        };
    }
    let scale = absmax / QMAX as f64;
    let values = x
        .data()
        .iter()
        .map(|v| (v.f64() / scale).round().clamp(-(QMAX as f64), QMAX as f64) as i8)
        .collect();
    QuantizedBlock {
        rows: x.rows(),
        cols: x.cols(),
        values,
        scale,
    }
}

pub fn dequantize<T: Real>(qb: &QuantizedBlock) -> Matrix<T> {
    Matrix::from_raw(
        qb.rows,
        qb.cols,
        qb.values
            .iter()
            .map(|&q| T::c(q as f64 * qb.scale))
            .collect(),
    )
}

/// Integer-domain product of two quantized blocks, accumulated in `i64` and
/// rescaled by `s_a · s_b`.
pub fn quantized_product<T: Real>(
    a: &QuantizedBlock,
    b: &QuantizedBlock,
    transpose_b: bool,
) -> Result<Matrix<T>> {
    let (inner_b, cols) = if transpose_b {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    if a.cols != inner_b {
        return shape_err(format!(
            "quantized product inner dimensions {} and {inner_b}",
            a.cols
        ));
    }
    let s = a.scale * b.scale;
    let mut out = Vec::with_capacity(a.rows * cols);
    let mut acc = vec![0i64; cols];
    for r in 0..a.rows {
        let a_row = &a.values[r * a.cols..(r + 1) * a.cols];
        acc.iter_mut().for_each(|v| *v = 0);
        if transpose_b {
            for (c, slot) in acc.iter_mut().enumerate() {
                let b_row = &b.values[c * b.cols..(c + 1) * b.cols];
                *slot = a_row
                    .iter()
                    .zip(b_row)
                    .map(|(&x, &y)| x as i64 * y as i64)
                    .sum();
            }
        } else {
            for (k, &x) in a_row.iter().enumerate() {
                let b_row = &b.values[k * b.cols..(k + 1) * b.cols];
                for (slot, &y) in acc.iter_mut().zip(b_row) {
                    *slot += x as i64 * y as i64;
                }
            }
        }
        out.extend(acc.iter().map(|&v| T::c(v as f64 * s)));
    }
    Ok(Matrix::from_raw(a.rows, cols, out))
}

/// Subtracts the per-column mean over tokens. Returns the smoothed keys and
/// the removed mean.
pub fn smooth_k<T: Real>(k: &Matrix<T>) -> (Matrix<T>, Vector<T>) {
    let mean = colmean(k);
    let mut out = k.clone();
    for r in 0..out.rows() {
        for (v, &m) in out.row_mut(r).iter_mut().zip(mean.data()) {
            *v = *v - m;
        }
    }
    (out, mean)
}

/// Chain rule of [`smooth_k`]: `G − colmean(G)` per column.
pub fn smooth_k_backward(grad: &Matrix<f64>) -> Matrix<f64> {
    smooth_k(grad).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{matmul, row_softmax, Mat};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn direct_formula_example() {
        let x = Mat::from_rows(&[&[1.0, -0.5, 0.25, 0.0]]);
        let q = quantize(&x);
        assert_eq!(q.scale, 1.0 / 127.0);
        assert_eq!(q.values, vec![127, -64, 32, 0]);
        let back: Mat = dequantize(&q);
        assert!(back.max_abs_diff(&x) <= 1.0 / 254.0);
    }

    #[test]
    fn zero_block() {
        let q = quantize(&Mat::zeros(2, 3));
        assert!(q.values.iter().all(|&v| v == 0));
        assert_eq!(q.scale, ZERO_BLOCK_SCALE);
        assert_eq!(dequantize::<f64>(&q).max_abs(), 0.0);
    }

    #[test]
    fn integer_codes_are_scale_invariant() {
        let x = random(4, 4, 3);
        assert_eq!(quantize(&x).values, quantize(&x.scale(10.0)).values);
    }

    #[test]
    fn identity_product_reproduces_operand() {
        let x = random(8, 8, 1);
        let qx = quantize(&x);
        let qi = quantize(&Mat::identity(8));
        let p: Mat = quantized_product(&qx, &qi, false).unwrap();
        assert!(p.max_abs_diff(&x) <= qx.scale / 2.0 + 1e-15);
    }

    #[test]
    fn product_error_within_propagated_bound() {
        let a = random(16, 16, 4);
        let b = random(16, 16, 5).scale(3.0);
        let (qa, qb) = (quantize(&a), quantize(&b));
        let exact = matmul(&a, &b, true).unwrap();
        let approx: Mat = quantized_product(&qa, &qb, true).unwrap();
        let d = 16.0;
        let bound = d
            * (qa.scale * b.max_abs() / 2.0
                + qb.scale * a.max_abs() / 2.0
                + qa.scale * qb.scale / 4.0);
        assert!(exact.max_abs_diff(&approx) <= bound);
    }

    #[test]
    fn probability_block_error() {
        let p = row_softmax(&random(8, 8, 6).scale(4.0));
        let q = quantize(&p);
        assert!(q.scale <= 1.0 / 127.0);
        assert!(dequantize::<f64>(&q).max_abs_diff(&p) <= 1.0 / 254.0);
    }

    #[test]
    fn product_rejects_mismatch() {
        let a = quantize(&random(2, 3, 1));
        assert!(quantized_product::<f64>(&a, &a, false).is_err());
    }

    #[test]
    fn smoothing_cases() {
        let zero_mean = Mat::from_rows(&[&[1.0, -2.0], &[-1.0, 2.0]]);
        assert_eq!(smooth_k(&zero_mean).0, zero_mean);
        let constant = Mat::filled(3, 2, 1.5);
        assert_eq!(smooth_k(&constant).0.max_abs(), 0.0);
    }

    #[test]
    fn smoothing_leaves_softmax_unchanged() {
        let q = random(6, 4, 1);
        let k = random(6, 4, 2).map(|v| v + 2.0);
        let a = row_softmax(&matmul(&q, &k, true).unwrap());
        let b = row_softmax(&matmul(&q, &smooth_k(&k).0, true).unwrap());
        assert!(a.max_abs_diff(&b) <= 1e-10);
    }

    proptest! {
        #[test]
        fn round_trip_within_half_scale(seed in any::<u64>(), mag in 1e-6f64..1e6, rows in 1usize..8, cols in 1usize..8) {
            let x = random(rows, cols, seed).scale(mag);
            let q = quantize(&x);
            let back: Mat = dequantize(&q);
            for (a, b) in x.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= q.scale / 2.0 * (1.0 + 1e-12));
            }
        }
    }
}
