//! Products of independently quantized matrices.
//!
//! With shifted codes `a'' = a' + z_a = round(Q_a·a)` the product of two
//! quantized matrices is recovered as
//!
//! ```text
//! C[i][j] = Σ_k a''[i][k] · b''[k][j] / (Q_a · Q_b)
//! ```
//!
//! The sum is an exact integer. [`qgemm`] evaluates it directly;
//! [`qgemm_expanded`] expands the offsets so that the inner loop only
//! multiplies 8-bit codes:
//!
//! ```text
//! Σ a''b'' = Σ a'b' + z_b·Σ_k a'[i][k] + z_a·Σ_k b'[k][j] + K·z_a·z_b
//! ```
//!
//! Both routes produce the same integer and therefore bit-identical results.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::FloatMatrix;
use crate::quant::{recover_matrix, QuantizedMatrix};

/// Worst-case magnitude of an integer accumulator for one output element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccumulatorBound {
    pub k_dim: usize,
    /// `max |code + z_a|` over valid codes of the left operand.
    pub max_abs_a: i64,
    pub max_abs_b: i64,
    /// `k_dim · max_abs_a · max_abs_b`.
    pub worst_case: i128,
}

impl AccumulatorBound {
    /// Whether every partial sum fits a signed 32-bit accumulator.
    pub fn is_valid(&self) -> bool {
        self.worst_case <= i32::MAX as i128
    }

    pub fn fits_i64(&self) -> bool {
        self.worst_case <= i64::MAX as i128
    }
}

/// Accumulator width for the integer product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Accumulator {
    /// 32-bit accumulation; refuses inputs whose worst case exceeds `i32::MAX`.
    #[default]
    Checked32,
    /// 64-bit accumulation for ranges far from zero.
    Wide64,
}

pub fn check_accumulator_bounds(a: &QuantizedMatrix, b: &QuantizedMatrix) -> AccumulatorBound {
    let max_abs_a = a.params().max_abs_shifted();
    let max_abs_b = b.params().max_abs_shifted();
    let k_dim = a.cols();
    AccumulatorBound {
        k_dim,
        max_abs_a,
        max_abs_b,
        worst_case: k_dim as i128 * max_abs_a as i128 * max_abs_b as i128,
    }
}

/// Reference float product.
pub fn gemm_float(a: &FloatMatrix, b: &FloatMatrix) -> Result<FloatMatrix> {
    if a.cols() != b.rows() {
        return Err(Error::dims("gemm_float", a.shape(), b.shape()));
    }
    let (m, k_dim, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let acc = &mut out[i * n..(i + 1) * n];
        for k in 0..k_dim {
            let aik = a.get(i, k);
            for (o, &bkj) in acc.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(FloatMatrix::from_raw(m, n, out))
}

pub fn qgemm(a: &QuantizedMatrix, b: &QuantizedMatrix) -> Result<FloatMatrix> {
    qgemm_with(a, b, Accumulator::Checked32)
}

pub fn qgemm_expanded(a: &QuantizedMatrix, b: &QuantizedMatrix) -> Result<FloatMatrix> {
    qgemm_expanded_with(a, b, Accumulator::Checked32)
}

enum Route {
    Degenerate(FloatMatrix),
    Integer,
}

fn prepare(a: &QuantizedMatrix, b: &QuantizedMatrix, acc: Accumulator) -> Result<Route> {
    if a.cols() != b.rows() {
        return Err(Error::dims("qgemm", a.shape(), b.shape()));
    }
    if a.params().is_degenerate() || b.params().is_degenerate() {
        // Constant operands are exact after recovery and have no usable Q.
        return gemm_float(&recover_matrix(a), &recover_matrix(b)).map(Route::Degenerate);
    }
    let bound = check_accumulator_bounds(a, b);
    let limit = match acc {
        Accumulator::Checked32 => i32::MAX as i128,
        Accumulator::Wide64 => i64::MAX as i128,
    };
    if bound.worst_case > limit {
        return Err(Error::AccumulatorOverflow {
            worst_case: bound.worst_case,
            limit,
        });
    }
    Ok(Route::Integer)
}

#[inline]
fn recover_sums(a: &QuantizedMatrix, b: &QuantizedMatrix, sums: Vec<i64>) -> FloatMatrix {
    let denom = a.params().q_factor() * b.params().q_factor();
    let values = sums.into_iter().map(|s| s as f64 / denom).collect();
    FloatMatrix::from_raw(a.rows(), b.cols(), values)
}

/// Direct evaluation of `Σ (a' + z_a)(b' + z_b)`.
pub fn qgemm_with(
    a: &QuantizedMatrix,
    b: &QuantizedMatrix,
    acc: Accumulator,
) -> Result<FloatMatrix> {
    if let Route::Degenerate(c) = prepare(a, b, acc)? {
        return Ok(c);
    }
    let za = a.params().offset();
    let zb = b.params().offset();
    let (m, k_dim, n) = (a.rows(), a.cols(), b.cols());
    let sums = match acc {
        Accumulator::Checked32 => {
            // Bound check guarantees every shifted code and partial sum fits i32.
            let a_sh: Vec<i32> = a.codes().iter().map(|&c| (c as i64 + za) as i32).collect();
            let b_sh: Vec<i32> = b.codes().iter().map(|&c| (c as i64 + zb) as i32).collect();
            let mut sums = vec![0i64; m * n];
            let mut row = vec![0i32; n];
            for i in 0..m {
                row.fill(0);
                for k in 0..k_dim {
                    let aik = a_sh[i * k_dim + k];
                    for (r, &bkj) in row.iter_mut().zip(&b_sh[k * n..(k + 1) * n]) {
                        *r += aik * bkj;
                    }
                }
                for (s, &r) in sums[i * n..(i + 1) * n].iter_mut().zip(&row) {
                    *s = r as i64;
                }
            }
            sums
        }
        Accumulator::Wide64 => {
            let a_sh: Vec<i64> = a.codes().iter().map(|&c| c as i64 + za).collect();
            let b_sh: Vec<i64> = b.codes().iter().map(|&c| c as i64 + zb).collect();
            let mut sums = vec![0i64; m * n];
            for i in 0..m {
                let row = &mut sums[i * n..(i + 1) * n];
                for k in 0..k_dim {
                    let aik = a_sh[i * k_dim + k];
                    for (r, &bkj) in row.iter_mut().zip(&b_sh[k * n..(k + 1) * n]) {
                        *r += aik * bkj;
                    }
                }
            }
            sums
        }
    };
    Ok(recover_sums(a, b, sums))
}

/// Offset-expanded evaluation; the inner loop multiplies raw 8-bit codes.
///
/// Terms are combined with wrapping arithmetic. Individual terms may leave
/// the accumulator range but the final sum is bounded by
/// [`AccumulatorBound::worst_case`], so the wrapped result is exact.
pub fn qgemm_expanded_with(
    a: &QuantizedMatrix,
    b: &QuantizedMatrix,
    acc: Accumulator,
) -> Result<FloatMatrix> {
    if let Route::Degenerate(c) = prepare(a, b, acc)? {
        return Ok(c);
    }
    let sums = match acc {
        Accumulator::Checked32 => expanded_sums_i32(a, b),
        Accumulator::Wide64 => expanded_sums_i64(a, b),
    };
    Ok(recover_sums(a, b, sums))
}

fn expanded_sums_i32(a: &QuantizedMatrix, b: &QuantizedMatrix) -> Vec<i64> {
    let (m, k_dim, n) = (a.rows(), a.cols(), b.cols());
    let za = a.params().offset() as i32;
    let zb = b.params().offset() as i32;
    let ac = a.codes();
    let bc = b.codes();

    let mut col_sums = vec![0i32; n];
    for k in 0..k_dim {
        for (s, &c) in col_sums.iter_mut().zip(&bc[k * n..(k + 1) * n]) {
            *s = s.wrapping_add(c as i32);
        }
    }
    let k_term = (k_dim as i32).wrapping_mul(za).wrapping_mul(zb);

    let mut sums = vec![0i64; m * n];
    let mut row = vec![0i32; n];
    for i in 0..m {
        let a_row = &ac[i * k_dim..(i + 1) * k_dim];
        let row_sum = a_row.iter().fold(0i32, |s, &c| s.wrapping_add(c as i32));
        if n == 1 {
            let dot = a_row.iter().zip(bc).fold(0i32, |s, (&x, &y)| {
                s.wrapping_add((x as u16 * y as u16) as i32)
            });
            row[0] = dot;
        } else {
            row.fill(0);
            for (k, &aik) in a_row.iter().enumerate() {
                let aik = aik as u16;
                for (r, &bkj) in row.iter_mut().zip(&bc[k * n..(k + 1) * n]) {
                    *r = r.wrapping_add((aik * bkj as u16) as i32);
                }
            }
        }
        let row_term = zb.wrapping_mul(row_sum);
        for ((s, &r), &cs) in sums[i * n..(i + 1) * n].iter_mut().zip(&row).zip(&col_sums) {
            *s = r
                .wrapping_add(row_term)
                .wrapping_add(za.wrapping_mul(cs))
                .wrapping_add(k_term) as i64;
        }
    }
    sums
}

fn expanded_sums_i64(a: &QuantizedMatrix, b: &QuantizedMatrix) -> Vec<i64> {
    let (m, k_dim, n) = (a.rows(), a.cols(), b.cols());
    let za = a.params().offset();
    let zb = b.params().offset();
    let ac = a.codes();
    let bc = b.codes();

    let mut col_sums = vec![0i64; n];
    for k in 0..k_dim {
        for (s, &c) in col_sums.iter_mut().zip(&bc[k * n..(k + 1) * n]) {
            *s += c as i64;
        }
    }
    let k_term = (k_dim as i64).wrapping_mul(za).wrapping_mul(zb);

    let mut sums = vec![0i64; m * n];
    for i in 0..m {
        let a_row = &ac[i * k_dim..(i + 1) * k_dim];
        let row_sum: i64 = a_row.iter().map(|&c| c as i64).sum();
        let row = &mut sums[i * n..(i + 1) * n];
        for (k, &aik) in a_row.iter().enumerate() {
            let aik = aik as i64;
            for (r, &bkj) in row.iter_mut().zip(&bc[k * n..(k + 1) * n]) {
                *r += aik * bkj as i64;
            }
        }
        let row_term = zb.wrapping_mul(row_sum);
        for (r, &cs) in row.iter_mut().zip(&col_sums) {
            *r = r
                .wrapping_add(row_term)
                .wrapping_add(za.wrapping_mul(cs))
                .wrapping_add(k_term);
        }
    }
    sums
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{quantize_matrix, quantize_matrix_with, QuantParams};
    use proptest::prelude::*;

    fn unit_params() -> QuantParams {
        QuantParams::from_range(-1.0, 1.0, 255).unwrap()
    }

    #[test]
    fn gemm_float_examples() {
        let m = FloatMatrix::from_rows(&[[1.5, -2.0, 0.25], [3.0, 4.0, -1.0]]).unwrap();
        assert_eq!(gemm_float(&FloatMatrix::identity(2), &m).unwrap(), m);
        let z = gemm_float(&FloatMatrix::zeros(3, 2), &m).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
        let a = FloatMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = FloatMatrix::from_rows(&[[5.0], [6.0]]).unwrap();
        assert_eq!(gemm_float(&a, &b).unwrap().as_slice(), &[17.0, 39.0]);
        assert!(matches!(
            gemm_float(&b, &b),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn accumulator_bound_examples() {
        let p = unit_params();
        assert_eq!(p.offset(), -127);
        let a = quantize_matrix_with(&FloatMatrix::zeros(1, 300), p).unwrap();
        let b = quantize_matrix_with(&FloatMatrix::zeros(300, 1), p).unwrap();
        let bound = check_accumulator_bounds(&a, &b);
        assert_eq!(bound.max_abs_a, 128);
        assert_eq!(bound.worst_case, 4_915_200);
        assert!(bound.is_valid());

        let unit = QuantParams::from_range(0.0, 1.0, 255).unwrap();
        let a = quantize_matrix_with(&FloatMatrix::zeros(1, 1), unit).unwrap();
        let bound = check_accumulator_bounds(&a, &a);
        assert!(bound.worst_case <= 65_025 && bound.is_valid());

        // Range [10, 11): Q = 255, z = 2550.
        let far = QuantParams::from_range(10.0, 11.0, 255).unwrap();
        assert_eq!(far.offset(), 2550);
        let a = quantize_matrix_with(
            &FloatMatrix::new(1, 1 << 20, vec![10.0; 1 << 20]).unwrap(),
            far,
        )
        .unwrap();
        let b = quantize_matrix_with(
            &FloatMatrix::new(1 << 20, 1, vec![10.0; 1 << 20]).unwrap(),
            far,
        )
        .unwrap();
        let bound = check_accumulator_bounds(&a, &b);
        assert_eq!(bound.max_abs_a, 2805);
        assert_eq!(bound.worst_case, (1i128 << 20) * 2805 * 2805);
        assert!(!bound.is_valid());
        assert!(matches!(
            qgemm(&a, &b),
            Err(Error::AccumulatorOverflow { .. })
        ));
        let wide = qgemm_with(&a, &b, Accumulator::Wide64).unwrap();
        assert_eq!(
            wide.as_slice()[0],
            qgemm_expanded_with(&a, &b, Accumulator::Wide64)
                .unwrap()
                .as_slice()[0]
        );
    }

    #[test]
    fn one_by_one_product() {
        let p = unit_params();
        let a = quantize_matrix_with(&FloatMatrix::column(&[0.5]).unwrap(), p).unwrap();
        let b = quantize_matrix_with(&FloatMatrix::column(&[0.25]).unwrap(), p).unwrap();
        assert_eq!(a.codes(), &[191]);
        assert_eq!(b.codes(), &[159]);
        let c = qgemm(&a, &b).unwrap();
        assert_eq!(c.as_slice()[0], 2048.0 / 16256.25);
        assert!((c.as_slice()[0] - 0.125_982_3).abs() < 1e-7);
        assert_eq!(qgemm_expanded(&a, &b).unwrap(), c);
    }

    #[test]
    fn degenerate_operand_bypasses_integer_path() {
        let zero = quantize_matrix(&FloatMatrix::zeros(2, 3), 255).unwrap();
        let other = quantize_matrix(
            &FloatMatrix::from_rows(&[[1.0, -2.0], [0.5, 0.25], [3.0, -1.0]]).unwrap(),
            255,
        )
        .unwrap();
        let c = qgemm(&zero, &other).unwrap();
        assert!(c.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(qgemm_expanded(&zero, &other).unwrap(), c);
    }

    #[test]
    fn zero_offsets_reduce_to_code_products() {
        let unit = QuantParams::from_range(0.0, 1.0, 255).unwrap();
        let a =
            quantize_matrix_with(&FloatMatrix::from_rows(&[[0.2, 0.9]]).unwrap(), unit).unwrap();
        let b = quantize_matrix_with(&FloatMatrix::column(&[0.4, 1.0]).unwrap(), unit).unwrap();
        let dot: i64 = a
            .codes()
            .iter()
            .zip(b.codes())
            .map(|(&x, &y)| x as i64 * y as i64)
            .sum();
        let expect = dot as f64 / (255.0 * 255.0);
        assert_eq!(qgemm(&a, &b).unwrap().as_slice()[0], expect);
        assert_eq!(qgemm_expanded(&a, &b).unwrap().as_slice()[0], expect);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = quantize_matrix(&FloatMatrix::identity(2), 255).unwrap();
        let b = quantize_matrix(&FloatMatrix::identity(3), 255).unwrap();
        assert!(matches!(
            qgemm(&a, &b),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            qgemm_expanded(&a, &b),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = FloatMatrix> {
        proptest::collection::vec(-3.0f64..3.0, rows * cols)
            .prop_map(move |v| FloatMatrix::new(rows, cols, v).unwrap())
    }

    fn operands() -> impl Strategy<Value = (FloatMatrix, FloatMatrix, f64, f64)> {
        (1usize..6, 1usize..12, 1usize..6)
            .prop_flat_map(|(m, k, n)| (matrix(m, k), matrix(k, n), -50.0f64..50.0, -50.0f64..50.0))
    }

    proptest! {
        #[test]
        fn expansion_matches_direct_evaluation((a, b, sa, sb) in operands(), scale in 1u32..=255) {
            // Shift the operands so ranges sit away from zero as well.
            let shift = |m: &FloatMatrix, s: f64| {
                FloatMatrix::new(m.rows(), m.cols(), m.as_slice().iter().map(|v| v + s).collect()).unwrap()
            };
            let aq = quantize_matrix(&shift(&a, sa), scale).unwrap();
            let bq = quantize_matrix(&shift(&b, sb), scale).unwrap();
            for acc in [Accumulator::Checked32, Accumulator::Wide64] {
                let direct = qgemm_with(&aq, &bq, acc);
                let expanded = qgemm_expanded_with(&aq, &bq, acc);
                match (direct, expanded) {
                    (Ok(d), Ok(e)) => {
                        for (x, y) in d.as_slice().iter().zip(e.as_slice()) {
                            prop_assert_eq!(x.to_bits(), y.to_bits());
                        }
                    }
                    (Err(d), Err(e)) => prop_assert_eq!(d, e),
                    (d, e) => prop_assert!(false, "routes disagree: {:?} vs {:?}", d, e),
                }
            }
        }

        #[test]
        fn repeated_calls_are_bit_identical((a, b, _, _) in operands()) {
            let aq = quantize_matrix(&a, 255).unwrap();
            let bq = quantize_matrix(&b, 255).unwrap();
            prop_assert_eq!(qgemm(&aq, &bq).unwrap(), qgemm(&aq, &bq).unwrap());
        }
    }
}
