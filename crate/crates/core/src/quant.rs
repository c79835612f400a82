//! Uniform linear quantization and recovery.
//!
//! For a value set with range `R = v_max − v_min` and `S` steps the
//! quantization factor is `Q = S / R`. A value `x` maps to the code
//!
//! ```text
//! code = round(Q·x) − round(Q·v_min)
//! ```
//!
//! and a code is recovered as `(code + round(Q·v_min)) / Q`. The rounded
//! offset `z = round(Q·v_min)` is the same integer in both directions, so
//! `recover(quantize(x)) = round(Q·x) / Q` and the only error left is the
//! unavoidable precision loss `|err| ≤ R / (2S)`.
//!
//! `round` is round-half-up (`floor(x + 0.5)`). It commutes with integer
//! shifts, which is what keeps `round(Q·v_max) − z` equal to `S` and every
//! code inside `[0, S]`.

use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::math;
use crate::matrix::FloatMatrix;

/// Number of quantization steps for 8-bit codes.
pub const DEFAULT_SCALE: u32 = 255;

/// Step count used for activations quantized on the fly. Weight shadows
/// may use a coarser scale; activations always use the full 8 bits.
pub const ACTIVATION_SCALE: u32 = DEFAULT_SCALE;

/// Largest step count accepted by [`QuantParams`]. Only scales up to 255
/// fit the 8-bit storage of [`QuantizedMatrix`]; larger ones exist for
/// resolution studies through [`QuantParams::code`].
pub const MAX_SCALE: u32 = u16::MAX as u32;

const RANGE_EPSILON: f64 = 1e-12;

static CLAMPED: AtomicUsize = AtomicUsize::new(0);

/// Number of out-of-range inputs clamped by [`quantize_value`] and friends
/// since process start.
pub fn clamped_count() -> usize {
    CLAMPED.load(Ordering::Relaxed)
}

/// `floor(x + 0.5)`.
pub fn round_half_up(x: f64) -> Result<i64> {
    if !x.is_finite() {
        return Err(Error::invalid("round_half_up of a non-finite value"));
    }
    Ok(rhu(x))
}

#[inline]
pub(crate) fn rhu(x: f64) -> i64 {
    math::floor(x + 0.5) as i64
}

/// Range and derived factors for one independently quantized tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QuantParams {
    v_min: f64,
    v_max: f64,
    scale: u32,
    q_factor: f64,
    offset: i64,
    degenerate: bool,
}

impl QuantParams {
    /// Derives `Q` and the rounded offset from an explicit range.
    pub fn from_range(v_min: f64, v_max: f64, scale: u32) -> Result<Self> {
        if !v_min.is_finite() || !v_max.is_finite() {
            return Err(Error::invalid("quantization range must be finite"));
        }
        if v_max < v_min {
            return Err(Error::invalid("quantization range has v_max < v_min"));
        }
        if scale == 0 || scale > MAX_SCALE {
            return Err(Error::invalid(alloc::format!(
                "scale must be in 1..={MAX_SCALE}, got {scale}"
            )));
        }
        let range = v_max - v_min;
        if range < RANGE_EPSILON * f64::max(1.0, v_max.abs()) {
            return Ok(Self {
                v_min,
                v_max,
                scale,
                q_factor: 0.0,
                offset: 0,
                degenerate: true,
            });
        }
        let q_factor = scale as f64 / range;
        Ok(Self {
            v_min,
            v_max,
            scale,
            q_factor,
            offset: rhu(q_factor * v_min),
            degenerate: false,
        })
    }

    pub fn v_min(&self) -> f64 {
        self.v_min
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    /// Number of quantization steps `S`.
    pub fn scale(&self) -> u32 {
        self.scale
    }

    /// `Q = S / (v_max − v_min)`; zero for degenerate ranges.
    pub fn q_factor(&self) -> f64 {
        self.q_factor
    }

    /// `z = round(Q·v_min)`.
    pub fn offset(&self) -> i64 {
        self.offset
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Code for `x` at full width; always in `[0, S]`.
    ///
    /// Inputs outside `[v_min, v_max]` are clamped and counted in
    /// [`clamped_count`].
    pub fn code(&self, x: f64) -> u32 {
        if self.degenerate {
            return 0;
        }
        // The endpoints are pinned so that float noise in Q·v_max can never
        // move them off 0 and S.
        if x <= self.v_min {
            if x < self.v_min {
                CLAMPED.fetch_add(1, Ordering::Relaxed);
            }
            return 0;
        }
        if x >= self.v_max {
            if x > self.v_max {
                CLAMPED.fetch_add(1, Ordering::Relaxed);
            }
            return self.scale;
        }
        let code = rhu(self.q_factor * x) - self.offset;
        code.clamp(0, self.scale as i64) as u32
    }

    /// Inverse of [`code`](Self::code): `(code + z) / Q`, or `v_min` for a
    /// degenerate range.
    pub fn recover(&self, code: u32) -> f64 {
        if self.degenerate {
            return self.v_min;
        }
        (code as i64 + self.offset) as f64 / self.q_factor
    }

    /// Largest `|code + z|` over the valid code range.
    pub(crate) fn max_abs_shifted(&self) -> i64 {
        let lo = self.offset.unsigned_abs();
        let hi = (self.offset + self.scale as i64).unsigned_abs();
        lo.max(hi) as i64
    }
}

/// Min/max range of `values` and the derived factors.
pub fn compute_params(values: &[f64], scale: u32) -> Result<QuantParams> {
    let (&first, rest) = values
        .split_first()
        .ok_or_else(|| Error::invalid("cannot compute quantization range of an empty set"))?;
    if !first.is_finite() {
        return Err(Error::invalid("non-finite value in quantization input"));
    }
    let (mut lo, mut hi) = (first, first);
    for &v in rest {
        if !v.is_finite() {
            return Err(Error::invalid("non-finite value in quantization input"));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    QuantParams::from_range(lo, hi, scale)
}

/// 8-bit code of `x`.
///
/// # Panics
///
/// If `p.scale() > 255`.
pub fn quantize_value(x: f64, p: &QuantParams) -> u8 {
    assert!(p.scale <= 255, "8-bit codes need scale <= 255");
    p.code(x) as u8
}

pub fn recover_value(code: u8, p: &QuantParams) -> f64 {
    p.recover(code as u32)
}

/// 8-bit codes of a matrix together with their quantization parameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    codes: Vec<u8>,
    params: QuantParams,
}

impl QuantizedMatrix {
    /// Assembles a matrix from stored codes, e.g. when loading a model file.
    pub fn new(rows: usize, cols: usize, codes: Vec<u8>, params: QuantParams) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("matrix dimensions must be positive"));
        }
        if codes.len() != rows * cols {
            return Err(Error::invalid("code count does not match matrix shape"));
        }
        if params.scale > 255 {
            return Err(Error::invalid("8-bit codes need scale <= 255"));
        }
        if let Some(c) = codes.iter().find(|&&c| c as u32 > params.scale) {
            return Err(Error::invalid(alloc::format!(
                "code {c} exceeds scale {}",
                params.scale
            )));
        }
        Ok(Self {
            rows,
            cols,
            codes,
            params,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }
}

/// Quantizes `m` with parameters computed from its own entries.
pub fn quantize_matrix(m: &FloatMatrix, scale: u32) -> Result<QuantizedMatrix> {
    let params = compute_params(m.as_slice(), scale)?;
    quantize_matrix_with(m, params)
}

/// Quantizes `m` with externally supplied parameters (entries outside the
/// range are clamped).
pub fn quantize_matrix_with(m: &FloatMatrix, params: QuantParams) -> Result<QuantizedMatrix> {
    if params.scale > 255 {
        return Err(Error::invalid("8-bit codes need scale <= 255"));
    }
    let codes = m.as_slice().iter().map(|&x| params.code(x) as u8).collect();
    Ok(QuantizedMatrix {
        rows: m.rows(),
        cols: m.cols(),
        codes,
        params,
    })
}

pub fn recover_matrix(qm: &QuantizedMatrix) -> FloatMatrix {
    let values = qm
        .codes
        .iter()
        .map(|&c| qm.params.recover(c as u32))
        .collect();
    FloatMatrix::from_raw(qm.rows, qm.cols, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn round_half_up_examples() {
        assert_eq!(round_half_up(0.5).unwrap(), 1);
        assert_eq!(round_half_up(-127.5).unwrap(), -127);
        assert_eq!(round_half_up(63.75).unwrap(), 64);
        assert_eq!(round_half_up(-0.5).unwrap(), 0);
        assert_eq!(round_half_up(2.4999).unwrap(), 2);
        assert!(round_half_up(f64::NAN).is_err());
        assert!(round_half_up(f64::NEG_INFINITY).is_err());
    }

    #[test]
    fn params_symmetric_range() {
        let p = compute_params(&[-1.0, 0.0, 1.0], 255).unwrap();
        assert_eq!(p.v_min(), -1.0);
        assert_eq!(p.v_max(), 1.0);
        assert_eq!(p.q_factor(), 127.5);
        assert_eq!(p.offset(), -127);
        assert!(!p.is_degenerate());
    }

    #[test]
    fn params_degenerate_and_zero_offset() {
        assert!(compute_params(&[3.0, 3.0], 255).unwrap().is_degenerate());
        // Relative epsilon: a spread of 1e-9 around 1e6 is still constant.
        assert!(compute_params(&[1e6, 1e6 + 1e-9], 255)
            .unwrap()
            .is_degenerate());
        let p = compute_params(&[0.0, 1.0], 255).unwrap();
        assert_eq!(p.q_factor(), 255.0);
        assert_eq!(p.offset(), 0);
    }

    #[test]
    fn params_errors() {
        assert!(compute_params(&[], 255).is_err());
        assert!(compute_params(&[1.0, f64::NAN], 255).is_err());
        assert!(compute_params(&[f64::INFINITY], 255).is_err());
        assert!(compute_params(&[0.0, 1.0], 0).is_err());
        assert!(QuantParams::from_range(1.0, 0.0, 255).is_err());
    }

    #[test]
    fn quantize_examples() {
        let p = compute_params(&[-1.0, 1.0], 255).unwrap();
        assert_eq!(quantize_value(1.0, &p), 255);
        assert_eq!(quantize_value(-1.0, &p), 0);
        assert_eq!(quantize_value(0.5, &p), 191);
        let degenerate = compute_params(&[2.0], 255).unwrap();
        assert_eq!(quantize_value(2.0, &degenerate), 0);
    }

    #[test]
    fn recover_examples() {
        let p = compute_params(&[-1.0, 1.0], 255).unwrap();
        assert!((recover_value(191, &p) - 64.0 / 127.5).abs() < 1e-15);
        assert!((recover_value(191, &p) - 0.501_960_8).abs() < 1e-7);
        assert!((recover_value(255, &p) - 1.003_921_6).abs() < 1e-7);
        let unit = compute_params(&[0.0, 1.0], 255).unwrap();
        assert_eq!(recover_value(0, &unit), 0.0);
        let degenerate = compute_params(&[-4.25, -4.25], 255).unwrap();
        assert_eq!(recover_value(17, &degenerate), -4.25);
    }

    #[test]
    fn out_of_range_inputs_clamp_and_count() {
        let p = compute_params(&[-1.0, 1.0], 255).unwrap();
        let before = clamped_count();
        assert_eq!(quantize_value(3.0, &p), 255);
        assert_eq!(quantize_value(-7.0, &p), 0);
        assert!(clamped_count() >= before + 2);
    }

    #[test]
    fn matrix_examples() {
        let m = FloatMatrix::from_rows(&[[-1.0, 0.0, 1.0]]).unwrap();
        let q = quantize_matrix(&m, 255).unwrap();
        assert_eq!(q.codes(), &[0, 127, 255]);
        let back = recover_matrix(&q);
        for (a, b) in m.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() <= 2.0 / 510.0);
        }

        let zeros = FloatMatrix::zeros(2, 2);
        let q = quantize_matrix(&zeros, 255).unwrap();
        assert!(q.params().is_degenerate());
        assert_eq!(q.codes(), &[0, 0, 0, 0]);
        assert_eq!(recover_matrix(&q).as_slice(), &[0.0; 4]);

        let m = FloatMatrix::from_rows(&[[0.0, 1.0]]).unwrap();
        let q = quantize_matrix(&m, 255).unwrap();
        assert_eq!(q.codes(), &[0, 255]);
        assert_eq!(recover_matrix(&q).as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn stored_codes_are_validated() {
        let p = QuantParams::from_range(0.0, 1.0, 15).unwrap();
        assert!(QuantizedMatrix::new(1, 2, vec![0, 15], p).is_ok());
        assert!(QuantizedMatrix::new(1, 2, vec![0, 16], p).is_err());
        assert!(QuantizedMatrix::new(1, 3, vec![0, 1], p).is_err());
        let wide = QuantParams::from_range(0.0, 1.0, 1023).unwrap();
        assert!(QuantizedMatrix::new(1, 1, vec![0], wide).is_err());
    }

    #[test]
    fn tie_rule_keeps_codes_in_eight_bits() {
        // Q·v_min = −127.5 exactly: away-from-zero rounding would give 256.
        let p = QuantParams::from_range(-1.0, 1.0, 255).unwrap();
        assert_eq!(p.offset(), -127);
        assert_eq!(p.code(1.0), 255);
        assert_eq!(p.code(-1.0), 0);
        // 127.4999… rounds down, one code below the pinned endpoint.
        assert_eq!(p.code(1.0 - 1e-12), 254);
    }

    fn range() -> impl Strategy<Value = (f64, f64)> {
        (-1e3f64..1e3, 1e-6f64..1e3).prop_map(|(lo, width)| (lo, lo + width))
    }

    proptest! {
        #[test]
        fn round_half_up_commutes_with_integer_shift(x in -1e6f64..1e6, k in -1000i64..1000) {
            // x on a 1/8 grid so that x + k is exact.
            let x = (x * 8.0).round() / 8.0;
            prop_assert_eq!(round_half_up(x + k as f64).unwrap(), round_half_up(x).unwrap() + k);
        }

        #[test]
        fn round_half_up_is_monotone(a in -1e9f64..1e9, b in -1e9f64..1e9) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(round_half_up(lo).unwrap() <= round_half_up(hi).unwrap());
        }

        #[test]
        fn codes_stay_in_range_and_endpoints_are_exact(
            (lo, hi) in range(),
            t in 0.0f64..=1.0,
            scale in 1u32..=255,
        ) {
            let p = QuantParams::from_range(lo, hi, scale).unwrap();
            prop_assume!(!p.is_degenerate());
            let x = lo + t * (hi - lo);
            prop_assert!(p.code(x) <= scale);
            prop_assert_eq!(p.code(lo), 0);
            prop_assert_eq!(p.code(hi), scale);
        }

        #[test]
        fn recovery_depends_only_on_rounded_product((lo, hi) in range(), t in 0.0f64..1.0) {
            let p = QuantParams::from_range(lo, hi, 255).unwrap();
            prop_assume!(!p.is_degenerate());
            let x = lo + t * (hi - lo);
            prop_assume!(x > lo && x < hi);
            let code = quantize_value(x, &p);
            let shifted = rhu(p.q_factor() * x);
            prop_assert_eq!(code as i64 + p.offset(), shifted);
            prop_assert_eq!(
                recover_value(code, &p).to_bits(),
                (shifted as f64 / p.q_factor()).to_bits()
            );
        }

        #[test]
        fn quantize_matrix_is_deterministic(values in proptest::collection::vec(-10.0f64..10.0, 1..40)) {
            let m = FloatMatrix::new(1, values.len(), values).unwrap();
            prop_assert_eq!(quantize_matrix(&m, 255).unwrap(), quantize_matrix(&m, 255).unwrap());
        }
    }
}
