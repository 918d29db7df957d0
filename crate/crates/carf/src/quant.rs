//! Fake quantizers with a trainable soft bitwidth.
//!
//! A quantizer is described by a continuous bitwidth `b`, a value range `r_v`
//! and (asymmetric scheme only) a range ceiling `v_max`. The effective integer
//! bitwidth is `B = round(b)` clamped to [2, 32]; the quantization grid is
//!
//! ```text
//!   s   = r_v / r_q,          r_q = 2^B - 1
//!   Z   = round(q_max - v_max * r_q / r_v)        (asymmetric; else 0)
//!   v^  = s * (clamp(round(v/s) + Z, q_min, q_max) - Z)
//! ```
//!
//! All three trainable scalars carry analytic gradients with a straight-through
//! estimate for the round operators, split by region (in range / overflow /
//! underflow). The formulas are hand-derived per scheme and are exercised
//! against finite differences of the relaxed surrogate in the test suite.
//!
//! Numerics: every derivation and grid evaluation runs in f64, including when
//! the stored tensors are f32. This keeps quantize→dequantize round-trips
//! bitwise exact and makes the high-bitwidth end (B = 32, where `v/s` exceeds
//! the f32 integer range) well behaved.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Inclusive bounds for the soft bitwidth.
pub const BIT_MIN: f64 = 2.0;
pub const BIT_MAX: f64 = 32.0;

/// Smallest admissible value range; calibration floors degenerate ranges here
/// so the step size never collapses to zero.
pub const RANGE_FLOOR: f64 = 1e-6;

const LN2: f64 = std::f64::consts::LN_2;

/// How the integer grid is laid over the value range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantScheme {
    /// Zero-centered grid for weights: q ∈ [-2^(B-1), 2^(B-1)-1], Z = 0,
    /// value range interpreted as [-r_v/2, r_v/2].
    SignedSymmetric,
    /// Non-negative grid for ReLU/exponential activations: q ∈ [0, 2^B-1],
    /// Z = 0, value range [0, r_v].
    UnsignedSymmetric,
    /// Shifted grid with a trainable ceiling: q ∈ [0, 2^B-1], value range
    /// [v_max - r_v, v_max].
    Asymmetric,
}

impl QuantScheme {
    pub fn name(&self) -> &'static str {
        match self {
            QuantScheme::SignedSymmetric => "signed_symmetric",
            QuantScheme::UnsignedSymmetric => "unsigned_symmetric",
            QuantScheme::Asymmetric => "asymmetric",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "signed_symmetric" => Ok(QuantScheme::SignedSymmetric),
            "unsigned_symmetric" => Ok(QuantScheme::UnsignedSymmetric),
            "asymmetric" => Ok(QuantScheme::Asymmetric),
            other => Err(Error::InvalidArgument(format!(
                "unknown quantization scheme {:?}",
                other
            ))),
        }
    }
}

/// Trainable state of one quantizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerState {
    pub scheme: QuantScheme,
    /// Soft bitwidth, kept inside [BIT_MIN, BIT_MAX].
    pub b: f64,
    /// Value range width (strictly positive).
    pub r_v: f64,
    /// Upper range bound; present iff the scheme is asymmetric.
    pub v_max: Option<f64>,
    /// Excluded from the bitwidth penalty (its penalty share is redistributed).
    pub penalty_exempt: bool,
}

impl QuantizerState {
    pub fn new(scheme: QuantScheme, b: f64, r_v: f64, v_max: Option<f64>) -> Result<Self> {
        let state = QuantizerState {
            scheme,
            b: clamp_soft_bitwidth(b),
            r_v,
            v_max,
            penalty_exempt: false,
        };
        state.derive()?; // validate
        Ok(state)
    }

    /// Placeholder state for a freshly registered component: 8-bit, unit
    /// range. Calibration replaces the range before any real use.
    pub fn default_for(scheme: QuantScheme) -> Self {
        let v_max = match scheme {
            QuantScheme::Asymmetric => Some(0.5),
            _ => None,
        };
        QuantizerState::new(scheme, 8.0, 1.0, v_max).expect("placeholder state is valid")
    }

    /// Effective integer bitwidth.
    pub fn bits(&self) -> u32 {
        effective_bits(self.b)
    }

    /// Resolve the full grid for the current parameter values.
    pub fn derive(&self) -> Result<QuantParams> {
        derive_params(self.scheme, self.b, self.r_v, self.v_max)
    }
}

/// Fully resolved quantization grid: everything `fake_quantize` and the
/// gradient rules need, computed once per tensor rather than per element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scheme: QuantScheme,
    pub bits: u32,
    /// 2^bits - 1 (number of steps in the grid).
    pub r_q: f64,
    /// Step size r_v / r_q.
    pub s: f64,
    /// Integer zero offset.
    pub z: i64,
    pub q_min: i64,
    pub q_max: i64,
    /// Value-space range the straight-through estimator treats as in-range.
    pub v_min: f64,
    pub v_max: f64,
    /// Copy of the range width for the gradient rules.
    pub r_v: f64,
    /// 2^bits as a float, shared by the bitwidth gradients.
    pub pow2b: f64,
}

/// Clamp a soft bitwidth into its admissible interval.
pub fn clamp_soft_bitwidth(b: f64) -> f64 {
    b.clamp(BIT_MIN, BIT_MAX)
}

fn effective_bits(b: f64) -> u32 {
    // round() is half-away-from-zero, the rounding rule used everywhere here.
    clamp_soft_bitwidth(b).round() as u32
}

/// Resolve step size, zero offset, and grid bounds for one parameter set.
pub fn derive_params(
    scheme: QuantScheme,
    b: f64,
    r_v: f64,
    v_max: Option<f64>,
) -> Result<QuantParams> {
    if !r_v.is_finite() || r_v <= 0.0 {
        return Err(Error::InvalidQuantizer(format!(
            "value range must be positive and finite, got {}",
            r_v
        )));
    }
    if !b.is_finite() {
        return Err(Error::InvalidQuantizer("bitwidth is not finite".into()));
    }
    let bits = effective_bits(b);
    let pow2b = (bits as f64).exp2();
    let r_q = pow2b - 1.0;
    let s = r_v / r_q;
    let (q_min, q_max, z, v_min, v_max) = match scheme {
        QuantScheme::SignedSymmetric => {
            let half = (bits as f64 - 1.0).exp2();
            (-(half as i64), half as i64 - 1, 0i64, -r_v / 2.0, r_v / 2.0)
        }
        QuantScheme::UnsignedSymmetric => (0i64, r_q as i64, 0i64, 0.0, r_v),
        QuantScheme::Asymmetric => {
            let ceiling = v_max.ok_or_else(|| {
                Error::InvalidQuantizer("asymmetric scheme requires a range ceiling".into())
            })?;
            if !ceiling.is_finite() {
                return Err(Error::InvalidQuantizer("range ceiling is not finite".into()));
            }
            let q_max = r_q as i64;
            let z = (r_q - ceiling * r_q / r_v).round() as i64;
            (0i64, q_max, z, ceiling - r_v, ceiling)
        }
    };
    Ok(QuantParams {
        scheme,
        bits,
        r_q,
        s,
        z,
        q_min,
        q_max,
        v_min,
        v_max,
        r_v,
        pow2b,
    })
}

impl QuantParams {
    /// Whether `v` falls in the region the straight-through estimator passes
    /// gradients through (closed interval [v_min, v_max]).
    #[inline]
    pub fn in_range(&self, v: f64) -> bool {
        v >= self.v_min && v <= self.v_max
    }

    /// Quantize-dequantize in one step: the value the quantized model sees.
    #[inline]
    pub fn fake_quantize(&self, v: f64) -> f64 {
        self.s * (self.integer_quantize(v) - self.z) as f64
    }

    /// Clamped integer code for `v`.
    #[inline]
    pub fn integer_quantize(&self, v: f64) -> i64 {
        let q = (v / self.s).round() as i64 + self.z;
        q.clamp(self.q_min, self.q_max)
    }

    /// Value represented by an integer code. Rejects codes outside the grid.
    pub fn dequantize(&self, code: i64) -> Result<f64> {
        if code < self.q_min || code > self.q_max {
            return Err(Error::InvalidArgument(format!(
                "code {} outside grid [{}, {}]",
                code, self.q_min, self.q_max
            )));
        }
        Ok(self.s * (code - self.z) as f64)
    }

    /// Straight-through gradient to the quantizer input.
    #[inline]
    pub fn grad_input(&self, v: f64) -> f64 {
        if self.in_range(v) {
            1.0
        } else {
            0.0
        }
    }

    /// Gradient of the quantized value w.r.t. the range width r_v.
    pub fn grad_rv(&self, v: f64) -> f64 {
        if self.in_range(v) {
            // d/dr_v [s * round(v/s)] with the round treated straight-through.
            return (self.s * (v / self.s).round() - v) / self.r_v;
        }
        let over = v > self.v_max;
        match self.scheme {
            QuantScheme::SignedSymmetric => {
                if over {
                    self.q_max as f64 / self.r_q
                } else {
                    self.q_min as f64 / self.r_q
                }
            }
            QuantScheme::UnsignedSymmetric => {
                if over {
                    1.0
                } else {
                    0.0
                }
            }
            QuantScheme::Asymmetric => {
                let base = -self.v_max / self.r_v - self.z as f64 / self.r_q;
                if over {
                    1.0 + base
                } else {
                    base
                }
            }
        }
    }

    /// Gradient of the quantized value w.r.t. the soft bitwidth b.
    pub fn grad_b(&self, v: f64) -> f64 {
        let t = self.pow2b * LN2 / self.r_q;
        if self.in_range(v) {
            return (v - self.s * (v / self.s).round()) * t;
        }
        match self.scheme {
            QuantScheme::SignedSymmetric => {
                if v > self.v_max {
                    (self.v_max - self.q_max as f64 * self.s) * t
                } else {
                    (self.v_min - self.q_min as f64 * self.s) * t
                }
            }
            // Saturated unsigned values sit exactly on a range endpoint that
            // does not move with b.
            QuantScheme::UnsignedSymmetric => 0.0,
            QuantScheme::Asymmetric => (self.v_min + self.s * self.z as f64) * t,
        }
    }

    /// Gradient of the quantized value w.r.t. the range ceiling v_max.
    /// Only the asymmetric scheme trains a ceiling.
    pub fn grad_vmax(&self, v: f64) -> Result<f64> {
        if self.scheme != QuantScheme::Asymmetric {
            return Err(Error::InvalidQuantizer(
                "range ceiling gradient requested for a symmetric scheme".into(),
            ));
        }
        Ok(if self.in_range(v) { 0.0 } else { 1.0 })
    }

    /// Fake-quantize a whole f32 slice (math still in f64 per element).
    pub fn fake_quantize_slice(&self, input: &[f32], out: &mut [f32]) {
        debug_assert_eq!(input.len(), out.len());
        for (o, &v) in out.iter_mut().zip(input.iter()) {
            *o = self.fake_quantize(v as f64) as f32;
        }
    }

    /// Integer codes for a whole f32 slice.
    pub fn integer_quantize_slice(&self, input: &[f32]) -> Vec<i64> {
        input
            .iter()
            .map(|&v| self.integer_quantize(v as f64))
            .collect()
    }
}

/// Fit a quantizer range to observed samples (one calibration pass), leaving
/// the soft bitwidth at `b_init`.
///
/// Range rules per scheme: signed takes twice the peak magnitude, unsigned the
/// non-negative peak, asymmetric the full min→max span with the ceiling at the
/// max. Degenerate (near-constant) sample sets are floored at `RANGE_FLOOR`.
pub fn ptq_calibrate(samples: &[f32], scheme: QuantScheme, b_init: f64) -> Result<QuantizerState> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "calibration requires at least one sample".into(),
        ));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in samples {
        let v = v as f64;
        if !v.is_finite() {
            return Err(Error::InvalidArgument(
                "calibration samples must be finite".into(),
            ));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let (r_v, v_max) = match scheme {
        QuantScheme::SignedSymmetric => (2.0 * lo.abs().max(hi.abs()), None),
        QuantScheme::UnsignedSymmetric => (hi.max(0.0), None),
        QuantScheme::Asymmetric => (hi - lo, Some(hi)),
    };
    let r_v = r_v.max(RANGE_FLOOR);
    QuantizerState::new(scheme, b_init, r_v, v_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(scheme: QuantScheme, b: f64, r_v: f64, v_max: Option<f64>) -> QuantParams {
        derive_params(scheme, b, r_v, v_max).unwrap()
    }

    #[test]
    fn derive_signed_grid() {
        let p = params(QuantScheme::SignedSymmetric, 3.2, 7.0, None);
        assert_eq!(p.bits, 3);
        assert_eq!(p.r_q, 7.0);
        assert_eq!(p.s, 1.0);
        assert_eq!(p.z, 0);
        assert_eq!((p.q_min, p.q_max), (-4, 3));
        assert_eq!((p.v_min, p.v_max), (-3.5, 3.5));
    }

    #[test]
    fn derive_unsigned_grid() {
        let p = params(QuantScheme::UnsignedSymmetric, 2.0, 3.0, None);
        assert_eq!(p.bits, 2);
        assert_eq!(p.s, 1.0);
        assert_eq!((p.q_min, p.q_max), (0, 3));
        assert_eq!((p.v_min, p.v_max), (0.0, 3.0));
    }

    #[test]
    fn derive_asymmetric_offset() {
        // Ceiling halfway through the range: offset rounds away from zero.
        let p = params(QuantScheme::Asymmetric, 3.0, 1.0, Some(0.5));
        assert!((p.s - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(p.z, 4);
        assert!((p.v_min - (-0.5)).abs() < 1e-15);
    }

    #[test]
    fn derive_rejects_bad_range() {
        assert!(derive_params(QuantScheme::SignedSymmetric, 8.0, 0.0, None).is_err());
        assert!(derive_params(QuantScheme::SignedSymmetric, 8.0, -1.0, None).is_err());
        assert!(derive_params(QuantScheme::Asymmetric, 8.0, 1.0, None).is_err());
    }

    #[test]
    fn fake_quantize_clamps_below_grid() {
        let p = params(QuantScheme::SignedSymmetric, 3.0, 7.0, None);
        assert_eq!(p.fake_quantize(-10.0), -4.0);
    }

    #[test]
    fn fake_quantize_asymmetric_interior() {
        let p = params(QuantScheme::Asymmetric, 3.0, 1.0, Some(1.0));
        assert_eq!(p.z, 0);
        assert!((p.fake_quantize(0.3) - 2.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn fake_quantize_half_step_rounds_away_from_zero() {
        let p = params(QuantScheme::SignedSymmetric, 3.0, 7.0, None);
        assert_eq!(p.fake_quantize(0.5), 1.0);
        assert_eq!(p.fake_quantize(-0.5), -1.0);
    }

    #[test]
    fn integer_codes() {
        let asym = params(QuantScheme::Asymmetric, 3.0, 1.0, Some(0.5));
        assert_eq!(asym.integer_quantize(0.0), 4);
        let signed = params(QuantScheme::SignedSymmetric, 3.0, 7.0, None);
        assert_eq!(signed.integer_quantize(3.6), 3); // clamped from 4
        let unsigned = params(QuantScheme::UnsignedSymmetric, 4.0, 2.0, None);
        assert_eq!(unsigned.integer_quantize(0.0), 0);
    }

    #[test]
    fn dequantize_values() {
        let signed = params(QuantScheme::SignedSymmetric, 3.0, 7.0, None);
        assert_eq!(signed.dequantize(3).unwrap(), 3.0);
        let asym = params(QuantScheme::Asymmetric, 3.0, 1.0, Some(0.5));
        assert!((asym.dequantize(0).unwrap() - (-4.0 / 7.0)).abs() < 1e-15);
        assert!(signed.dequantize(9).is_err());
        assert!(signed.dequantize(-5).is_err());
    }

    #[test]
    fn range_gradient_by_region() {
        let p = params(QuantScheme::SignedSymmetric, 3.0, 7.0, None);
        // In range: residual of the nearest grid point over the range width.
        assert!((p.grad_rv(-2.3) - 0.3 / 7.0).abs() < 1e-12);
        // Saturated high: top code over step count.
        assert!((p.grad_rv(10.0) - 3.0 / 7.0).abs() < 1e-12);
        let u = params(QuantScheme::UnsignedSymmetric, 3.0, 7.0, None);
        assert_eq!(u.grad_rv(-1.0), 0.0);
        assert_eq!(u.grad_rv(10.0), 1.0);
    }

    #[test]
    fn bitwidth_gradient_by_region() {
        let p = params(QuantScheme::SignedSymmetric, 3.0, 7.0, None);
        let t = 8.0 * std::f64::consts::LN_2 / 7.0;
        assert!((p.grad_b(-2.3) - (-0.3) * t).abs() < 1e-12);
        // Saturated high: distance from the range edge to the top grid point.
        assert!((p.grad_b(10.0) - 0.5 * t).abs() < 1e-12);
        // Cross-check against the closed form of d(r_v q_max / r_q)/db.
        let alt = 7.0 * std::f64::consts::LN_2 * 4.0 / 49.0;
        assert!((p.grad_b(10.0) - alt).abs() < 1e-12);
        let u = params(QuantScheme::UnsignedSymmetric, 3.0, 7.0, None);
        assert_eq!(u.grad_b(10.0), 0.0);
        assert_eq!(u.grad_b(-1.0), 0.0);
    }

    #[test]
    fn ceiling_gradient_is_saturation_indicator() {
        let p = params(QuantScheme::Asymmetric, 3.0, 1.0, Some(0.5));
        assert_eq!(p.grad_vmax(0.0).unwrap(), 0.0);
        assert_eq!(p.grad_vmax(2.0).unwrap(), 1.0);
        assert_eq!(p.grad_vmax(-2.0).unwrap(), 1.0);
        let s = params(QuantScheme::SignedSymmetric, 3.0, 7.0, None);
        assert!(s.grad_vmax(0.0).is_err());
    }

    #[test]
    fn straight_through_input_gradient() {
        let p = params(QuantScheme::SignedSymmetric, 3.0, 7.0, None);
        assert_eq!(p.grad_input(3.5), 1.0); // boundary included
        assert_eq!(p.grad_input(-3.5), 1.0);
        assert_eq!(p.grad_input(3.500001), 0.0);
    }

    #[test]
    fn calibration_ranges() {
        let s = ptq_calibrate(&[-0.5, 0.25], QuantScheme::SignedSymmetric, 8.0).unwrap();
        assert_eq!(s.r_v, 1.0);
        let a = ptq_calibrate(&[-1.0, 3.0], QuantScheme::Asymmetric, 8.0).unwrap();
        assert_eq!(a.r_v, 4.0);
        assert_eq!(a.v_max, Some(3.0));
        let z = ptq_calibrate(&[0.0, 0.0], QuantScheme::UnsignedSymmetric, 8.0).unwrap();
        assert_eq!(z.r_v, RANGE_FLOOR);
        assert!(ptq_calibrate(&[], QuantScheme::SignedSymmetric, 8.0).is_err());
    }

    #[test]
    fn soft_bitwidth_clamp() {
        assert_eq!(clamp_soft_bitwidth(1.7), 2.0);
        assert_eq!(clamp_soft_bitwidth(33.0), 32.0);
        assert_eq!(clamp_soft_bitwidth(8.7), 8.7);
    }
}
