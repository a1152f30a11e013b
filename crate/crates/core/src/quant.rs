//! Uniform learned-step quantizer with straight-through gradients.
//!
//! A value `θ` is mapped to the integer code
//! `clamp(round((θ - β) / α), N_b, P_b)` and dequantized as `α·code + β`,
//! where `N_b = -2^(b-1)` and `P_b = 2^(b-1) - 1` are the bounds of a
//! `b`-bit signed integer. Rounding is half-to-even. Bit width zero is the
//! dropped-feature case and always yields the zero vector.
//!
//! Backward follows the straight-through estimator: the rounding function
//! is treated as identity inside the clamp range, which gives the three
//! case-split gradients computed by [`quantize_grad`].

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard deviation of the normal embedding initializer.
pub const EMBEDDING_INIT_STD: f64 = 3e-3;

/// Lower bound applied to every step size after an optimizer update.
pub const STEP_SIZE_FLOOR: f64 = 1e-8;

/// Number of bits per quantized parameter. Zero drops the feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct BitWidth(u8);

impl BitWidth {
    pub const MAX_BITS: u32 = 15;
    pub const ZERO: BitWidth = BitWidth(0);

    pub fn new(bits: u32) -> Result<Self> {
        if bits > Self::MAX_BITS {
            return Err(Error::InvalidBitWidth(bits));
        }
        Ok(BitWidth(bits as u8))
    }

    #[inline]
    pub const fn get(self) -> u32 {
        self.0 as u32
    }

    #[inline]
    pub const fn is_zero(self) -> bool {
        self.0 == 0
    }

    /// `N_b`, the most negative code. Zero for the dropped case.
    #[inline]
    pub const fn min_code(self) -> i32 {
        if self.0 == 0 {
            0
        } else {
            -(1i32 << (self.0 - 1))
        }
    }

    /// `P_b`, the most positive code. Zero for the dropped case.
    #[inline]
    pub const fn max_code(self) -> i32 {
        if self.0 == 0 {
            0
        } else {
            (1i32 << (self.0 - 1)) - 1
        }
    }
}

impl TryFrom<u8> for BitWidth {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        BitWidth::new(value as u32)
    }
}

impl From<BitWidth> for u8 {
    fn from(b: BitWidth) -> u8 {
        b.0
    }
}

impl fmt::Display for BitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Straight-through gradients of one quantized scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantGrad {
    pub d_theta: f64,
    pub d_alpha: f64,
    pub d_beta: f64,
}

/// Shared quantizer parameters: one step size per nonzero bit width and one
/// offset per embedding dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerParams {
    step_sizes: BTreeMap<BitWidth, f64>,
    offsets: Vec<f64>,
}

impl QuantizerParams {
    pub fn new(step_sizes: BTreeMap<BitWidth, f64>, offsets: Vec<f64>) -> Result<Self> {
        for (b, &alpha) in &step_sizes {
            if b.is_zero() {
                return Err(Error::InvalidArgument(
                    "bit width 0 has no step size".into(),
                ));
            }
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(Error::Domain(format!("step size for {b} bits must be > 0, got {alpha}")));
            }
        }
        if offsets.iter().any(|o| !o.is_finite()) {
            return Err(Error::Domain("non-finite offset".into()));
        }
        Ok(Self { step_sizes, offsets })
    }

    /// Grid spanning ±3σ of the initial embedding distribution for every
    /// nonzero candidate, offsets at zero.
    pub fn init(bits: &[BitWidth], dim: usize, init_std: f64) -> Self {
        let step_sizes = bits
            .iter()
            .filter(|b| !b.is_zero())
            .map(|&b| {
                let span = (b.max_code() - b.min_code()) as f64;
                (b, 6.0 * init_std / span)
            })
            .collect();
        Self {
            step_sizes,
            offsets: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.offsets.len()
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn offsets_mut(&mut self) -> &mut [f64] {
        &mut self.offsets
    }

    pub fn step_sizes(&self) -> &BTreeMap<BitWidth, f64> {
        &self.step_sizes
    }

    pub fn step_size(&self, bits: BitWidth) -> Result<f64> {
        self.step_sizes
            .get(&bits)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no step size for {bits} bits")))
    }

    pub fn step_size_mut(&mut self, bits: BitWidth) -> Option<&mut f64> {
        self.step_sizes.get_mut(&bits)
    }

    /// Applies the positivity floor to every step size.
    pub fn clamp_step_sizes(&mut self) {
        for alpha in self.step_sizes.values_mut() {
            if *alpha < STEP_SIZE_FLOOR {
                *alpha = STEP_SIZE_FLOOR;
            }
        }
    }
}

fn check_scalar(theta: f64, alpha: f64, beta: f64, bits: BitWidth) -> Result<()> {
    if !(theta.is_finite() && alpha.is_finite() && beta.is_finite()) {
        return Err(Error::Domain(format!(
            "non-finite quantizer input (theta={theta}, alpha={alpha}, beta={beta})"
        )));
    }
    if alpha <= 0.0 {
        return Err(Error::Domain(format!("step size must be positive, got {alpha}")));
    }
    if bits.is_zero() {
        return Err(Error::Domain("scalar quantization needs at least one bit".into()));
    }
    Ok(())
}

#[inline]
pub(crate) fn code_of(u: f64, bits: BitWidth) -> i32 {
    u.round_ties_even()
        .clamp(bits.min_code() as f64, bits.max_code() as f64) as i32
}

#[inline]
pub(crate) fn dequantize(code: i32, alpha: f64, beta: f64) -> f64 {
    alpha * code as f64 + beta
}

/// Quantizes one scalar. Returns `(θ̂, code)`.
pub fn quantize_scalar(theta: f64, alpha: f64, beta: f64, bits: BitWidth) -> Result<(f64, i32)> {
    check_scalar(theta, alpha, beta, bits)?;
    let code = code_of((theta - beta) / alpha, bits);
    Ok((dequantize(code, alpha, beta), code))
}

#[inline]
pub(crate) fn grad_unchecked(theta: f64, alpha: f64, beta: f64, bits: BitWidth, upstream: f64) -> QuantGrad {
    let u = (theta - beta) / alpha;
    let lo = bits.min_code() as f64;
    let hi = bits.max_code() as f64;
    if u <= lo {
        QuantGrad {
            d_theta: 0.0,
            d_alpha: upstream * lo,
            d_beta: upstream,
        }
    } else if u >= hi {
        QuantGrad {
            d_theta: 0.0,
            d_alpha: upstream * hi,
            d_beta: upstream,
        }
    } else {
        QuantGrad {
            d_theta: upstream,
            d_alpha: upstream * (u.round_ties_even() - u),
            d_beta: 0.0,
        }
    }
}

/// Straight-through gradients of `θ̂` with respect to `θ`, `α` and `β`,
/// each scaled by `upstream`.
pub fn quantize_grad(theta: f64, alpha: f64, beta: f64, bits: BitWidth, upstream: f64) -> Result<QuantGrad> {
    check_scalar(theta, alpha, beta, bits)?;
    if !upstream.is_finite() {
        return Err(Error::Domain(format!("non-finite upstream gradient {upstream}")));
    }
    Ok(grad_unchecked(theta, alpha, beta, bits, upstream))
}

/// Quantizes an embedding vector. Bit width zero gives the zero vector and
/// all-zero codes.
pub fn quantize_vector(e: &[f64], params: &QuantizerParams, bits: BitWidth) -> Result<(Vec<f64>, Vec<i32>)> {
    if e.len() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            actual: e.len(),
        });
    }
    let mut hat = vec![0.0; e.len()];
    let mut codes = vec![0; e.len()];
    if bits.is_zero() {
        return Ok((hat, codes));
    }
    let alpha = params.step_size(bits)?;
    for ((j, &theta), &beta) in e.iter().enumerate().zip(params.offsets()) {
        let (h, c) = quantize_scalar(theta, alpha, beta, bits)?;
        hat[j] = h;
        codes[j] = c;
    }
    Ok((hat, codes))
}

/// Writes the dequantized vector into `out`. No validation; `alpha` must be
/// the step size for `bits` and all slices must share one length.
#[inline]
pub(crate) fn quantize_into(e: &[f64], alpha: f64, offsets: &[f64], bits: BitWidth, out: &mut [f64]) {
    if bits.is_zero() {
        out.fill(0.0);
        return;
    }
    for ((o, &theta), &beta) in out.iter_mut().zip(e).zip(offsets) {
        *o = dequantize(code_of((theta - beta) / alpha, bits), alpha, beta);
    }
}

/// Accumulates `weight`-scaled straight-through gradients of one quantized
/// vector into `d_e`, `d_alpha` and `d_beta`.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn accumulate_grad(
    e: &[f64],
    alpha: f64,
    offsets: &[f64],
    bits: BitWidth,
    upstream: &[f64],
    weight: f64,
    d_e: &mut [f64],
    d_alpha: &mut f64,
    d_beta: &mut [f64],
) {
    if bits.is_zero() {
        return;
    }
    for j in 0..e.len() {
        let g = grad_unchecked(e[j], alpha, offsets[j], bits, upstream[j]);
        d_e[j] += weight * g.d_theta;
        *d_alpha += weight * g.d_alpha;
        d_beta[j] += weight * g.d_beta;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bw(b: u32) -> BitWidth {
        BitWidth::new(b).unwrap()
    }

    #[test]
    fn bounds_follow_signed_integer_range() {
        assert_eq!((bw(1).min_code(), bw(1).max_code()), (-1, 0));
        assert_eq!((bw(3).min_code(), bw(3).max_code()), (-4, 3));
        assert_eq!((bw(15).min_code(), bw(15).max_code()), (-16384, 16383));
        assert!(BitWidth::new(16).is_err());
    }

    #[test]
    fn scalar_examples() {
        let (h, c) = quantize_scalar(0.37, 0.1, 0.0, bw(3)).unwrap();
        assert_eq!(c, 3);
        assert!((h - 0.3).abs() < 1e-15);

        assert_eq!(quantize_scalar(0.0, 0.5, 0.0, bw(4)).unwrap(), (0.0, 0));

        let (h, c) = quantize_scalar(-10.0, 0.1, 0.0, bw(2)).unwrap();
        assert_eq!(c, -2);
        assert!((h + 0.2).abs() < 1e-15);
    }

    #[test]
    fn ties_round_to_even() {
        assert_eq!(quantize_scalar(0.5, 1.0, 0.0, bw(4)).unwrap().1, 0);
        assert_eq!(quantize_scalar(1.5, 1.0, 0.0, bw(4)).unwrap().1, 2);
        assert_eq!(quantize_scalar(-2.5, 1.0, 0.0, bw(4)).unwrap().1, -2);
    }

    #[test]
    fn rejects_non_finite_and_bad_step() {
        assert!(quantize_scalar(f64::NAN, 0.1, 0.0, bw(3)).is_err());
        assert!(quantize_scalar(0.1, f64::INFINITY, 0.0, bw(3)).is_err());
        assert!(quantize_scalar(0.1, 0.1, f64::NEG_INFINITY, bw(3)).is_err());
        assert!(quantize_scalar(0.1, 0.0, 0.0, bw(3)).is_err());
        assert!(quantize_scalar(0.1, -0.1, 0.0, bw(3)).is_err());
        assert!(quantize_grad(0.1, 0.1, 0.0, bw(3), f64::NAN).is_err());
    }

    #[test]
    fn vector_examples() {
        let mut steps = BTreeMap::new();
        steps.insert(bw(3), 0.1);
        let params = QuantizerParams::new(steps, vec![0.0, 0.0]).unwrap();
        let (hat, codes) = quantize_vector(&[0.37, -0.14], &params, bw(3)).unwrap();
        assert_eq!(codes, vec![3, -1]);
        assert!((hat[0] - 0.3).abs() < 1e-15 && (hat[1] + 0.1).abs() < 1e-15);

        let (hat, codes) = quantize_vector(&[5.0, -3.0], &params, BitWidth::ZERO).unwrap();
        assert_eq!(hat, vec![0.0, 0.0]);
        assert_eq!(codes, vec![0, 0]);

        assert!(matches!(
            quantize_vector(&[1.0], &params, bw(3)),
            Err(Error::DimensionMismatch { expected: 2, actual: 1 })
        ));
        assert!(quantize_vector(&[1.0, 1.0], &params, bw(4)).is_err());
    }

    #[test]
    fn grid_points_are_fixed() {
        let params = QuantizerParams::new([(bw(4), 0.25)].into_iter().collect(), vec![0.5, -1.0]).unwrap();
        for k in -8..=7 {
            let e = [0.25 * k as f64 + 0.5, 0.25 * k as f64 - 1.0];
            let (hat, _) = quantize_vector(&e, &params, bw(4)).unwrap();
            assert_eq!(hat, e);
        }
    }

    #[test]
    fn grad_examples() {
        // u = 3.7 with b = 3 saturates above.
        let g = quantize_grad(0.37, 0.1, 0.0, bw(3), 2.0).unwrap();
        assert_eq!(g.d_theta, 0.0);
        assert_eq!(g.d_alpha, 6.0);
        assert_eq!(g.d_beta, 2.0);

        // u = 1.25 interior for b = 4.
        let g = quantize_grad(1.25, 1.0, 0.0, bw(4), 1.0).unwrap();
        assert_eq!(g, QuantGrad { d_theta: 1.0, d_alpha: -0.25, d_beta: 0.0 });

        // u = -100 with b = 2 saturates below.
        let g = quantize_grad(-10.0, 0.1, 0.0, bw(2), 1.5).unwrap();
        assert_eq!(g, QuantGrad { d_theta: 0.0, d_alpha: -3.0, d_beta: 1.5 });
    }

    #[test]
    fn boundary_points_are_saturated() {
        // u exactly at N_b or P_b belongs to the clamped branches.
        let g = quantize_grad(-4.0, 1.0, 0.0, bw(3), 1.0).unwrap();
        assert_eq!(g, QuantGrad { d_theta: 0.0, d_alpha: -4.0, d_beta: 1.0 });
        let g = quantize_grad(3.0, 1.0, 0.0, bw(3), 1.0).unwrap();
        assert_eq!(g, QuantGrad { d_theta: 0.0, d_alpha: 3.0, d_beta: 1.0 });
    }

    #[test]
    fn init_spans_three_sigma() {
        let bits: Vec<_> = (0..=6).map(bw).collect();
        let p = QuantizerParams::init(&bits, 16, EMBEDDING_INIT_STD);
        assert_eq!(p.step_sizes().len(), 6);
        assert!((p.step_size(bw(1)).unwrap() - 0.018).abs() < 1e-15);
        assert!((p.step_size(bw(6)).unwrap() - 0.018 / 63.0).abs() < 1e-15);
        assert_eq!(p.offsets(), &[0.0; 16]);
    }

    #[test]
    fn step_size_floor() {
        let mut p = QuantizerParams::init(&[bw(2)], 1, 1.0);
        *p.step_size_mut(bw(2)).unwrap() = -0.5;
        p.clamp_step_sizes();
        assert_eq!(p.step_size(bw(2)).unwrap(), STEP_SIZE_FLOOR);
    }
}
