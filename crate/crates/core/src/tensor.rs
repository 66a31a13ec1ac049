//! Tensor values and affine INT8 quantization.
//!
//! Quantization is per tensor and affine: `q = clamp(round(x / scale) + zp,
//! -128, 127)` with ties rounded away from zero. Weights use `zp = 0`.
//! Integer rescaling (requantization) is expressed through
//! [`FixedMultiplier`], a 31-bit fixed-point multiplier with a right shift
//! that rounds half up, so INT8 results are bit-reproducible.

use alloc::vec::Vec;
use core::fmt;

use crate::{Error, Result};

pub const QMIN: i32 = -128;
pub const QMAX: i32 = 127;

/// Dimensions of a tensor, outermost first (N, C, H, W for images).
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "Vec<usize>", into = "Vec<usize>"))]
pub struct Shape(Vec<usize>);

impl Shape {
    pub const MAX_RANK: usize = 4;

    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() || dims.len() > Self::MAX_RANK {
            return Err(Error::InvalidShape(alloc::format!(
                "rank {} outside [1, {}]",
                dims.len(),
                Self::MAX_RANK
            )));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidShape(alloc::format!(
                "dimension {pos} is zero"
            )));
        }
        Ok(Self(dims))
    }

    pub fn nchw(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        Self::new(alloc::vec![n, c, h, w])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn volume(&self) -> usize {
        self.0.iter().product()
    }

    /// Returns `(n, c, h, w)` for rank-4 shapes.
    pub fn as_nchw(&self) -> Option<(usize, usize, usize, usize)> {
        match self.0[..] {
            [n, c, h, w] => Some((n, c, h, w)),
            _ => None,
        }
    }

    /// Same shape with the leading (batch) dimension replaced.
    pub fn with_batch(&self, n: usize) -> Result<Self> {
        let mut dims = self.0.clone();
        dims[0] = n;
        Self::new(dims)
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Self::new(dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(shape: Shape) -> Self {
        shape.0
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{d}")?;
        }
        f.write_str(")")
    }
}

/// Scale and zero point of an affine INT8 mapping.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: i32) -> Result<Self> {
        let qp = Self { scale, zero_point };
        qp.validate()?;
        Ok(qp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale.is_finite() && self.scale > 0.0 && (QMIN..=QMAX).contains(&self.zero_point) {
            Ok(())
        } else {
            Err(Error::InvalidQuantParams {
                scale: self.scale,
                zero_point: self.zero_point,
            })
        }
    }

    /// Quantizes one value. The caller guarantees `x` is finite.
    #[inline]
    pub fn quantize_value(&self, x: f32) -> i8 {
        // pre-clamp keeps the integer add from overflowing; 1024 is far outside the range
        let r = libm::round(x as f64 / self.scale as f64).clamp(-1024.0, 1024.0) as i32;
        (r + self.zero_point).clamp(QMIN, QMAX) as i8
    }

    #[inline]
    pub fn dequantize_value(&self, q: i8) -> f32 {
        self.scale * (q as i32 - self.zero_point) as f32
    }

    /// Real values representable at the two ends of the INT8 range.
    pub fn range(&self) -> (f32, f32) {
        (
            self.dequantize_value(QMIN as i8),
            self.dequantize_value(QMAX as i8),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorF32 {
    shape: Shape,
    data: Vec<f32>,
}

impl TensorF32 {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.volume() {
            return Err(Error::LengthMismatch {
                len: data.len(),
                volume: shape.volume(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        let data = alloc::vec![0.0; shape.volume()];
        Self { shape, data }
    }

    /// Builds a tensor from kernel output whose length is known to match.
    pub(crate) fn from_raw(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.volume(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Stacks rank-4 tensors along the batch axis.
    pub fn concat_batch(parts: &[TensorF32]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidShape("empty batch".into()))?;
        let (_, c, h, w) = first.shape.as_nchw().ok_or_else(|| {
            Error::InvalidShape(alloc::format!("expected NCHW, got {}", first.shape))
        })?;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            match p.shape.as_nchw() {
                Some((pn, pc, ph, pw)) if (pc, ph, pw) == (c, h, w) => {
                    n += pn;
                    data.extend_from_slice(&p.data);
                }
                _ => {
                    return Err(Error::InvalidShape(alloc::format!(
                        "cannot stack {} with {}",
                        first.shape,
                        p.shape
                    )))
                }
            }
        }
        Ok(Self::from_raw(Shape::nchw(n, c, h, w)?, data))
    }

    /// Item `i` along the batch axis, keeping a leading dimension of 1.
    pub fn batch_item(&self, i: usize) -> Self {
        let per = self.shape.volume() / self.shape.dims()[0];
        let shape = self.shape.with_batch(1).expect("batch of one is valid");
        Self::from_raw(shape, self.data[i * per..(i + 1) * per].to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorI8 {
    shape: Shape,
    data: Vec<i8>,
    qparams: QuantParams,
}

impl TensorI8 {
    pub fn new(shape: Shape, data: Vec<i8>, qparams: QuantParams) -> Result<Self> {
        qparams.validate()?;
        if data.len() != shape.volume() {
            return Err(Error::LengthMismatch {
                len: data.len(),
                volume: shape.volume(),
            });
        }
        Ok(Self {
            shape,
            data,
            qparams,
        })
    }

    /// Tensor filled with the zero point, i.e. real value zero everywhere.
    pub fn zero_point_filled(shape: Shape, qparams: QuantParams) -> Self {
        let data = alloc::vec![qparams.zero_point as i8; shape.volume()];
        Self {
            shape,
            data,
            qparams,
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<i8> {
        self.data
    }

    pub fn qparams(&self) -> QuantParams {
        self.qparams
    }
}

/// Quantizes a raw slice, reporting the first non-finite element.
pub fn quantize_slice(x: &[f32], qp: QuantParams) -> Result<Vec<i8>> {
    qp.validate()?;
    x.iter()
        .enumerate()
        .map(|(index, &v)| {
            if v.is_finite() {
                Ok(qp.quantize_value(v))
            } else {
                Err(Error::NonFinite { index })
            }
        })
        .collect()
}

pub fn quantize(x: &TensorF32, qp: QuantParams) -> Result<TensorI8> {
    let data = quantize_slice(x.data(), qp)?;
    Ok(TensorI8 {
        shape: x.shape().clone(),
        data,
        qparams: qp,
    })
}

pub fn dequantize(q: &TensorI8) -> TensorF32 {
    let qp = q.qparams;
    let data = q.data.iter().map(|&v| qp.dequantize_value(v)).collect();
    TensorF32::from_raw(q.shape.clone(), data)
}

/// Rescales 32-bit accumulators to INT8 at `ratio = in_scale * w_scale / out_scale`.
pub fn requantize(
    acc: &[i32],
    shape: Shape,
    in_scale: f32,
    w_scale: f32,
    out_qp: QuantParams,
) -> Result<TensorI8> {
    if !(in_scale > 0.0 && w_scale > 0.0) {
        return Err(Error::InvalidQuantParams {
            scale: in_scale.min(w_scale),
            zero_point: 0,
        });
    }
    out_qp.validate()?;
    let ratio = in_scale as f64 * w_scale as f64 / out_qp.scale as f64;
    let m = FixedMultiplier::from_real(ratio);
    let data = acc
        .iter()
        .map(|&a| m.requantize(a, out_qp.zero_point))
        .collect();
    TensorI8::new(shape, data, out_qp)
}

/// A positive real ratio represented as `multiplier / 2^shift`.
///
/// The multiplier is normalized into `[2^30, 2^31)` so the relative error is
/// at most `2^-31`, well inside one f32 ULP of the ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FixedMultiplier {
    pub multiplier: i32,
    pub shift: u32,
}

impl FixedMultiplier {
    const MAX_SHIFT: u32 = 62;

    pub fn from_real(ratio: f64) -> Self {
        assert!(
            ratio.is_finite() && ratio >= 0.0,
            "ratio must be finite and nonnegative"
        );
        if ratio == 0.0 {
            return Self {
                multiplier: 0,
                shift: 0,
            };
        }
        let (frac, exp) = libm::frexp(ratio);
        let mut m = libm::round(frac * (1u64 << 31) as f64) as i64;
        let mut exp = exp;
        if m == 1 << 31 {
            m /= 2;
            exp += 1;
        }
        let shift = 31 - exp;
        assert!(
            shift >= 0,
            "ratio {ratio} too large for a 31-bit multiplier"
        );
        let mut shift = shift as u32;
        if shift > Self::MAX_SHIFT {
            let extra = shift - Self::MAX_SHIFT;
            m = if extra >= 63 {
                0
            } else {
                (m + (1 << (extra - 1))) >> extra
            };
            shift = Self::MAX_SHIFT;
        }
        Self {
            multiplier: m as i32,
            shift,
        }
    }

    pub fn to_real(self) -> f64 {
        self.multiplier as f64 / libm::pow(2.0, self.shift as f64)
    }

    /// `round_half_up(x * multiplier / 2^shift)`.
    #[inline]
    pub fn apply(self, x: i32) -> i64 {
        let prod = x as i64 * self.multiplier as i64;
        if self.shift == 0 {
            prod
        } else {
            (prod + (1i64 << (self.shift - 1))) >> self.shift
        }
    }

    /// Scales `x`, adds the zero point and saturates to INT8.
    #[inline]
    pub fn requantize(self, x: i32, zero_point: i32) -> i8 {
        (self.apply(x) + zero_point as i64).clamp(QMIN as i64, QMAX as i64) as i8
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn t(data: Vec<f32>) -> TensorF32 {
        let n = data.len();
        TensorF32::new(Shape::new(vec![n]).unwrap(), data).unwrap()
    }

    fn qp(scale: f32, zp: i32) -> QuantParams {
        QuantParams::new(scale, zp).unwrap()
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(&t(vec![0.0]), qp(0.5, 0)).unwrap().data(), &[0]);
        assert_eq!(quantize(&t(vec![1.0]), qp(0.5, 0)).unwrap().data(), &[2]);
        assert_eq!(
            quantize(&t(vec![1000.0]), qp(0.5, 0)).unwrap().data(),
            &[127]
        );
        assert_eq!(
            quantize(&t(vec![-1000.0]), qp(0.5, 0)).unwrap().data(),
            &[-128]
        );
    }

    #[test]
    fn rounds_half_away_from_zero() {
        let q = quantize(&t(vec![0.25, -0.25, 0.75, -0.75]), qp(0.5, 0)).unwrap();
        assert_eq!(q.data(), &[1, -1, 2, -2]);
    }

    #[test]
    fn non_finite_reports_index() {
        let err = quantize_slice(&[0.0, 1.0, f32::NAN], qp(1.0, 0)).unwrap_err();
        assert_eq!(err, Error::NonFinite { index: 2 });
        assert!(TensorF32::new(Shape::new(vec![1]).unwrap(), vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn dequantize_examples() {
        let shape = Shape::new(vec![1]).unwrap();
        let d = |v: i8, s: f32, zp: i32| {
            dequantize(&TensorI8::new(shape.clone(), vec![v], qp(s, zp)).unwrap()).data()[0]
        };
        assert_eq!(d(0, 0.5, 0), 0.0);
        assert_eq!(d(2, 0.5, 0), 1.0);
        assert_eq!(d(-128, 1.0, -128), 0.0);
    }

    #[test]
    fn requantize_examples() {
        let shape = Shape::new(vec![1]).unwrap();
        // in*w/out = 0.1 * 0.1 / 1.0 = 0.01
        let r = requantize(&[100], shape.clone(), 0.1, 0.1, qp(1.0, 0)).unwrap();
        assert_eq!(r.data(), &[1]);
        let r = requantize(&[0], shape.clone(), 0.37, 0.02, qp(0.9, 5)).unwrap();
        assert_eq!(r.data(), &[5]);
        let r = requantize(&[1_000_000], shape, 1.0, 1.0, qp(1.0, 0)).unwrap();
        assert_eq!(r.data(), &[127]);
    }

    #[test]
    fn invalid_qparams() {
        assert!(QuantParams::new(0.0, 0).is_err());
        assert!(QuantParams::new(f32::NAN, 0).is_err());
        assert!(QuantParams::new(1.0, 128).is_err());
        assert!(QuantParams::new(1.0, -129).is_err());
    }

    #[test]
    fn shape_rules() {
        assert!(Shape::new(vec![]).is_err());
        assert!(Shape::new(vec![1, 2, 3, 4, 5]).is_err());
        assert!(Shape::new(vec![1, 0]).is_err());
        assert_eq!(Shape::nchw(1, 3, 224, 224).unwrap().volume(), 150528);
    }

    #[test]
    fn fixed_multiplier_unit_ratio_is_exact() {
        let m = FixedMultiplier::from_real(1.0);
        for x in [-300, -1, 0, 1, 77, 100_000] {
            assert_eq!(m.apply(x), x as i64);
        }
    }

    #[test]
    fn fixed_multiplier_rounds_half_up() {
        let m = FixedMultiplier::from_real(0.5);
        assert_eq!(m.apply(1), 1);
        assert_eq!(m.apply(-1), 0);
        assert_eq!(m.apply(3), 2);
        assert_eq!(m.apply(-3), -1);
    }

    proptest! {
        #[test]
        fn fixed_multiplier_within_one_ulp(ratio in 1e-9f64..1e4) {
            let m = FixedMultiplier::from_real(ratio);
            let ulp = {
                let r = ratio as f32;
                (f32::from_bits(r.to_bits() + 1) - r) as f64
            };
            prop_assert!((m.to_real() - ratio).abs() <= ulp);
        }

        #[test]
        fn round_trip_error_bounded(
            scale in 1e-3f32..10.0,
            zp in -128i32..=127,
            u in -127.0f32..=127.0,
        ) {
            let q = qp(scale, zp);
            // stay within the representable band around scale * zero_point
            let x = scale * zp as f32 + u * scale;
            let lo = scale * (QMIN - zp) as f32;
            let hi = scale * (QMAX - zp) as f32;
            prop_assume!(x >= lo && x <= hi);
            let back = q.dequantize_value(q.quantize_value(x));
            prop_assert!((back - x).abs() <= scale / 2.0 * (1.0 + 1e-5));
        }

        #[test]
        fn quantize_monotone(scale in 1e-3f32..10.0, zp in -128i32..=127, a in -2000f32..2000.0, b in -2000f32..2000.0) {
            let q = qp(scale, zp);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(q.quantize_value(lo) <= q.quantize_value(hi));
        }

        #[test]
        fn dequantize_idempotent_after_round_trip(scale in 1e-4f32..100.0, zp in -128i32..=127, v in any::<i8>()) {
            let q = qp(scale, zp);
            let once = q.dequantize_value(v);
            let twice = q.dequantize_value(q.quantize_value(once));
            prop_assert_eq!(once.to_bits(), twice.to_bits());
        }
    }
}
