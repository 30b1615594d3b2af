//! Floating-point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Real scalar the divergence, objective and adaptation code is generic over.
///
/// Implemented for `f32` and `f64`. Constants are written as `f64` literals and
/// converted with [`Scalar::lit`].
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Floor applied inside logarithms so that `0 * ln 0` terms and their adjoints stay finite.
    const LOG_FLOOR: f64 = 1e-12;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("usize representable in scalar type")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `ln(max(x, LOG_FLOOR))`.
    #[inline]
    fn floored_ln(self) -> Self {
        self.max(Self::lit(Self::LOG_FLOOR)).ln()
    }

    /// Sign with `sign(0) = 0` (unlike `Float::signum`, which maps `+0.0` to `1`).
    #[inline]
    fn sign_or_zero(self) -> Self {
        if self > Self::zero() {
            Self::one()
        } else if self < Self::zero() {
            -Self::one()
        } else {
            Self::zero()
        }
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = out.iter().copied().sum();
    for v in &mut out {
        *v = *v / total;
    }
    out
}

/// Backpropagate an adjoint through `softmax`: `p ⊙ (g − ⟨p, g⟩)`.
pub fn softmax_pullback<T: Scalar>(probs: &[T], adjoint: &[T]) -> Vec<T> {
    let dot: T = probs.iter().zip(adjoint).map(|(&p, &g)| p * g).sum();
    probs.iter().zip(adjoint).map(|(&p, &g)| p * (g - dot)).collect()
}

/// Arithmetic mean; `None` for an empty slice.
pub fn mean<T: Scalar>(xs: &[T]) -> Option<T> {
    if xs.is_empty() {
        return None;
    }
    Some(xs.iter().copied().sum::<T>() / T::from_usize_lossy(xs.len()))
}

/// Population standard deviation; `None` for an empty slice.
pub fn population_std<T: Scalar>(xs: &[T]) -> Option<T> {
    let mu = mean(xs)?;
    let var = xs.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / T::from_usize_lossy(xs.len());
    Some(var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(0.0f64.sign_or_zero(), 0.0);
        assert_eq!((-0.0f64).sign_or_zero(), 0.0);
        assert_eq!(2.5f32.sign_or_zero(), 1.0);
        assert_eq!((-1e-30f64).sign_or_zero(), -1.0);
    }

    #[test]
    fn softmax_handles_large_logits() {
        let p = softmax(&[1000.0f64, 1000.0, 0.0]);
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!(p[2] >= 0.0);
    }

    #[test]
    fn population_std_of_constant_is_zero() {
        assert_eq!(population_std(&[0.3f64; 5]), Some(0.0));
        assert_eq!(population_std::<f64>(&[]), None);
        let s = population_std(&[1.0f64, 3.0]).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
    }
}
