//! Discrete probability distributions and the divergence/entropy primitives.
//!
//! All logarithms are natural. Terms of the form `0 · ln(0 / q)` are taken to
//! be zero, which keeps the Jensen-Shannon divergence exact on disjoint
//! supports.

use crate::error::{Error, Result};
use crate::scalar::{softmax, Scalar};

/// Largest deviation of the input sum from 1 that construction silently renormalizes.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-3;

/// Floor used by [`ProbField::floored`].
pub const EPSILON_FLOOR: f64 = 1e-12;

/// A discrete probability distribution over `d` spatial cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbField<T> {
    values: Vec<T>,
    shape: Option<(usize, usize)>,
}

impl<T: Scalar> ProbField<T> {
    /// Validates and renormalizes `values`.
    ///
    /// Entries must be finite and non-negative and the sum must lie within
    /// [`RENORMALIZE_TOLERANCE`] of one.
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyDistribution);
        }
        for (index, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { index });
            }
            if v < T::zero() {
                return Err(Error::NegativeEntry { index, value: v.to_f64_lossy() });
            }
        }
        let sum: T = values.iter().copied().sum();
        if (sum - T::one()).abs() > T::lit(RENORMALIZE_TOLERANCE) {
            return Err(Error::NotNormalized { sum: sum.to_f64_lossy() });
        }
        Ok(Self { values: values.into_iter().map(|v| v / sum).collect(), shape: None })
    }

    /// Like [`ProbField::new`], attaching `(height, width)` grid metadata.
    pub fn with_shape(values: Vec<T>, height: usize, width: usize) -> Result<Self> {
        let len = values.len();
        Self::new(values)?.reshaped(height, width).map_err(|_| Error::ShapeMismatch { height, width, len })
    }

    /// Softmax of unconstrained logits.
    pub fn from_logits(logits: &[T]) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::EmptyDistribution);
        }
        if let Some(index) = logits.iter().position(|z| !z.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { values: softmax(logits), shape: None })
    }

    /// Normalizes a non-negative vector of arbitrary positive mass.
    pub fn from_weights(weights: &[T]) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::EmptyDistribution);
        }
        let sum: T = weights.iter().copied().sum();
        if !sum.is_finite() || sum <= T::zero() {
            return Err(Error::NotNormalized { sum: sum.to_f64_lossy() });
        }
        Self::new(weights.iter().map(|&w| w / sum).collect())
    }

    pub fn uniform(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::EmptyDistribution);
        }
        let v = T::one() / T::from_usize_lossy(d);
        Ok(Self { values: vec![v; d], shape: None })
    }

    /// Point mass on cell `at`.
    pub fn delta(d: usize, at: usize) -> Result<Self> {
        if at >= d {
            return Err(Error::IndexOutOfRange { index: at, len: d });
        }
        let mut values = vec![T::zero(); d];
        values[at] = T::one();
        Ok(Self { values, shape: None })
    }

    pub fn reshaped(mut self, height: usize, width: usize) -> Result<Self> {
        if height * width != self.values.len() {
            return Err(Error::ShapeMismatch { height, width, len: self.values.len() });
        }
        self.shape = Some((height, width));
        Ok(self)
    }

    /// Clamps every entry to at least `1e-12` and renormalizes.
    ///
    /// Makes the raw [`kl_divergence`] defined for dumps containing exact zeros.
    pub fn floored(&self) -> Self {
        let eps = T::lit(EPSILON_FLOOR);
        let clamped: Vec<T> = self.values.iter().map(|&v| v.max(eps)).collect();
        let sum: T = clamped.iter().copied().sum();
        Self { values: clamped.into_iter().map(|v| v / sum).collect(), shape: self.shape }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.shape
    }
}

/// A non-empty set of distributions sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionSet<T> {
    members: Vec<ProbField<T>>,
}

impl<T: Scalar> DistributionSet<T> {
    pub fn new(members: Vec<ProbField<T>>) -> Result<Self> {
        let first = members.first().ok_or(Error::EmptySet)?;
        let d = first.len();
        if let Some(bad) = members.iter().find(|p| p.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, found: bad.len() });
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[ProbField<T>] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.members[0].len()
    }

    fn slices(&self) -> Vec<&[T]> {
        self.members.iter().map(ProbField::values).collect()
    }
}

/// `Σ p_i ln(p_i / q_i)`; errors when `q` misses mass that `p` carries.
pub fn kl_divergence<T: Scalar>(p: &ProbField<T>, q: &ProbField<T>) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch { expected: p.len(), found: q.len() });
    }
    kl_slices(p.values(), q.values())
}

pub(crate) fn kl_slices<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    let mut acc = T::zero();
    for (index, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi <= T::zero() {
            continue;
        }
        if qi <= T::zero() {
            return Err(Error::KlUndefined { index });
        }
        acc = acc + pi * (pi / qi).ln();
    }
    Ok(acc.max(T::zero()))
}

/// Elementwise uniform average of the set.
pub fn mixture<T: Scalar>(set: &DistributionSet<T>) -> ProbField<T> {
    ProbField { values: mixture_slices(&set.slices()), shape: set.members[0].shape }
}

pub(crate) fn mixture_slices<T: Scalar>(members: &[&[T]]) -> Vec<T> {
    let d = members[0].len();
    let n = T::from_usize_lossy(members.len());
    let mut m = vec![T::zero(); d];
    for p in members {
        for (mi, &pi) in m.iter_mut().zip(p.iter()) {
            *mi = *mi + pi;
        }
    }
    for mi in &mut m {
        *mi = *mi / n;
    }
    m
}

/// Jensen-Shannon divergence of the set: mean KL of each member to the mixture.
pub fn jsd<T: Scalar>(set: &DistributionSet<T>) -> T {
    jsd_slices(&set.slices())
}

pub(crate) fn jsd_slices<T: Scalar>(members: &[&[T]]) -> T {
    let m = mixture_slices(members);
    let mut acc = T::zero();
    for p in members {
        for (&pi, &mi) in p.iter().zip(&m) {
            // mi >= pi / n > 0 whenever pi > 0
            if pi > T::zero() {
                acc = acc + pi * (pi / mi).ln();
            }
        }
    }
    (acc / T::from_usize_lossy(members.len())).max(T::zero())
}

/// [`jsd`] divided by `ln n`. A singleton set has nothing to diverge from and scores 0.
pub fn jsd_normalized<T: Scalar>(set: &DistributionSet<T>) -> T {
    jsd_normalized_slices(&set.slices())
}

pub(crate) fn jsd_normalized_slices<T: Scalar>(members: &[&[T]]) -> T {
    if members.len() < 2 {
        return T::zero();
    }
    jsd_slices(members) / T::from_usize_lossy(members.len()).ln()
}

/// Shannon entropy `−Σ p_i ln p_i`.
pub fn entropy<T: Scalar>(p: &ProbField<T>) -> T {
    entropy_slice(p.values())
}

pub(crate) fn entropy_slice<T: Scalar>(p: &[T]) -> T {
    let h = p
        .iter()
        .filter(|&&v| v > T::zero())
        .fold(T::zero(), |acc, &v| acc - v * v.ln());
    h.max(T::zero())
}

/// [`entropy`] divided by `ln d`; for `d = 1` the only distribution is uniform and scores 1.
pub fn entropy_normalized<T: Scalar>(p: &ProbField<T>) -> T {
    entropy_normalized_slice(p.values())
}

pub(crate) fn entropy_normalized_slice<T: Scalar>(p: &[T]) -> T {
    if p.len() < 2 {
        return T::one();
    }
    entropy_slice(p) / T::from_usize_lossy(p.len()).ln()
}
