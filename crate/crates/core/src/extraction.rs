//! Per-token spatial attention from joint (image + prompt) self-attention.
//!
//! A joint block attends over `n` image tokens followed by `m` prompt tokens.
//! The spatial field of prompt token `i` symmetrizes what the token reads
//! from the image and what the image reads from it:
//! `(A[n+i, :n] + A[:n, n+i]ᵀ) / √2`, then normalizes it to a distribution.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distributions::ProbField;
use crate::error::{Error, Result};
use crate::scalar::{softmax, Scalar};

/// Row-sum tolerance for softmaxed matrices.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// What the matrix entries are.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Row-stochastic attention probabilities; extraction renormalizes.
    Softmaxed,
    /// Pre-softmax scores; extraction applies the softmax itself.
    #[default]
    RawLogits,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Softmaxed => "softmaxed",
            AttentionKind::RawLogits => "raw_logits",
        })
    }
}

/// Inclusive index range written `lo:hi` (or a single `k`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InclusiveRange {
    pub lo: usize,
    pub hi: usize,
}

impl InclusiveRange {
    pub fn new(lo: usize, hi: usize) -> Result<Self> {
        if lo > hi {
            return Err(Error::EmptyRange { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, v: usize) -> bool {
        (self.lo..=self.hi).contains(&v)
    }

    pub fn iter(&self) -> std::ops::RangeInclusive<usize> {
        self.lo..=self.hi
    }

    pub fn len(&self) -> usize {
        self.hi - self.lo + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl FromStr for InclusiveRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |t: &str| {
            t.trim().parse::<usize>().map_err(|_| Error::InvalidConfig(format!("bad range `{s}`, expected lo:hi")))
        };
        match s.split_once(':') {
            Some((lo, hi)) => Self::new(parse(lo)?, parse(hi)?),
            None => {
                let k = parse(s)?;
                Self::new(k, k)
            }
        }
    }
}

impl fmt::Display for InclusiveRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.lo, self.hi)
    }
}

/// Joint attention (or logit) matrix of one block at one timestep, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct JointAttentionMatrix<T> {
    data: Vec<T>,
    n: usize,
    m: usize,
    kind: AttentionKind,
    block_index: usize,
    timestep: usize,
}

impl<T: Scalar> JointAttentionMatrix<T> {
    pub fn new(data: Vec<T>, n: usize, m: usize, kind: AttentionKind, block_index: usize, timestep: usize) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::InvalidMatrix(format!("need n >= 1 and m >= 1, got n = {n}, m = {m}")));
        }
        let size = n + m;
        if data.len() != size * size {
            return Err(Error::InvalidMatrix(format!("expected {} entries, found {}", size * size, data.len())));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        if kind == AttentionKind::Softmaxed {
            for (r, row) in data.chunks(size).enumerate() {
                if row.iter().any(|&v| v < T::zero()) {
                    return Err(Error::InvalidMatrix(format!("row {r} has negative attention")));
                }
                let sum: T = row.iter().copied().sum();
                if (sum - T::one()).abs() > T::lit(ROW_SUM_TOLERANCE) {
                    return Err(Error::InvalidMatrix(format!("row {r} sums to {sum}")));
                }
            }
        }
        Ok(Self { data, n, m, kind, block_index, timestep })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn kind(&self) -> AttentionKind {
        self.kind
    }

    pub fn block_index(&self) -> usize {
        self.block_index
    }

    pub fn timestep(&self) -> usize {
        self.timestep
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * (self.n + self.m) + col]
    }
}

/// An extracted token field.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction<T> {
    pub field: ProbField<T>,
    /// The symmetrized vector before normalization, `1/√2` factor included.
    pub symmetrized: Vec<T>,
    /// Set when a softmaxed extraction had no mass and fell back to uniform.
    pub degenerate: bool,
}

fn square_side(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// Spatial distribution of prompt token `token` over the `n` image cells.
pub fn extract_token_field<T: Scalar>(a: &JointAttentionMatrix<T>, token: usize) -> Result<Extraction<T>> {
    if token >= a.m {
        return Err(Error::TokenOutOfRange { index: token, m: a.m });
    }
    let n = a.n;
    let row = n + token;
    let scale = T::one() / T::lit(2.0).sqrt();
    let symmetrized: Vec<T> = (0..n).map(|j| scale * (a.get(row, j) + a.get(j, row))).collect();
    let (values, degenerate) = match a.kind {
        AttentionKind::RawLogits => (softmax(&symmetrized), false),
        AttentionKind::Softmaxed => {
            let sum: T = symmetrized.iter().copied().sum();
            if sum > T::zero() {
                (symmetrized.iter().map(|&v| v / sum).collect(), false)
            } else {
                (vec![T::one() / T::from_usize_lossy(n); n], true)
            }
        }
    };
    let mut field = ProbField::new(values)?;
    if let Some(side) = square_side(n) {
        field = field.reshaped(side, side)?;
    }
    Ok(Extraction { field, symmetrized, degenerate })
}

/// Fields for every `(block, token)` with block in `range`, block-major then token order.
pub fn extract_pool<T: Scalar>(
    blocks: &[JointAttentionMatrix<T>],
    tokens: &[usize],
    range: InclusiveRange,
) -> Result<Vec<ProbField<T>>> {
    let mut shape: Option<(usize, usize)> = None;
    let mut pool = Vec::with_capacity(range.len() * tokens.len());
    for b in range.iter() {
        let a = blocks.iter().find(|a| a.block_index == b).ok_or(Error::MissingBlock(b))?;
        match shape {
            None => shape = Some((a.n, a.m)),
            Some(s) if s != (a.n, a.m) => {
                return Err(Error::InvalidMatrix(format!(
                    "block {b} has n = {}, m = {} but earlier blocks have n = {}, m = {}",
                    a.n, a.m, s.0, s.1
                )))
            }
            Some(_) => {}
        }
        for &t in tokens {
            pool.push(extract_token_field(a, t)?.field);
        }
    }
    Ok(pool)
}
