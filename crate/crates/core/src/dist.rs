//! Probability distributions over a finite vocabulary.
//!
//! `Distribution` is the universal currency between drafters and the
//! verifier: drafter step distributions, target conditionals, residuals
//! after a rejection. It is generic over the scalar so the enumeration
//! tests can instantiate it with exact rationals.

use thiserror::Error;

use crate::rng::UniformSource;
use crate::scalar::Scalar;
use crate::vocab::TokenId;

#[derive(Debug, Error, PartialEq)]
pub enum DistError {
    #[error("distribution is empty")]
    Empty,
    #[error("negative probability at token {0}")]
    Negative(TokenId),
    #[error("probabilities sum to {sum} (must be 1 within tolerance)")]
    NotNormalized { sum: String },
    #[error("distributions have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("residual distribution is degenerate (o = q); sample directly from o instead")]
    DegenerateResidual,
}

/// A probability vector over a vocabulary: non-negative entries summing
/// to 1 within [`Scalar::norm_tolerance`].
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution<S> {
    probs: Vec<S>,
}

impl<S: Scalar> Distribution<S> {
    pub fn new(probs: Vec<S>) -> Result<Self, DistError> {
        if probs.is_empty() {
            return Err(DistError::Empty);
        }
        for (i, p) in probs.iter().enumerate() {
            if *p < S::zero() {
                return Err(DistError::Negative(i as TokenId));
            }
        }
        let sum = probs.iter().fold(S::zero(), |a, p| a + p.clone());
        if (sum.clone() - S::one()).abs() > S::norm_tolerance() {
            return Err(DistError::NotNormalized {
                sum: format!("{sum:?}"),
            });
        }
        Ok(Self { probs })
    }

    /// Normalizes a non-negative weight vector. Fails when all mass is zero.
    pub fn from_weights(weights: Vec<S>) -> Result<Self, DistError> {
        if weights.is_empty() {
            return Err(DistError::Empty);
        }
        for (i, w) in weights.iter().enumerate() {
            if *w < S::zero() {
                return Err(DistError::Negative(i as TokenId));
            }
        }
        let total = weights.iter().fold(S::zero(), |a, w| a + w.clone());
        if total.is_zero() {
            return Err(DistError::DegenerateResidual);
        }
        Ok(Self {
            probs: weights.into_iter().map(|w| w / total.clone()).collect(),
        })
    }

    pub fn point_mass(len: usize, token: TokenId) -> Self {
        let mut probs = vec![S::zero(); len];
        probs[token as usize] = S::one();
        Self { probs }
    }

    pub fn uniform(len: usize) -> Self {
        let n = (0..len).fold(S::zero(), |a, _| a + S::one());
        Self {
            probs: vec![S::one() / n; len],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[S] {
        &self.probs
    }

    pub fn get(&self, t: TokenId) -> S {
        self.probs[t as usize].clone()
    }

    /// Highest-probability token, ties broken by lowest token id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0usize;
        for i in 1..self.probs.len() {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        best as TokenId
    }

    /// Inverse-CDF lookup in ascending token-id order: returns the first
    /// token whose cumulative probability exceeds `u`. This ordering is a
    /// contract relied upon by the enumeration oracle when it scripts
    /// uniform draws.
    pub fn index_at(&self, u: S) -> TokenId {
        let mut cum = S::zero();
        let mut last_positive = 0usize;
        for (i, p) in self.probs.iter().enumerate() {
            if p.is_zero() {
                continue;
            }
            cum = cum + p.clone();
            last_positive = i;
            if u < cum {
                return i as TokenId;
            }
        }
        // u landed past the accumulated total (rounding); take the last
        // token that carries mass.
        last_positive as TokenId
    }

    /// Residual distribution `norm(max{0, o - q})` used to resample after
    /// a rejection. Degenerate (`o = q` entry-wise) yields an error; the
    /// caller falls back to sampling directly from `o`.
    pub fn residual(o: &Self, q: &Self) -> Result<Self, DistError> {
        if o.len() != q.len() {
            return Err(DistError::LengthMismatch(o.len(), q.len()));
        }
        let weights: Vec<S> = o
            .probs
            .iter()
            .zip(&q.probs)
            .map(|(op, qp)| {
                let d = op.clone() - qp.clone();
                if d > S::zero() {
                    d
                } else {
                    S::zero()
                }
            })
            .collect();
        Self::from_weights(weights)
    }

    /// Renormalizes with the `blocked` token ids zeroed out. Returns `None`
    /// when no mass remains outside the blocked set.
    pub fn restricted(&self, blocked: &[TokenId]) -> Option<Self> {
        let mut weights = self.probs.clone();
        for &t in blocked {
            weights[t as usize] = S::zero();
        }
        Self::from_weights(weights).ok()
    }
}

impl Distribution<f64> {
    /// Samples a token by inverse CDF using one uniform draw from `src`.
    pub fn sample(&self, src: &mut dyn UniformSource) -> TokenId {
        self.index_at(src.next_uniform())
    }
}
