//! Per-token embedding vectors and cosine similarity.
//!
//! Toy models have no transformer to extract an embedding layer from, so
//! the table holds explicit per-token vectors loaded from the vocabulary
//! file. Whether a real deployment would use the target model's input or
//! output embedding layer is left to configuration; the engine only ever
//! sees this one table.

use thiserror::Error;

use crate::scalar::Real;
use crate::vocab::TokenId;

#[derive(Debug, Error, PartialEq)]
pub enum EmbedError {
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("embedding vector for token {0} has zero norm")]
    ZeroNorm(TokenId),
    #[error("no embedding for token {0}")]
    Missing(TokenId),
    #[error("embedding dimension must be positive")]
    ZeroDim,
}

/// One real vector of length `dim` per token id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<S> {
    dim: usize,
    vectors: Vec<Vec<S>>,
}

impl<S: Real> EmbeddingTable<S> {
    pub fn new(dim: usize, vectors: Vec<Vec<S>>) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::ZeroDim);
        }
        for (t, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(EmbedError::DimMismatch(v.len(), dim));
            }
            if v.iter().all(|x| *x == S::zero()) {
                return Err(EmbedError::ZeroNorm(t as TokenId));
            }
        }
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, t: TokenId) -> Result<&[S], EmbedError> {
        self.vectors
            .get(t as usize)
            .map(Vec::as_slice)
            .ok_or(EmbedError::Missing(t))
    }

    /// Cosine similarity between two tokens' embeddings.
    pub fn token_sim(&self, a: TokenId, b: TokenId) -> Result<S, EmbedError> {
        cosine_sim(self.vector(a)?, self.vector(b)?)
    }
}

/// `⟨u,v⟩ / (‖u‖‖v‖)`, in `[-1, 1]`.
pub fn cosine_sim<S: Real>(u: &[S], v: &[S]) -> Result<S, EmbedError> {
    if u.len() != v.len() {
        return Err(EmbedError::DimMismatch(u.len(), v.len()));
    }
    let mut dot = S::zero();
    let mut nu = S::zero();
    let mut nv = S::zero();
    for (a, b) in u.iter().zip(v) {
        dot = dot + *a * *b;
        nu = nu + *a * *a;
        nv = nv + *b * *b;
    }
    if nu.is_zero() {
        return Err(EmbedError::ZeroNorm(0));
    }
    if nv.is_zero() {
        return Err(EmbedError::ZeroNorm(1));
    }
    Ok(dot / (nu.sqrt() * nv.sqrt()))
}
