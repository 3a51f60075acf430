//! Vocabulary and token sequences.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::EmbeddingTable;
use crate::Prob;

/// Token identifier; ids are dense in `[0, vocab.size())`.
pub type TokenId = u32;

#[derive(Debug, Error, PartialEq)]
pub enum VocabError {
    #[error("vocabulary must have at least 2 tokens, got {0}")]
    TooSmall(usize),
    #[error("eos id {eos} out of range for vocabulary of size {size}")]
    EosOutOfRange { eos: TokenId, size: usize },
    #[error("token id {token} out of range for vocabulary of size {size}")]
    TokenOutOfRange { token: TokenId, size: usize },
    #[error("embedding table invalid: {0}")]
    BadEmbeddings(String),
}

/// A finite token vocabulary. Index in `tokens` is the token id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    eos_id: TokenId,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, eos_id: TokenId) -> Result<Self, VocabError> {
        if tokens.len() < 2 {
            return Err(VocabError::TooSmall(tokens.len()));
        }
        if eos_id as usize >= tokens.len() {
            return Err(VocabError::EosOutOfRange {
                eos: eos_id,
                size: tokens.len(),
            });
        }
        Ok(Self { tokens, eos_id })
    }

    /// Synthetic vocabulary `t0..t{n-1}` with the last token as `<eos>`.
    pub fn numbered(size: usize) -> Result<Self, VocabError> {
        let mut tokens: Vec<String> = (0..size.saturating_sub(1))
            .map(|i| format!("t{i}"))
            .collect();
        tokens.push("<eos>".to_owned());
        Self::new(tokens, size.saturating_sub(1) as TokenId)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn token_str(&self, t: TokenId) -> Option<&str> {
        self.tokens.get(t as usize).map(String::as_str)
    }

    pub fn check_token(&self, t: TokenId) -> Result<(), VocabError> {
        if (t as usize) < self.tokens.len() {
            Ok(())
        } else {
            Err(VocabError::TokenOutOfRange {
                token: t,
                size: self.tokens.len(),
            })
        }
    }
}

/// An ordered sequence of token ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    pub fn from_ids(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Appends in place. Callers are responsible for id validity; the
    /// validated entry point is [`concat`].
    pub fn push(&mut self, t: TokenId) {
        self.0.push(t);
    }

    /// Last `n` ids (the whole sequence when shorter).
    pub fn suffix(&self, n: usize) -> &[TokenId] {
        let start = self.0.len().saturating_sub(n);
        &self.0[start..]
    }

    pub fn last(&self) -> Option<TokenId> {
        self.0.last().copied()
    }
}

impl std::ops::Index<usize> for TokenSeq {
    type Output = TokenId;
    fn index(&self, i: usize) -> &TokenId {
        &self.0[i]
    }
}

/// Sequence concatenation: returns `prefix ⊕ token`, leaving `prefix` untouched.
pub fn concat(
    vocab: &Vocabulary,
    prefix: &TokenSeq,
    token: TokenId,
) -> Result<TokenSeq, VocabError> {
    vocab.check_token(token)?;
    let mut out = prefix.clone();
    out.push(token);
    Ok(out)
}

/// On-disk form of a vocabulary plus its per-token embedding vectors:
/// `{"tokens":[...], "eos":k, "embedding_dim":d, "embeddings":[[...],...]}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct VocabFile {
    pub tokens: Vec<String>,
    pub eos: TokenId,
    pub embedding_dim: usize,
    pub embeddings: Vec<Vec<Prob>>,
}

impl VocabFile {
    pub fn into_parts(self) -> Result<(Vocabulary, EmbeddingTable<Prob>), VocabError> {
        let vocab = Vocabulary::new(self.tokens, self.eos)?;
        if self.embeddings.len() != vocab.size() {
            return Err(VocabError::BadEmbeddings(format!(
                "expected {} embedding vectors, got {}",
                vocab.size(),
                self.embeddings.len()
            )));
        }
        let table = EmbeddingTable::new(self.embedding_dim, self.embeddings)
            .map_err(|e| VocabError::BadEmbeddings(e.to_string()))?;
        Ok((vocab, table))
    }

    pub fn from_parts(vocab: &Vocabulary, table: &EmbeddingTable<Prob>) -> Self {
        Self {
            tokens: (0..vocab.size())
                .map(|i| vocab.token_str(i as TokenId).unwrap().to_owned())
                .collect(),
            eos: vocab.eos_id(),
            embedding_dim: table.dim(),
            embeddings: (0..vocab.size())
                .map(|i| table.vector(i as TokenId).unwrap().to_vec())
                .collect(),
        }
    }
}

/// Loads `{vocabulary, embeddings}` from the JSON document format.
pub fn load_vocab_json(json: &str) -> Result<(Vocabulary, EmbeddingTable<Prob>), String> {
    let file: VocabFile = serde_json::from_str(json).map_err(|e| e.to_string())?;
    file.into_parts().map_err(|e| e.to_string())
}
