//! Model abstraction and toy tabular implementations.
//!
//! A model maps a context to a next-token distribution, deterministically.
//! The toy stand-ins are context-table lookups: the target is a
//! higher-order table, drafters are lower-order or domain-biased tables,
//! which creates a controllable acceptance-rate gap without any ML stack.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::Distribution;
use crate::vocab::{TokenId, TokenSeq};
use crate::Dist;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("vocabulary size mismatch: {0} vs {1}")]
    VocabMismatch(usize, usize),
    #[error("order mismatch: {0} vs {1}")]
    OrderMismatch(usize, usize),
    #[error("context {0:?} longer than model order {1}")]
    ContextTooLong(Vec<TokenId>, usize),
    #[error("bias strength {0} outside [0, 1]")]
    BadBias(f64),
    #[error("invalid distribution in model file: {0}")]
    BadDistribution(String),
    #[error("model file parse error: {0}")]
    Parse(String),
}

/// Next-token distribution given a context. Implementations must be pure:
/// the same context always yields the same distribution.
pub trait Model: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn next_distribution(&self, context: &TokenSeq) -> Dist;
}

/// Table-driven n-gram model: looks up the length-`order` context suffix,
/// falling back to a default distribution for unseen contexts.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularModel {
    order: usize,
    entries: BTreeMap<Vec<TokenId>, Dist>,
    fallback: Dist,
}

impl TabularModel {
    pub fn new(
        order: usize,
        entries: BTreeMap<Vec<TokenId>, Dist>,
        fallback: Dist,
    ) -> Result<Self, ModelError> {
        let v = fallback.len();
        for (ctx, dist) in &entries {
            if ctx.len() > order {
                return Err(ModelError::ContextTooLong(ctx.clone(), order));
            }
            if dist.len() != v {
                return Err(ModelError::VocabMismatch(dist.len(), v));
            }
        }
        Ok(Self {
            order,
            entries,
            fallback,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn fallback(&self) -> &Dist {
        &self.fallback
    }

    pub fn entries(&self) -> &BTreeMap<Vec<TokenId>, Dist> {
        &self.entries
    }

    pub fn from_json(json: &str) -> Result<Self, ModelError> {
        let file: ModelFile =
            serde_json::from_str(json).map_err(|e| ModelError::Parse(e.to_string()))?;
        file.into_model()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelFile::from_model(self)).expect("model serializes")
    }
}

impl Model for TabularModel {
    fn vocab_size(&self) -> usize {
        self.fallback.len()
    }

    fn next_distribution(&self, context: &TokenSeq) -> Dist {
        let key = context.suffix(self.order);
        self.entries
            .get(key)
            .cloned()
            .unwrap_or_else(|| self.fallback.clone())
    }
}

/// Domain expertise profile: how strongly a drafter's table is pulled
/// toward a domain-specific table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainProfile {
    pub domain_id: String,
    pub bias_strength: f64,
}

impl DomainProfile {
    pub fn new(domain_id: impl Into<String>, bias_strength: f64) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&bias_strength) {
            return Err(ModelError::BadBias(bias_strength));
        }
        Ok(Self {
            domain_id: domain_id.into(),
            bias_strength,
        })
    }
}

/// Mixes `base` with `domain_table` per context:
/// `(1 - bias)·base + bias·domain`, renormalized.
pub fn specialize(
    base: &TabularModel,
    profile: &DomainProfile,
    domain_table: &TabularModel,
) -> Result<TabularModel, ModelError> {
    if base.vocab_size() != domain_table.vocab_size() {
        return Err(ModelError::VocabMismatch(
            base.vocab_size(),
            domain_table.vocab_size(),
        ));
    }
    if base.order != domain_table.order {
        return Err(ModelError::OrderMismatch(base.order, domain_table.order));
    }
    let bias = profile.bias_strength;
    let mix = |b: &Dist, d: &Dist| -> Dist {
        let weights: Vec<f64> = b
            .probs()
            .iter()
            .zip(d.probs())
            .map(|(pb, pd)| (1.0 - bias) * pb + bias * pd)
            .collect();
        Distribution::from_weights(weights).expect("mix of distributions has mass")
    };

    let mut keys: Vec<Vec<TokenId>> = base.entries.keys().cloned().collect();
    for k in domain_table.entries.keys() {
        if !base.entries.contains_key(k) {
            keys.push(k.clone());
        }
    }
    let mut entries = BTreeMap::new();
    for key in keys {
        let ctx = TokenSeq::from_ids(key.clone());
        let b = base.next_distribution(&ctx);
        let d = domain_table.next_distribution(&ctx);
        entries.insert(key, mix(&b, &d));
    }
    let fallback = mix(&base.fallback, &domain_table.fallback);
    TabularModel::new(base.order, entries, fallback)
}

/// On-disk model format:
/// `{"order":n, "fallback":[...], "entries":[{"ctx":[...], "probs":[...]}]}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub order: usize,
    pub fallback: Vec<f64>,
    pub entries: Vec<ModelEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelEntry {
    pub ctx: Vec<TokenId>,
    pub probs: Vec<f64>,
}

impl ModelFile {
    pub fn into_model(self) -> Result<TabularModel, ModelError> {
        let fallback = Distribution::new(self.fallback)
            .map_err(|e| ModelError::BadDistribution(e.to_string()))?;
        let mut entries = BTreeMap::new();
        for e in self.entries {
            let dist = Distribution::new(e.probs)
                .map_err(|err| ModelError::BadDistribution(format!("ctx {:?}: {err}", e.ctx)))?;
            entries.insert(e.ctx, dist);
        }
        TabularModel::new(self.order, entries, fallback)
    }

    pub fn from_model(m: &TabularModel) -> Self {
        Self {
            order: m.order,
            fallback: m.fallback.probs().to_vec(),
            entries: m
                .entries
                .iter()
                .map(|(ctx, dist)| ModelEntry {
                    ctx: ctx.clone(),
                    probs: dist.probs().to_vec(),
                })
                .collect(),
        }
    }
}
