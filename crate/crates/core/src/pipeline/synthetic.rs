//! Bundled synthetic benchmark: three content domains, a shared target
//! model with strong per-domain structure, and drafters specialized by
//! mixing a generic base table with one domain's table.
//!
//! Prompts open with a domain marker token, and the target then walks a
//! deterministic-ish chain inside that domain's token block. A drafter
//! specialized for the domain predicts the chain almost perfectly; the
//! other drafters fall back to their own blocks and get rejected at the
//! first token. That expertise gap is what routing is supposed to find.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::dist::Distribution;
use crate::drafting::RoutingPolicy;
use crate::embed::EmbeddingTable;
use crate::models::{specialize, DomainProfile, TabularModel};
use crate::rng::{SeededSource, UniformSource};
use crate::scheduler::{LatencyModel, SchedulerConfig};
use crate::vocab::{TokenId, Vocabulary};
use crate::{Dist, Embeddings};

use super::{AffineLat, ClusterSpec, DrafterSpec, Setup, VerifierSpec, WorkloadItem};

pub const N_DOMAINS: usize = 3;
pub const TOKENS_PER_DOMAIN: usize = 9;
pub const DOMAIN_NAMES: [&str; N_DOMAINS] = ["code", "prose", "math"];

/// vocab: markers `0..3`, content blocks of 9, then eos.
pub const VOCAB_SIZE: usize = N_DOMAINS + N_DOMAINS * TOKENS_PER_DOMAIN + 1;

pub fn marker(domain: usize) -> TokenId {
    domain as TokenId
}

pub fn content(domain: usize, j: usize) -> TokenId {
    (N_DOMAINS + domain * TOKENS_PER_DOMAIN + j) as TokenId
}

pub fn eos() -> TokenId {
    (VOCAB_SIZE - 1) as TokenId
}

fn domain_of(token: TokenId) -> Option<usize> {
    let t = token as usize;
    if t < N_DOMAINS {
        Some(t)
    } else if t < N_DOMAINS + N_DOMAINS * TOKENS_PER_DOMAIN {
        Some((t - N_DOMAINS) / TOKENS_PER_DOMAIN)
    } else {
        None
    }
}

pub fn vocabulary() -> Vocabulary {
    let mut tokens: Vec<String> = DOMAIN_NAMES.iter().map(|d| format!("<{d}>")).collect();
    for (d, name) in DOMAIN_NAMES.iter().enumerate() {
        for j in 0..TOKENS_PER_DOMAIN {
            let _ = d;
            tokens.push(format!("{name}{j}"));
        }
    }
    tokens.push("<eos>".into());
    Vocabulary::new(tokens, eos()).expect("synthetic vocabulary is valid")
}

/// One-hot embeddings with a small shared component per domain block, so
/// same-domain tokens are slightly similar and cross-domain ones are
/// orthogonal.
pub fn embeddings() -> Embeddings {
    let dim = VOCAB_SIZE + N_DOMAINS + 1;
    let vectors: Vec<Vec<f64>> = (0..VOCAB_SIZE)
        .map(|t| {
            let mut e = vec![0.0; dim];
            e[t] = 1.0;
            let block = domain_of(t as TokenId).unwrap_or(N_DOMAINS);
            e[VOCAB_SIZE + block] = 0.2;
            e
        })
        .collect();
    EmbeddingTable::new(dim, vectors).expect("synthetic embeddings are valid")
}

fn point_masses(pairs: &[(TokenId, f64)]) -> Dist {
    let mut p = vec![0.0; VOCAB_SIZE];
    for (t, w) in pairs {
        p[*t as usize] += w;
    }
    Distribution::new(p).expect("weights sum to one")
}

fn domain_chain_dist(domain: usize, j: usize) -> Dist {
    point_masses(&[
        (content(domain, (j + 1) % TOKENS_PER_DOMAIN), 0.7),
        (content(domain, (j + 5) % TOKENS_PER_DOMAIN), 0.2),
        (content(domain, (j + 2) % TOKENS_PER_DOMAIN), 0.1),
    ])
}

fn domain_start_dist(domain: usize) -> Dist {
    let mut pairs = vec![(content(domain, 0), 0.75), (content(domain, 1), 0.15)];
    let rest = 0.10 / (TOKENS_PER_DOMAIN - 2) as f64;
    for j in 2..TOKENS_PER_DOMAIN {
        pairs.push((content(domain, j), rest));
    }
    point_masses(&pairs)
}

fn uniform_content() -> Dist {
    let w = 1.0 / (N_DOMAINS * TOKENS_PER_DOMAIN) as f64;
    let pairs: Vec<(TokenId, f64)> = (0..N_DOMAINS)
        .flat_map(|d| (0..TOKENS_PER_DOMAIN).map(move |j| (content(d, j), w)))
        .collect();
    point_masses(&pairs)
}

fn uniform_domain(domain: usize) -> Dist {
    let w = 1.0 / TOKENS_PER_DOMAIN as f64;
    let pairs: Vec<(TokenId, f64)> = (0..TOKENS_PER_DOMAIN)
        .map(|j| (content(domain, j), w))
        .collect();
    point_masses(&pairs)
}

/// The target follows every domain's chain.
pub fn target_model() -> TabularModel {
    let mut entries = BTreeMap::new();
    for d in 0..N_DOMAINS {
        entries.insert(vec![marker(d)], domain_start_dist(d));
        for j in 0..TOKENS_PER_DOMAIN {
            entries.insert(vec![content(d, j)], domain_chain_dist(d, j));
        }
    }
    TabularModel::new(1, entries, uniform_content()).expect("target model is valid")
}

/// Generic base drafter: no structure at all, uniform over content.
pub fn base_model() -> TabularModel {
    TabularModel::new(1, BTreeMap::new(), uniform_content()).expect("base model is valid")
}

/// Table an expert on `domain` would have: the target's rules inside the
/// domain, uniform in-domain fallback elsewhere.
pub fn domain_table(domain: usize) -> TabularModel {
    let mut entries = BTreeMap::new();
    entries.insert(vec![marker(domain)], domain_start_dist(domain));
    for j in 0..TOKENS_PER_DOMAIN {
        entries.insert(vec![content(domain, j)], domain_chain_dist(domain, j));
    }
    TabularModel::new(1, entries, uniform_domain(domain)).expect("domain table is valid")
}

/// A drafter specialized for `domain` at the given bias strength.
pub fn specialized_drafter(domain: usize, bias: f64) -> TabularModel {
    let profile = DomainProfile::new(DOMAIN_NAMES[domain], bias).expect("bias in range");
    specialize(&base_model(), &profile, &domain_table(domain)).expect("tables share vocab")
}

/// Full engine setup with three specialized drafters. Latency and cost
/// rates use the bundled defaults (two budget-class drafters and one
/// premium drafter against a datacenter-class verifier).
pub fn three_domain_setup(bias: f64) -> Setup {
    let drafter_rates = [0.12, 0.12, 0.22];
    let cluster = ClusterSpec {
        drafters: (0..N_DOMAINS)
            .map(|d| DrafterSpec {
                model: Arc::new(specialized_drafter(d, bias)),
                domain: DOMAIN_NAMES[d].into(),
                cost_per_hour: drafter_rates[d],
                latency: AffineLat {
                    base: 2.0,
                    per_batch: 0.1,
                    per_len: 0.01,
                    per_token: 0.5,
                },
            })
            .collect(),
        verifier: VerifierSpec {
            model: Arc::new(target_model()),
            cost_per_hour: 5.67,
            latency: AffineLat {
                base: 8.0,
                per_batch: 0.4,
                per_len: 0.02,
                per_token: 0.3,
            },
        },
    };
    Setup {
        vocab: vocabulary(),
        embeddings: embeddings(),
        cluster,
        // Token cap sized so a backlog does not trim every budget to the
        // floor; batches stay capped by latency instead.
        sched: SchedulerConfig {
            gamma_max: 192,
            t_max_ms: 60.0,
            ..SchedulerConfig::default()
        },
        planner: LatencyModel {
            s0: 2.0,
            s_b: 0.1,
            s_l: 0.01,
            s_g: 0.5,
            v0: 8.0,
            v_b: 0.4,
            v_l: 0.02,
            v_g: 0.3,
        },
        routing: RoutingPolicy::default(),
        queue_low: 0,
        queue_high: usize::MAX,
    }
}

/// Seeded workload: `n` requests cycling through the domains, exponential
/// inter-arrival times with the given mean, prompts of the form
/// `[marker, random in-domain content token]`.
pub fn three_domain_workload(
    n: usize,
    mean_interarrival_ms: f64,
    max_new: usize,
    seed: u64,
) -> Vec<WorkloadItem> {
    let mut src = SeededSource::derive(seed, &[0x3d0]);
    let mut t = 0.0f64;
    (0..n)
        .map(|i| {
            let d = i % N_DOMAINS;
            let j = (src.next_uniform() * TOKENS_PER_DOMAIN as f64) as usize % TOKENS_PER_DOMAIN;
            let item = WorkloadItem {
                arrival_ms: t,
                prompt: vec![marker(d), content(d, j)],
                max_new,
                domain: DOMAIN_NAMES[d].into(),
            };
            // Exponential inter-arrival.
            let u = src.next_uniform().max(1e-12);
            t += -mean_interarrival_ms * u.ln();
            item
        })
        .collect()
}
