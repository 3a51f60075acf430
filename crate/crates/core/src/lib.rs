//! Collaborative speculative inference engine.
//!
//! A cluster of small domain-specialized drafter models cooperatively
//! generates draft token trees (request routing + confidence-based token
//! fusion), a target model verifies them with distribution-preserving
//! rejection sampling, and a scheduler co-optimizes batch composition and
//! per-request speculation budgets. A discrete-event simulator drives the
//! whole loop in either sequential or pipelined (draft ‖ verify) mode and
//! reports latency, throughput and cost metrics; a token-level wire
//! protocol lets drafter workers run out of process over real transports.
//!
//! Module map:
//!
//! - [`vocab`], [`dist`], [`embed`]: vocabulary, token sequences,
//!   probability distributions and embedding tables shared by everything.
//! - [`models`]: the next-token-distribution model abstraction plus toy
//!   tabular implementations standing in for drafters and the target.
//! - [`verify`]: acceptance-rejection verification of linear drafts and
//!   draft trees, residual resampling, bonus token.
//! - [`drafting`]: routing scores, explore/exploit node selection,
//!   cooperative generation with token fusion, draft-tree assembly.
//! - [`scheduler`]: latency models, feasibility constraints, the batch
//!   assignment objective, adaptive speculation trimming, calibration.
//! - [`pipeline`]: request pool, event clock, end-to-end engine, metrics,
//!   trace persistence and replay, bundled synthetic workload.
//! - [`net`]: length-prefixed frame codec, transports, coordinator round
//!   and drafter workers for wall-clock mode.
//! - [`oracle`]: exhaustive enumeration checks that the verification
//!   operators preserve the target distribution exactly.
//!
//! The numeric core is generic over the scalar type (see [`scalar`]);
//! the engine itself runs on the [`Prob`]/[`Dist`] aliases below.

pub mod dist;
pub mod drafting;
pub mod embed;
pub mod models;
pub mod net;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod scheduler;
pub mod verify;
pub mod vocab;

/// Scalar type probabilities and scores are stored in.
pub type Prob = f64;

/// Probability distribution over the vocabulary, as used by the engine.
pub type Dist = dist::Distribution<Prob>;

/// Embedding table as used by the engine.
pub type Embeddings = embed::EmbeddingTable<Prob>;

/// Identifier of a drafter node in the speculation cluster.
pub type NodeId = u32;

/// Identifier of an inference request.
pub type RequestId = u64;
