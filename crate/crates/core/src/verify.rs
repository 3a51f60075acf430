//! Distribution-preserving verification of draft sequences and trees.
//!
//! Linear verification follows the classic acceptance-rejection rule:
//! accept draft token `x` with probability `min(1, o(x)/q(x))`, resample
//! the first rejection from the residual `norm(max{0, o - q})`, and sample
//! one bonus token from the target when every draft survives. Either way
//! exactly one non-draft token is appended, so the emitted token at each
//! position is marginally distributed as the target conditional.
//!
//! Tree verification generalizes this to sibling candidates: children are
//! tried in stored order, and after rejecting a child its drafter
//! distribution — restricted to the tokens not already tried at this depth
//! and renormalized — is subtracted from the running residual. Under the
//! matching without-replacement draft model this preserves the target
//! distribution exactly, which is what the enumeration oracle checks.
//!
//! Randomness discipline: the uniform accept draw for a trial is consumed
//! before any residual/bonus sampling, and every categorical sample uses a
//! single inverse-CDF draw. This fixed draw order is what makes scripted
//! replay (and hence the oracle) possible.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::dist::{DistError, Distribution};
use crate::models::Model;
use crate::rng::UniformSource;
use crate::vocab::{TokenId, TokenSeq};
use crate::{Dist, NodeId};

#[derive(Debug, Error, PartialEq)]
pub enum VerifyError {
    #[error("draft length {0} does not match distribution count {1}")]
    LengthMismatch(usize, usize),
    #[error("empty draft")]
    EmptyDraft,
    #[error("drafter claimed token {token} at step {step} but assigns it zero probability")]
    ZeroDraftProb { step: usize, token: TokenId },
    #[error("invalid draft tree: {0}")]
    BadTree(String),
    #[error("distribution error: {0}")]
    Dist(#[from] DistError),
}

/// Outcome of verifying one request's draft against the target.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationResult {
    /// Tokens appended to the request: accepted draft tokens plus the
    /// trailing resampled or bonus token.
    pub accepted: TokenSeq,
    /// Number of draft tokens accepted before the first rejection.
    pub accept_len: usize,
    /// Per drafter node, the sequence that node drafted this round
    /// (filled in by the caller for routing-score updates).
    pub per_node_draft: BTreeMap<NodeId, TokenSeq>,
    /// Position of the first rejection, if any.
    pub rejected_at: Option<usize>,
}

/// One node of a draft tree. `children` are stored in verification trial
/// order; construction sorts them by descending draft probability with
/// ties broken by ascending token id.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftTreeNode {
    pub token: TokenId,
    /// Probability the drafter assigned to `token` when it proposed it.
    pub draft_prob: f64,
    /// Which drafter proposed this token.
    pub drafter: NodeId,
    /// The drafter's full step distribution (needed for residuals).
    pub dist: Dist,
    pub children: Vec<DraftTreeNode>,
}

/// Rooted draft token tree; the implicit root is the last verified token.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DraftTree {
    pub children: Vec<DraftTreeNode>,
}

impl DraftTree {
    /// Checks sibling-token distinctness and the depth bound.
    pub fn validate(&self, max_depth: usize) -> Result<(), VerifyError> {
        fn walk(
            nodes: &[DraftTreeNode],
            depth: usize,
            max_depth: usize,
        ) -> Result<(), VerifyError> {
            if !nodes.is_empty() && depth > max_depth {
                return Err(VerifyError::BadTree(format!(
                    "path length exceeds max depth {max_depth}"
                )));
            }
            let mut seen = std::collections::BTreeSet::new();
            for n in nodes {
                if !seen.insert(n.token) {
                    return Err(VerifyError::BadTree(format!(
                        "duplicate sibling token {}",
                        n.token
                    )));
                }
                walk(&n.children, depth + 1, max_depth)?;
            }
            Ok(())
        }
        walk(&self.children, 1, max_depth)
    }

    pub fn node_count(&self) -> usize {
        fn count(nodes: &[DraftTreeNode]) -> usize {
            nodes.iter().map(|n| 1 + count(&n.children)).sum()
        }
        count(&self.children)
    }

    pub fn depth(&self) -> usize {
        fn depth(nodes: &[DraftTreeNode]) -> usize {
            nodes
                .iter()
                .map(|n| 1 + depth(&n.children))
                .max()
                .unwrap_or(0)
        }
        depth(&self.children)
    }

    /// Builds a single-chain tree from a linear draft.
    pub fn chain(tokens: &[TokenId], dists: &[Dist], drafter: NodeId) -> Self {
        let mut tree = DraftTree::default();
        let mut cursor = &mut tree.children;
        for (t, d) in tokens.iter().zip(dists) {
            cursor.push(DraftTreeNode {
                token: *t,
                draft_prob: d.get(*t),
                drafter,
                dist: d.clone(),
                children: Vec::new(),
            });
            cursor = &mut cursor.last_mut().unwrap().children;
        }
        tree
    }
}

/// Verifies a linear draft of length γ. Exactly one non-draft token is
/// appended: the residual resample at the first rejection, or the bonus
/// token when all γ drafts are accepted.
pub fn verify_linear(
    target: &dyn Model,
    prefix: &TokenSeq,
    draft: &[TokenId],
    draft_dists: &[Dist],
    rng: &mut dyn UniformSource,
) -> Result<VerificationResult, VerifyError> {
    if draft.is_empty() {
        return Err(VerifyError::EmptyDraft);
    }
    if draft.len() != draft_dists.len() {
        return Err(VerifyError::LengthMismatch(draft.len(), draft_dists.len()));
    }

    let mut ctx = prefix.clone();
    let mut accepted = TokenSeq::new();

    for (step, (&token, q)) in draft.iter().zip(draft_dists).enumerate() {
        let o = target.next_distribution(&ctx);
        let qx = q.get(token);
        if qx == 0.0 {
            return Err(VerifyError::ZeroDraftProb { step, token });
        }
        let accept_p = (o.get(token) / qx).min(1.0);
        let u = rng.next_uniform();
        if u < accept_p {
            accepted.push(token);
            ctx.push(token);
            continue;
        }
        // First rejection: resample from the residual and stop.
        let replacement = match Distribution::residual(&o, q) {
            Ok(res) => res.sample(rng),
            Err(DistError::DegenerateResidual) => o.sample(rng),
            Err(e) => return Err(e.into()),
        };
        accepted.push(replacement);
        return Ok(VerificationResult {
            accept_len: step,
            accepted,
            per_node_draft: BTreeMap::new(),
            rejected_at: Some(step),
        });
    }

    // Every draft accepted: bonus token from the target.
    let bonus = sample_bonus(target, &ctx, rng);
    accepted.push(bonus);
    Ok(VerificationResult {
        accept_len: draft.len(),
        accepted,
        per_node_draft: BTreeMap::new(),
        rejected_at: None,
    })
}

/// Samples the extra token from the target's conditional after a fully
/// accepted draft.
pub fn sample_bonus(
    target: &dyn Model,
    full_prefix: &TokenSeq,
    rng: &mut dyn UniformSource,
) -> TokenId {
    target.next_distribution(full_prefix).sample(rng)
}

/// Verifies a draft tree. At each depth the current node's children are
/// tried in stored order with multi-candidate rejection: candidate `x`
/// with drafter distribution `q` is accepted with probability
/// `min(1, o'(x)/q̃(x))`, where `q̃` is `q` restricted to tokens not
/// already tried at this depth; on rejection `o' ← norm(max{0, o' − q̃})`.
/// If every child is rejected the final residual is sampled and the walk
/// stops; accepting a leaf appends a bonus token.
pub fn verify_tree(
    target: &dyn Model,
    prefix: &TokenSeq,
    tree: &DraftTree,
    rng: &mut dyn UniformSource,
) -> Result<VerificationResult, VerifyError> {
    if tree.children.is_empty() {
        return Err(VerifyError::EmptyDraft);
    }

    let mut ctx = prefix.clone();
    let mut accepted = TokenSeq::new();
    let mut accept_len = 0usize;
    let mut depth = 0usize;
    let mut children = &tree.children;

    loop {
        let o = target.next_distribution(&ctx);
        let mut residual = o.clone();
        let mut residual_degenerate = false;
        let mut tried: Vec<TokenId> = Vec::new();
        let mut chosen: Option<&DraftTreeNode> = None;

        for child in children {
            if child.dist.get(child.token) == 0.0 {
                return Err(VerifyError::ZeroDraftProb {
                    step: depth,
                    token: child.token,
                });
            }
            // Drafter distribution conditioned on the siblings already tried.
            let q = match child.dist.restricted(&tried) {
                Some(q) => q,
                // All drafter mass sits on already-tried tokens: the
                // candidate carries no usable probability; skip it without
                // touching the residual.
                None => continue,
            };
            debug_assert!(q.get(child.token) > 0.0);
            let accept_p = if residual_degenerate {
                0.0
            } else {
                (residual.get(child.token) / q.get(child.token)).min(1.0)
            };
            let u = rng.next_uniform();
            if u < accept_p {
                chosen = Some(child);
                break;
            }
            tried.push(child.token);
            if !residual_degenerate {
                match Distribution::residual(&residual, &q) {
                    Ok(r) => residual = r,
                    Err(DistError::DegenerateResidual) => residual_degenerate = true,
                    Err(e) => return Err(e.into()),
                }
            }
        }

        match chosen {
            Some(node) => {
                accepted.push(node.token);
                ctx.push(node.token);
                accept_len += 1;
                depth += 1;
                if node.children.is_empty() {
                    let bonus = sample_bonus(target, &ctx, rng);
                    accepted.push(bonus);
                    return Ok(VerificationResult {
                        accepted,
                        accept_len,
                        per_node_draft: BTreeMap::new(),
                        rejected_at: None,
                    });
                }
                children = &node.children;
            }
            None => {
                // All children rejected: emit from the final residual.
                // When the chain went degenerate, `residual` still holds
                // the last distribution with mass, which is exactly what
                // the process should emit from.
                let replacement = residual.sample(rng);
                accepted.push(replacement);
                return Ok(VerificationResult {
                    accepted,
                    accept_len,
                    per_node_draft: BTreeMap::new(),
                    rejected_at: Some(depth),
                });
            }
        }
    }
}
