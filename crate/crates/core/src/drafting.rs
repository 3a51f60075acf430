//! Cooperative draft generation: request routing, confidence-based token
//! fusion, draft-tree assembly, and routing-score feedback.
//!
//! Each drafting round keeps two branches per participating node:
//!
//! - the node's *own* branch, a pure greedy decode under its own context;
//! - a shared *fused* branch, where every node proposes a continuation of
//!   the fused context and the coordinator keeps the highest-confidence
//!   proposal as the next fused token and broadcasts it.
//!
//! Both families of sequences are merged into a prefix tree and pruned to
//! the speculation budget by cumulative confidence. Verification feedback
//! (per-position draft accuracies from embedding similarity) updates the
//! per-request routing scores via a normalized harmonic mean of confidence
//! and accuracy.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::embed::EmbeddingTable;
use crate::models::Model;
use crate::rng::UniformSource;
use crate::scalar::Real;
use crate::verify::{DraftTree, DraftTreeNode, VerificationResult};
use crate::vocab::{TokenId, TokenSeq};
use crate::{Dist, NodeId, Prob, RequestId};

/// Clamp bound keeping confidences/accuracies strictly inside (0, 1)
/// before they enter the routing score.
pub const SCORE_CLAMP_EPS: f64 = 1e-3;

/// Uninformative prior for routing scores; the fixed point of the score
/// formula at c = d = 1/2.
pub const ROUTING_PRIOR: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum DraftingError {
    #[error("no candidates to fuse")]
    NoCandidates,
    #[error("confidence/accuracy vectors have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("policy invalid: {0}")]
    BadPolicy(String),
    #[error("no drafter nodes selected")]
    NoNodes,
    #[error("embedding lookup failed: {0}")]
    Embedding(String),
}

/// Exploration/exploitation routing policy (coefficients of the
/// probabilistic mixture of top-scoring and random selection).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RoutingPolicy {
    /// Weight of top-scoring selection in exploration mode.
    pub alpha: f64,
    /// Weight of top-scoring selection in exploitation mode.
    pub beta: f64,
    /// Acceptance-length threshold separating the two modes.
    pub tau: usize,
    /// Number of drafters selected per request.
    pub fanout: usize,
    /// Per-round decay of non-participating nodes' scores toward the prior.
    pub decay: f64,
    /// Seed new requests' rows with column means instead of the prior.
    #[serde(default)]
    pub inherit_prior: bool,
}

impl Default for RoutingPolicy {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            beta: 0.3,
            tau: 2,
            fanout: 2,
            decay: 0.9,
            inherit_prior: false,
        }
    }
}

impl RoutingPolicy {
    pub fn validate(&self, n_nodes: usize) -> Result<(), DraftingError> {
        if !(self.alpha > self.beta && self.alpha <= 1.0 && self.beta >= 0.0) {
            return Err(DraftingError::BadPolicy(format!(
                "need 1 >= alpha > beta >= 0, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if self.fanout < 1 || self.fanout > n_nodes {
            return Err(DraftingError::BadPolicy(format!(
                "fanout {} outside [1, {n_nodes}]",
                self.fanout
            )));
        }
        if !(0.0..=1.0).contains(&self.decay) {
            return Err(DraftingError::BadPolicy(format!("decay {}", self.decay)));
        }
        Ok(())
    }
}

/// Per-request, per-node routing scores in (0, 1).
#[derive(Debug, Clone, Default)]
pub struct RoutingMatrix {
    rows: BTreeMap<RequestId, Vec<Prob>>,
    n_nodes: usize,
}

impl RoutingMatrix {
    pub fn new(n_nodes: usize) -> Self {
        Self {
            rows: BTreeMap::new(),
            n_nodes,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn insert_request(&mut self, req: RequestId) {
        self.rows
            .entry(req)
            .or_insert_with(|| vec![ROUTING_PRIOR; self.n_nodes]);
    }

    /// Inserts a row seeded with the current column means, so a new
    /// request starts from what the pool already learned about each node.
    /// Falls back to the uninformative prior when the pool is empty.
    pub fn insert_request_inheriting(&mut self, req: RequestId) {
        if self.rows.contains_key(&req) {
            return;
        }
        let row = if self.rows.is_empty() {
            vec![ROUTING_PRIOR; self.n_nodes]
        } else {
            let mut sums = vec![0.0; self.n_nodes];
            for r in self.rows.values() {
                for (s, v) in sums.iter_mut().zip(r) {
                    *s += v;
                }
            }
            let n = self.rows.len() as Prob;
            sums.into_iter().map(|s| s / n).collect()
        };
        self.rows.insert(req, row);
    }

    pub fn remove_request(&mut self, req: RequestId) {
        self.rows.remove(&req);
    }

    pub fn row(&self, req: RequestId) -> Option<&[Prob]> {
        self.rows.get(&req).map(Vec::as_slice)
    }

    pub fn row_mut(&mut self, req: RequestId) -> Option<&mut Vec<Prob>> {
        self.rows.get_mut(&req)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// One drafting round's record for a single node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeBranches {
    pub node: NodeId,
    /// Own-branch tokens with greedy confidences, length K.
    pub own: Vec<(TokenId, Prob)>,
    /// Full step distributions along the own branch.
    pub own_dists: Vec<Dist>,
    /// Fused-branch proposals with confidences, length K.
    pub proposals: Vec<(TokenId, Prob)>,
    /// Full step distributions along the fused branch.
    pub proposal_dists: Vec<Dist>,
}

/// Output of one cooperative drafting round across the selected nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftRound {
    pub k: usize,
    pub branches: Vec<NodeBranches>,
    /// Fused token per iteration: (token, confidence, winning node).
    pub fused: Vec<(TokenId, Prob, NodeId)>,
}

impl DraftRound {
    /// The length-K draft each node produced on its own branch, for
    /// accuracy scoring.
    pub fn per_node_draft(&self) -> BTreeMap<NodeId, TokenSeq> {
        self.branches
            .iter()
            .map(|b| {
                (
                    b.node,
                    TokenSeq::from_ids(b.own.iter().map(|(t, _)| *t).collect()),
                )
            })
            .collect()
    }
}

/// Per-position draft accuracy: cosine similarity between the embeddings
/// of the accepted token and the drafted token for positions before the
/// acceptance length, zero afterwards. Values lie in [-1, 1].
pub fn draft_accuracy(
    draft: &TokenSeq,
    accepted: &TokenSeq,
    accept_len: usize,
    table: &EmbeddingTable<Prob>,
) -> Result<Vec<Prob>, DraftingError> {
    let mut out = vec![0.0; draft.len()];
    let upto = accept_len.min(draft.len()).min(accepted.len());
    for i in 0..upto {
        out[i] = table
            .token_sim(accepted[i], draft[i])
            .map_err(|e| DraftingError::Embedding(e.to_string()))?;
    }
    Ok(out)
}

fn clamp_unit(x: f64) -> f64 {
    x.clamp(SCORE_CLAMP_EPS, 1.0 - SCORE_CLAMP_EPS)
}

/// Normalized harmonic-mean routing score
/// `m = (1/K) Σ c·d / (c·d + (1−c)(1−d))`, strictly inside (0, 1) and
/// monotone in every confidence and accuracy. Inputs are clamped to
/// `[eps, 1−eps]` first.
pub fn routing_score<S: Real>(confidences: &[S], accuracies: &[S]) -> Result<S, DraftingError> {
    if confidences.len() != accuracies.len() {
        return Err(DraftingError::LengthMismatch(
            confidences.len(),
            accuracies.len(),
        ));
    }
    if confidences.is_empty() {
        return Err(DraftingError::NoCandidates);
    }
    let eps = S::from_f64(SCORE_CLAMP_EPS).unwrap();
    let one = S::one();
    let clamp = |x: S| {
        if x < eps {
            eps
        } else if x > one - eps {
            one - eps
        } else {
            x
        }
    };
    let mut sum = S::zero();
    for (c, d) in confidences.iter().zip(accuracies) {
        let c = clamp(*c);
        let d = clamp(*d);
        let num = c * d;
        let den = num + (one - c) * (one - d);
        sum = sum + num / den;
    }
    Ok(sum / S::from_usize(confidences.len()).unwrap())
}

/// Selects `fanout` distinct drafter nodes for a request. Each slot is
/// filled by the top-scoring remaining node with probability α (β in
/// exploitation mode, i.e. when the last acceptance length reached τ) and
/// by a uniformly random remaining node otherwise.
pub fn route_request(
    row: &[Prob],
    policy: &RoutingPolicy,
    accept_len: usize,
    rng: &mut dyn UniformSource,
) -> Result<Vec<NodeId>, DraftingError> {
    route_request_with_fanout(row, policy, policy.fanout, accept_len, rng)
}

/// [`route_request`] with an explicit fanout (the pipeline scales node
/// participation with verifier load).
pub fn route_request_with_fanout(
    row: &[Prob],
    policy: &RoutingPolicy,
    fanout: usize,
    accept_len: usize,
    rng: &mut dyn UniformSource,
) -> Result<Vec<NodeId>, DraftingError> {
    policy.validate(row.len())?;
    let fanout = fanout.clamp(1, row.len());
    let top_coef = if accept_len < policy.tau {
        policy.alpha
    } else {
        policy.beta
    };

    let mut remaining: Vec<NodeId> = (0..row.len() as NodeId).collect();
    let mut selected = Vec::with_capacity(fanout);
    for _ in 0..fanout {
        let u = rng.next_uniform();
        let idx = if u < top_coef {
            // Top-scoring remaining node; ties resolved by lowest node id.
            let mut best = 0usize;
            for i in 1..remaining.len() {
                if row[remaining[i] as usize] > row[remaining[best] as usize] {
                    best = i;
                }
            }
            best
        } else {
            (rng.next_uniform() * remaining.len() as f64) as usize % remaining.len()
        };
        // Order-preserving removal keeps `remaining` ascending, which is
        // what makes the lowest-node-id tie-break hold across slots.
        selected.push(remaining.remove(idx));
    }
    selected.sort_unstable();
    Ok(selected)
}

/// Picks the candidate with maximum confidence; ties broken by lowest
/// node id, then lowest token id.
pub fn fuse_step(
    candidates: &[(NodeId, TokenId, Prob)],
) -> Result<(TokenId, NodeId), DraftingError> {
    let mut best: Option<&(NodeId, TokenId, Prob)> = None;
    for c in candidates {
        best = Some(match best {
            None => c,
            Some(b) => {
                if c.2 > b.2 || (c.2 == b.2 && (c.0 < b.0 || (c.0 == b.0 && c.1 < b.1))) {
                    c
                } else {
                    b
                }
            }
        });
    }
    best.map(|(n, t, _)| (*t, *n))
        .ok_or(DraftingError::NoCandidates)
}

/// One node's contribution to one drafting iteration: the greedy
/// continuation of its own branch and of the shared fused branch.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStep {
    pub own_token: TokenId,
    pub own_conf: Prob,
    pub own_dist: Dist,
    pub proposal_token: TokenId,
    pub proposal_conf: Prob,
    pub proposal_dist: Dist,
}

/// Computes a node's step. Shared by the in-process round and the wire
/// protocol worker so both produce identical drafts.
pub fn node_step(model: &dyn Model, own_ctx: &TokenSeq, fused_ctx: &TokenSeq) -> NodeStep {
    let own_dist = model.next_distribution(own_ctx);
    let own_token = own_dist.argmax();
    let own_conf = own_dist.get(own_token);
    let proposal_dist = model.next_distribution(fused_ctx);
    let proposal_token = proposal_dist.argmax();
    let proposal_conf = proposal_dist.get(proposal_token);
    NodeStep {
        own_token,
        own_conf,
        own_dist,
        proposal_token,
        proposal_conf,
        proposal_dist,
    }
}

/// Runs K fused drafting iterations over the selected nodes (in-process
/// reference implementation; the wire-protocol coordinator mirrors it).
///
/// Iteration i: every node greedily extends its own branch and proposes a
/// greedy continuation of the shared fused context; the proposal with the
/// highest confidence becomes fused token i and is broadcast.
pub fn cooperative_generate(
    nodes: &[(NodeId, &dyn Model)],
    prefix: &TokenSeq,
    k: usize,
) -> Result<DraftRound, DraftingError> {
    if nodes.is_empty() {
        return Err(DraftingError::NoNodes);
    }
    let mut branches: Vec<NodeBranches> = nodes
        .iter()
        .map(|(id, _)| NodeBranches {
            node: *id,
            own: Vec::with_capacity(k),
            own_dists: Vec::with_capacity(k),
            proposals: Vec::with_capacity(k),
            proposal_dists: Vec::with_capacity(k),
        })
        .collect();
    let mut own_ctx: Vec<TokenSeq> = vec![prefix.clone(); nodes.len()];
    let mut fused_ctx = prefix.clone();
    let mut fused = Vec::with_capacity(k);

    for _ in 0..k {
        let mut candidates = Vec::with_capacity(nodes.len());
        for (i, (id, model)) in nodes.iter().enumerate() {
            let step = node_step(*model, &own_ctx[i], &fused_ctx);
            branches[i].own.push((step.own_token, step.own_conf));
            branches[i]
                .proposals
                .push((step.proposal_token, step.proposal_conf));
            candidates.push((*id, step.proposal_token, step.proposal_conf));
            own_ctx[i].push(step.own_token);
            branches[i].own_dists.push(step.own_dist);
            branches[i].proposal_dists.push(step.proposal_dist);
        }
        let (tok, winner) = fuse_step(&candidates)?;
        let conf = candidates
            .iter()
            .find(|(n, t, _)| *n == winner && *t == tok)
            .map(|(_, _, c)| *c)
            .unwrap_or(0.0);
        fused.push((tok, conf, winner));
        fused_ctx.push(tok);
    }

    Ok(DraftRound { k, branches, fused })
}

struct SeqEntry<'a> {
    tokens: Vec<(TokenId, Prob, NodeId, &'a Dist)>,
}

/// Merges all branch sequences of a round (own chains plus per-step fused
/// proposals) into a prefix tree rooted at the last verified token, scores
/// nodes by the cumulative product of confidences along the path, and
/// prunes to the `budget` highest-scoring nodes (prefix-closed). Children
/// end up sorted by descending draft probability, ties by ascending token
/// id — the verification trial order.
pub fn tree_selection(round: &DraftRound, budget: usize) -> DraftTree {
    // Working tree with merge-by-prefix semantics.
    struct WorkNode {
        token: TokenId,
        prob: Prob,
        drafter: NodeId,
        dist: Dist,
        children: Vec<WorkNode>,
    }

    fn insert(nodes: &mut Vec<WorkNode>, seq: &[(TokenId, Prob, NodeId, &Dist)]) {
        if seq.is_empty() {
            return;
        }
        let (token, prob, drafter, dist) = (seq[0].0, seq[0].1, seq[0].2, seq[0].3);
        let pos = nodes.iter().position(|n| n.token == token);
        let idx = match pos {
            Some(i) => {
                // Shared prefix: keep the strongest attribution.
                if prob > nodes[i].prob {
                    nodes[i].prob = prob;
                    nodes[i].drafter = drafter;
                    nodes[i].dist = dist.clone();
                }
                i
            }
            None => {
                nodes.push(WorkNode {
                    token,
                    prob,
                    drafter,
                    dist: dist.clone(),
                    children: Vec::new(),
                });
                nodes.len() - 1
            }
        };
        insert(&mut nodes[idx].children, &seq[1..]);
    }

    let mut roots: Vec<WorkNode> = Vec::new();
    let mut sequences: Vec<SeqEntry> = Vec::new();

    let fused_prefix: Vec<(TokenId, Prob, NodeId, &Dist)> = round
        .fused
        .iter()
        .enumerate()
        .map(|(i, (t, c, w))| {
            let dist = round
                .branches
                .iter()
                .find(|b| b.node == *w)
                .map(|b| &b.proposal_dists[i])
                .expect("winner has a recorded proposal");
            (*t, *c, *w, dist)
        })
        .collect();

    for b in &round.branches {
        // Own chain.
        sequences.push(SeqEntry {
            tokens: b
                .own
                .iter()
                .zip(&b.own_dists)
                .map(|((t, c), d)| (*t, *c, b.node, d))
                .collect(),
        });
        // Fused spine up to i-1, then this node's proposal at step i.
        for i in 0..round.k {
            let mut seq: Vec<(TokenId, Prob, NodeId, &Dist)> = fused_prefix[..i].to_vec();
            let (t, c) = b.proposals[i];
            seq.push((t, c, b.node, &b.proposal_dists[i]));
            sequences.push(SeqEntry { tokens: seq });
        }
    }
    for s in &sequences {
        insert(&mut roots, &s.tokens);
    }

    // Collect path scores; prune to budget, keeping the tree prefix-closed.
    // A child's score never exceeds its parent's (confidences ≤ 1), and the
    // ordering puts parents first, so taking the top `budget` suffices.
    #[derive(Clone)]
    struct Flat {
        path: Vec<usize>,
        score: Prob,
        depth: usize,
        token: TokenId,
    }
    fn flatten(
        nodes: &[WorkNode],
        path: &mut Vec<usize>,
        score: Prob,
        depth: usize,
        out: &mut Vec<Flat>,
    ) {
        for (i, n) in nodes.iter().enumerate() {
            path.push(i);
            let s = score * clamp_unit(n.prob);
            out.push(Flat {
                path: path.clone(),
                score: s,
                depth,
                token: n.token,
            });
            flatten(&n.children, path, s, depth + 1, out);
            path.pop();
        }
    }
    let mut flat = Vec::new();
    flatten(&roots, &mut Vec::new(), 1.0, 1, &mut flat);
    flat.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.depth.cmp(&b.depth))
            .then(a.token.cmp(&b.token))
            .then(a.path.cmp(&b.path))
    });
    let kept: std::collections::BTreeSet<Vec<usize>> =
        flat.into_iter().take(budget).map(|f| f.path).collect();

    fn build(
        nodes: &[WorkNode],
        path: &mut Vec<usize>,
        kept: &std::collections::BTreeSet<Vec<usize>>,
    ) -> Vec<DraftTreeNode> {
        let mut out = Vec::new();
        for (i, n) in nodes.iter().enumerate() {
            path.push(i);
            if kept.contains(path) {
                out.push(DraftTreeNode {
                    token: n.token,
                    draft_prob: n.prob,
                    drafter: n.drafter,
                    dist: n.dist.clone(),
                    children: build(&n.children, path, kept),
                });
            }
            path.pop();
        }
        // Verification trial order.
        out.sort_by(|a, b| {
            b.draft_prob
                .partial_cmp(&a.draft_prob)
                .unwrap()
                .then(a.token.cmp(&b.token))
        });
        out
    }
    let children = build(&roots, &mut Vec::new(), &kept);
    DraftTree { children }
}

/// Recomputes routing scores from verification feedback. Participating
/// nodes get the harmonic-mean score of their own-branch confidences and
/// draft accuracies; everyone else decays toward the prior.
pub fn update_routing(
    matrix: &mut RoutingMatrix,
    req: RequestId,
    round: &DraftRound,
    result: &VerificationResult,
    table: &EmbeddingTable<Prob>,
    policy: &RoutingPolicy,
) -> Result<(), DraftingError> {
    let n_nodes = matrix.n_nodes();
    let row = matrix
        .row_mut(req)
        .ok_or_else(|| DraftingError::BadPolicy(format!("no routing row for request {req}")))?;
    debug_assert_eq!(row.len(), n_nodes);

    let mut participant_scores: BTreeMap<NodeId, Prob> = BTreeMap::new();
    for b in &round.branches {
        let draft = TokenSeq::from_ids(b.own.iter().map(|(t, _)| *t).collect());
        let acc = draft_accuracy(&draft, &result.accepted, result.accept_len, table)?;
        let conf: Vec<Prob> = b.own.iter().map(|(_, c)| *c).collect();
        participant_scores.insert(b.node, routing_score(&conf, &acc)?);
    }

    for (node, score) in row.iter_mut().enumerate() {
        match participant_scores.get(&(node as NodeId)) {
            Some(s) => *score = *s,
            None => *score = ROUTING_PRIOR + policy.decay * (*score - ROUTING_PRIOR),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::Distribution;
    use crate::models::TabularModel;
    use crate::rng::SeededSource;
    use std::collections::BTreeMap as Map;

    fn dist(p: &[f64]) -> Dist {
        Distribution::new(p.to_vec()).unwrap()
    }

    fn onehot_table(v: usize) -> EmbeddingTable<Prob> {
        let vectors = (0..v)
            .map(|i| {
                let mut e = vec![0.0; v];
                e[i] = 1.0;
                e
            })
            .collect();
        EmbeddingTable::new(v, vectors).unwrap()
    }

    #[test]
    fn draft_accuracy_basic_cases() {
        let table = onehot_table(4);
        let draft = TokenSeq::from_ids(vec![1, 2, 3]);

        // Draft equals the accepted prefix: all ones.
        let acc = draft_accuracy(&draft, &TokenSeq::from_ids(vec![1, 2, 3, 0]), 3, &table).unwrap();
        assert_eq!(acc, vec![1.0, 1.0, 1.0]);

        // Nothing accepted: all zeros.
        let acc = draft_accuracy(&draft, &TokenSeq::from_ids(vec![0]), 0, &table).unwrap();
        assert_eq!(acc, vec![0.0, 0.0, 0.0]);

        // Orthogonal at position 0, only one accepted.
        let acc = draft_accuracy(&draft, &TokenSeq::from_ids(vec![0, 1]), 1, &table).unwrap();
        assert_eq!(acc, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn routing_score_reference_values() {
        assert_eq!(routing_score(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.5);

        let got: f64 = routing_score(&[0.9], &[0.9]).unwrap();
        assert!((got - 0.9878048780487805).abs() < 1e-15, "{got}");

        let got: f64 = routing_score(&[0.9, 0.5], &[0.9, 0.5]).unwrap();
        assert!((got - 0.7439024390243902).abs() < 1e-15, "{got}");
    }

    #[test]
    fn routing_score_stays_in_open_unit_interval() {
        // Extreme inputs (outside (0,1)) are clamped.
        for (c, d) in [(0.0, 0.0), (1.0, 1.0), (-1.0, 2.0), (1.0, -1.0)] {
            let s = routing_score(&[c], &[d]).unwrap();
            assert!(s > 0.0 && s < 1.0, "score {s} for c={c}, d={d}");
        }
    }

    #[test]
    fn fuse_step_argmax_and_tie_breaks() {
        let got = fuse_step(&[(0, 5, 0.3), (1, 6, 0.7), (2, 7, 0.5)]).unwrap();
        assert_eq!(got, (6, 1));

        // Tie on confidence between nodes 2 and 1: lowest node id wins.
        let got = fuse_step(&[(2, 9, 0.7), (1, 4, 0.7)]).unwrap();
        assert_eq!(got, (4, 1));

        let got = fuse_step(&[(0, 3, 0.4)]).unwrap();
        assert_eq!(got, (3, 0));

        assert_eq!(fuse_step(&[]), Err(DraftingError::NoCandidates));
    }

    #[test]
    fn route_pure_top_k() {
        let row = [0.2, 0.9, 0.4, 0.7];
        let policy = RoutingPolicy {
            alpha: 1.0,
            beta: 0.0,
            tau: 2,
            fanout: 2,
            decay: 0.9,
            inherit_prior: false,
        };
        let mut rng = SeededSource::new(0);
        // Exploration (accept_len < tau), alpha = 1: always top-k.
        let sel = route_request(&row, &policy, 0, &mut rng).unwrap();
        assert_eq!(sel, vec![1, 3]);
    }

    #[test]
    fn route_uniform_when_alpha_zero() {
        let row = [0.2, 0.9, 0.4, 0.7];
        let policy = RoutingPolicy {
            alpha: 1e-12, // alpha must stay > beta; effectively zero
            beta: 0.0,
            tau: 2,
            fanout: 2,
            decay: 0.9,
            inherit_prior: false,
        };
        let n = 100_000;
        let mut counts = [0usize; 4];
        let mut rng = SeededSource::new(7);
        for _ in 0..n {
            for node in route_request(&row, &policy, 0, &mut rng).unwrap() {
                counts[node as usize] += 1;
            }
        }
        let expected = policy.fanout as f64 / 4.0;
        for c in counts {
            let freq = c as f64 / n as f64;
            assert!((freq - expected).abs() < 0.01, "freq {freq} vs {expected}");
        }
    }

    #[test]
    fn route_exploitation_top_k_when_beta_one() {
        let row = [0.2, 0.9, 0.4, 0.7];
        let policy = RoutingPolicy {
            alpha: 1.0,
            beta: 1.0 - 1e-12,
            tau: 2,
            fanout: 3,
            decay: 0.9,
            inherit_prior: false,
        };
        let mut rng = SeededSource::new(1);
        // Exploitation branch (accept_len >= tau).
        let sel = route_request(&row, &policy, 5, &mut rng).unwrap();
        assert_eq!(sel, vec![1, 2, 3]);
    }

    #[test]
    fn route_never_duplicates() {
        let row = [0.5, 0.5, 0.5];
        let policy = RoutingPolicy {
            alpha: 0.6,
            beta: 0.3,
            tau: 2,
            fanout: 3,
            decay: 0.9,
            inherit_prior: false,
        };
        let mut rng = SeededSource::new(3);
        for accept_len in [0usize, 5] {
            for _ in 0..2000 {
                let sel = route_request(&row, &policy, accept_len, &mut rng).unwrap();
                let mut sorted = sel.clone();
                sorted.dedup();
                assert_eq!(sorted.len(), sel.len());
            }
        }
    }

    fn order0(fallback: &[f64]) -> TabularModel {
        TabularModel::new(0, Map::new(), dist(fallback)).unwrap()
    }

    #[test]
    fn single_node_round_is_greedy_decode() {
        let mut entries = Map::new();
        entries.insert(vec![], dist(&[0.6, 0.4])); // order 0: always same
        let m = TabularModel::new(0, entries, dist(&[0.6, 0.4])).unwrap();
        let round = cooperative_generate(&[(0, &m)], &TokenSeq::new(), 3).unwrap();
        let fused: Vec<TokenId> = round.fused.iter().map(|(t, _, _)| *t).collect();
        assert_eq!(fused, vec![0, 0, 0]);
        assert_eq!(
            round.branches[0]
                .own
                .iter()
                .map(|(t, _)| *t)
                .collect::<Vec<_>>(),
            fused
        );
    }

    #[test]
    fn identical_drafters_share_all_branches() {
        let mut entries = Map::new();
        entries.insert(vec![0], dist(&[0.1, 0.9]));
        entries.insert(vec![1], dist(&[0.8, 0.2]));
        let m = TabularModel::new(1, entries, dist(&[0.7, 0.3])).unwrap();
        let round = cooperative_generate(&[(0, &m), (1, &m)], &TokenSeq::new(), 4).unwrap();
        for b in &round.branches {
            assert_eq!(b.own, b.proposals);
            let own: Vec<TokenId> = b.own.iter().map(|(t, _)| *t).collect();
            let fused: Vec<TokenId> = round.fused.iter().map(|(t, _, _)| *t).collect();
            assert_eq!(own, fused);
        }
    }

    #[test]
    fn confident_drafter_dominates_fusion() {
        let confident = order0(&[0.0, 1.0, 0.0]); // point mass on token 1
        let hedgy = order0(&[0.4, 0.25, 0.35]);
        let round =
            cooperative_generate(&[(0, &hedgy), (1, &confident)], &TokenSeq::new(), 3).unwrap();
        for (t, c, w) in &round.fused {
            assert_eq!((*t, *w), (1, 1));
            assert_eq!(*c, 1.0);
        }
    }

    #[test]
    fn tree_selection_single_node_is_a_chain() {
        let m = order0(&[0.6, 0.4]);
        let round = cooperative_generate(&[(0, &m)], &TokenSeq::new(), 3).unwrap();
        let tree = tree_selection(&round, 10);
        assert_eq!(tree.node_count(), 3);
        assert_eq!(tree.depth(), 3);
        assert_eq!(tree.children.len(), 1);
    }

    #[test]
    fn tree_selection_merges_diverging_nodes_at_root() {
        let a = order0(&[0.9, 0.1, 0.0]);
        let b = order0(&[0.0, 0.2, 0.8]);
        let round = cooperative_generate(&[(0, &a), (1, &b)], &TokenSeq::new(), 2).unwrap();
        let tree = tree_selection(&round, 16);
        // Two different first tokens: branching factor 2 at the root.
        assert_eq!(tree.children.len(), 2);
        tree.validate(4).unwrap();
    }

    #[test]
    fn tree_selection_budget_one_keeps_best_first_token() {
        let a = order0(&[0.9, 0.1, 0.0]);
        let b = order0(&[0.0, 0.2, 0.8]);
        let round = cooperative_generate(&[(0, &a), (1, &b)], &TokenSeq::new(), 2).unwrap();
        let tree = tree_selection(&round, 1);
        assert_eq!(tree.node_count(), 1);
        // Highest confidence first token is node 0's 0.9 on token 0.
        assert_eq!(tree.children[0].token, 0);
    }

    #[test]
    fn tree_selection_is_prefix_closed_under_budget() {
        let a = order0(&[0.5, 0.3, 0.2]);
        let b = order0(&[0.1, 0.45, 0.45]);
        let round = cooperative_generate(&[(0, &a), (1, &b)], &TokenSeq::new(), 4).unwrap();
        for budget in 1..=10 {
            let tree = tree_selection(&round, budget);
            assert!(tree.node_count() <= budget);
            tree.validate(8).unwrap();
        }
    }

    #[test]
    fn update_routing_rewards_matching_drafter_and_decays_others() {
        let table = onehot_table(3);
        let m = order0(&[0.7, 0.2, 0.1]);
        let round = cooperative_generate(&[(1, &m)], &TokenSeq::new(), 2).unwrap();
        let mut matrix = RoutingMatrix::new(3);
        matrix.insert_request(5);
        matrix.row_mut(5).unwrap()[2] = 0.9;
        let before = matrix.row(5).unwrap()[1];

        // Verification accepted exactly the drafted tokens.
        let result = VerificationResult {
            accepted: TokenSeq::from_ids(vec![0, 0, 1]),
            accept_len: 2,
            per_node_draft: round.per_node_draft(),
            rejected_at: None,
        };
        let policy = RoutingPolicy::default();
        update_routing(&mut matrix, 5, &round, &result, &table, &policy).unwrap();

        let row = matrix.row(5).unwrap();
        assert!(row[1] > before, "participant score should rise: {}", row[1]);
        // Non-participant decay: 0.5 + 0.9 * (0.9 - 0.5) = 0.86.
        assert!((row[2] - 0.86).abs() < 1e-12, "{}", row[2]);
        for s in row {
            assert!(*s > 0.0 && *s < 1.0);
        }
    }

    #[test]
    fn update_routing_accept_len_zero_drops_score() {
        let table = onehot_table(3);
        let m = order0(&[0.7, 0.2, 0.1]);
        let round = cooperative_generate(&[(0, &m)], &TokenSeq::new(), 2).unwrap();
        let mut matrix = RoutingMatrix::new(1);
        matrix.insert_request(1);
        let result = VerificationResult {
            accepted: TokenSeq::from_ids(vec![2]),
            accept_len: 0,
            per_node_draft: round.per_node_draft(),
            rejected_at: Some(0),
        };
        update_routing(
            &mut matrix,
            1,
            &round,
            &result,
            &table,
            &RoutingPolicy::default(),
        )
        .unwrap();
        let got = matrix.row(1).unwrap()[0];
        // d clamped to eps at every position; score sits near the floor.
        let expect = routing_score(&[0.7, 0.7], &[0.0, 0.0]).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!(got < 0.01);
    }
}
