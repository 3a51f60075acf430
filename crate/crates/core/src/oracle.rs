//! Exact enumeration checks for the verification operators.
//!
//! The oracle drives `verify_linear` / `verify_tree` through *every*
//! reachable branch by scripting the uniform draws, weighs each branch
//! with probabilities it computes from `(q, o)` on its own (independently
//! of the implementation), and compares the resulting per-position
//! conditional marginals of the emitted tokens against the target
//! conditionals. Distribution preservation means every one of those
//! conditionals equals the target's, so the reported total variation
//! distance should sit at floating-point dust.
//!
//! Branch scripting relies on two documented implementation contracts:
//! the accept draw of a trial is consumed before any categorical
//! sampling, and categorical samples are inverse-CDF in ascending token
//! order. Scripts pick interior points of each decision interval, so the
//! exact comparison semantics of the threshold never matter.
//!
//! Draft-tree cases follow the without-replacement generative model the
//! verifier is built for: sibling slots draw from their drafter's step
//! distribution restricted to tokens not already drawn at that depth, in
//! slot order — the order the tree stores and the verifier tries.

use std::collections::BTreeMap;

use crate::dist::Distribution;
use crate::models::{Model, TabularModel};
use crate::rng::{ScriptedSource, SeededSource, UniformSource};
use crate::verify::{verify_linear, verify_tree, DraftTree, DraftTreeNode, VerifyError};
use crate::vocab::{TokenId, TokenSeq};
use crate::Dist;

/// Outcome of enumerating one case.
#[derive(Debug, Clone)]
pub struct CaseOutcome {
    /// Worst conditional total variation distance across positions.
    pub max_tvd: f64,
    /// |1 − total enumerated mass|.
    pub mass_err: f64,
    /// Number of enumerated branches (scripted verifier runs).
    pub branches: usize,
}

/// Worst case seen across a randomized suite.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub cases: usize,
    pub max_tvd: f64,
    pub max_mass_err: f64,
    pub total_branches: usize,
    /// Reproduction hint for the worst case (its seed and shape).
    pub worst_case: String,
}

// Midpoint of the accept interval [0, p).
fn accept_draw(p: f64) -> f64 {
    p / 2.0
}

// Midpoint of the reject interval [p, 1).
fn reject_draw(p: f64) -> f64 {
    p + (1.0 - p) / 2.0
}

// Midpoint of token `t`'s inverse-CDF interval under `dist`.
fn token_draw(dist: &Dist, t: TokenId) -> f64 {
    let mut cum = 0.0;
    for i in 0..t {
        cum += dist.get(i);
    }
    cum + dist.get(t) / 2.0
}

// Oracle-side residual; deliberately not the library routine.
fn residual_weights(o: &Dist, q: &Dist) -> Vec<f64> {
    o.probs()
        .iter()
        .zip(q.probs())
        .map(|(op, qp)| (op - qp).max(0.0))
        .collect()
}

fn normalize(weights: &[f64]) -> Option<Dist> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return None;
    }
    Distribution::new(weights.iter().map(|w| w / total).collect()).ok()
}

/// Checks the per-position conditionals of an enumerated outcome map
/// against the target conditionals. Keys are full emitted sequences.
fn conditional_tvds(
    outcomes: &BTreeMap<Vec<TokenId>, f64>,
    target: &dyn Model,
    prefix: &TokenSeq,
) -> f64 {
    let max_len = outcomes.keys().map(Vec::len).max().unwrap_or(0);
    let mut worst: f64 = 0.0;
    for pos in 0..max_len {
        // Group mass of the token at `pos` by the emitted prefix before it.
        // Sequences of length exactly `pos` ended earlier (their last token
        // was a resample) and do not belong to this conditional.
        let mut groups: BTreeMap<&[TokenId], BTreeMap<TokenId, f64>> = BTreeMap::new();
        for (seq, mass) in outcomes {
            if seq.len() > pos {
                *groups
                    .entry(&seq[..pos])
                    .or_default()
                    .entry(seq[pos])
                    .or_insert(0.0) += mass;
            }
        }
        for (emitted_prefix, token_mass) in groups {
            let mut ctx = prefix.clone();
            for &t in emitted_prefix {
                ctx.push(t);
            }
            let o = target.next_distribution(&ctx);
            let denom: f64 = token_mass.values().sum();
            if denom <= 0.0 {
                continue;
            }
            let mut tvd = 0.0;
            for t in 0..o.len() as TokenId {
                let got = token_mass.get(&t).copied().unwrap_or(0.0) / denom;
                tvd += (got - o.get(t)).abs();
            }
            worst = worst.max(tvd / 2.0);
        }
    }
    worst
}

/// Exhaustively enumerates `verify_linear` on drafts of length `gamma`
/// sampled from `drafter`, and checks that every per-position conditional
/// marginal of the emitted tokens equals the target conditional.
pub fn check_linear_case(
    target: &dyn Model,
    drafter: &dyn Model,
    prefix: &TokenSeq,
    gamma: usize,
) -> Result<CaseOutcome, VerifyError> {
    struct Driver<'a> {
        target: &'a dyn Model,
        drafter: &'a dyn Model,
        prefix: &'a TokenSeq,
        gamma: usize,
        outcomes: BTreeMap<Vec<TokenId>, f64>,
        branches: usize,
    }

    impl Driver<'_> {
        fn run_branch(
            &mut self,
            draft: &[TokenId],
            dists: &[Dist],
            script: Vec<f64>,
            mass: f64,
        ) -> Result<(), VerifyError> {
            // Pad the unread tail (positions after the scripted rejection)
            // with a greedy continuation so the call sees a full-γ draft.
            let mut full_draft = draft.to_vec();
            let mut full_dists = dists.to_vec();
            let mut ctx = self.prefix.clone();
            for &t in draft {
                ctx.push(t);
            }
            while full_draft.len() < self.gamma {
                let q = self.drafter.next_distribution(&ctx);
                let t = q.argmax();
                ctx.push(t);
                full_draft.push(t);
                full_dists.push(q);
            }
            let mut rng = ScriptedSource::new(script);
            let result =
                verify_linear(self.target, self.prefix, &full_draft, &full_dists, &mut rng)?;
            debug_assert_eq!(rng.remaining(), 0, "oracle script not fully consumed");
            *self
                .outcomes
                .entry(result.accepted.ids().to_vec())
                .or_insert(0.0) += mass;
            self.branches += 1;
            Ok(())
        }

        fn explore(
            &mut self,
            step: usize,
            ctx: &TokenSeq,
            draft: &mut Vec<TokenId>,
            dists: &mut Vec<Dist>,
            script: &mut Vec<f64>,
            mass: f64,
        ) -> Result<(), VerifyError> {
            if step == self.gamma {
                // Every draft accepted: enumerate the bonus token.
                let bonus = self.target.next_distribution(ctx);
                for t in 0..bonus.len() as TokenId {
                    let p = bonus.get(t);
                    if p <= 0.0 {
                        continue;
                    }
                    script.push(token_draw(&bonus, t));
                    self.run_branch(draft, dists, script.clone(), mass * p)?;
                    script.pop();
                }
                return Ok(());
            }

            let o = self.target.next_distribution(ctx);
            let q = self.drafter.next_distribution(ctx);
            for x in 0..q.len() as TokenId {
                let qx = q.get(x);
                if qx <= 0.0 {
                    continue;
                }
                let p_acc = (o.get(x) / qx).min(1.0);
                draft.push(x);
                dists.push(q.clone());

                if p_acc > 0.0 {
                    script.push(accept_draw(p_acc));
                    let mut next_ctx = ctx.clone();
                    next_ctx.push(x);
                    self.explore(step + 1, &next_ctx, draft, dists, script, mass * qx * p_acc)?;
                    script.pop();
                }
                if p_acc < 1.0 {
                    // Rejection: enumerate the residual resample.
                    let res = normalize(&residual_weights(&o, &q))
                        .expect("rejection implies positive residual mass");
                    script.push(reject_draw(p_acc));
                    for z in 0..res.len() as TokenId {
                        let rz = res.get(z);
                        if rz <= 0.0 {
                            continue;
                        }
                        script.push(token_draw(&res, z));
                        self.run_branch(
                            draft,
                            dists,
                            script.clone(),
                            mass * qx * (1.0 - p_acc) * rz,
                        )?;
                        script.pop();
                    }
                    script.pop();
                }

                draft.pop();
                dists.pop();
            }
            Ok(())
        }
    }

    let mut driver = Driver {
        target,
        drafter,
        prefix,
        gamma,
        outcomes: BTreeMap::new(),
        branches: 0,
    };
    driver.explore(
        0,
        &prefix.clone(),
        &mut Vec::new(),
        &mut Vec::new(),
        &mut Vec::new(),
        1.0,
    )?;

    let total: f64 = driver.outcomes.values().sum();
    Ok(CaseOutcome {
        max_tvd: conditional_tvds(&driver.outcomes, target, prefix),
        mass_err: (1.0 - total).abs(),
        branches: driver.branches,
    })
}

/// Shape of a draft-tree case: a slot per would-be tree node, referencing
/// the drafter that fills it. Slots realize tokens in order, without
/// replacement among siblings.
#[derive(Debug, Clone)]
pub struct SlotSpec {
    pub drafter_idx: usize,
    pub children: Vec<SlotSpec>,
}

impl SlotSpec {
    fn describe(slots: &[SlotSpec]) -> String {
        let parts: Vec<String> = slots
            .iter()
            .map(|s| {
                format!(
                    "{}{}",
                    s.drafter_idx,
                    if s.children.is_empty() {
                        String::new()
                    } else {
                        format!("({})", Self::describe(&s.children))
                    }
                )
            })
            .collect();
        parts.join(",")
    }
}

/// Exhaustively enumerates `verify_tree` over all token realizations of a
/// slot structure and all verification branches, checking per-position
/// conditional preservation of the target distribution.
pub fn check_tree_case(
    target: &dyn Model,
    drafters: &[&dyn Model],
    slots: &[SlotSpec],
    prefix: &TokenSeq,
) -> Result<CaseOutcome, VerifyError> {
    // Materialized trial history of one ancestor level: the realized
    // (token, full drafter distribution) pairs tried before the accepted
    // child, plus the accepted child itself.
    struct Level {
        before: Vec<(TokenId, Dist)>,
        accepted: (TokenId, Dist),
    }

    struct Driver<'a> {
        target: &'a dyn Model,
        drafters: &'a [&'a dyn Model],
        prefix: &'a TokenSeq,
        outcomes: BTreeMap<Vec<TokenId>, f64>,
        branches: usize,
    }

    fn leaf_node(token: TokenId, dist: &Dist) -> DraftTreeNode {
        DraftTreeNode {
            token,
            draft_prob: dist.get(token),
            drafter: 0,
            dist: dist.clone(),
            children: Vec::new(),
        }
    }

    fn assemble(ancestors: &[Level], current: &[(TokenId, Dist)]) -> DraftTree {
        let mut children: Vec<DraftTreeNode> =
            current.iter().map(|(t, d)| leaf_node(*t, d)).collect();
        for level in ancestors.iter().rev() {
            let mut level_children: Vec<DraftTreeNode> =
                level.before.iter().map(|(t, d)| leaf_node(*t, d)).collect();
            let mut accepted = leaf_node(level.accepted.0, &level.accepted.1);
            accepted.children = children;
            level_children.push(accepted);
            children = level_children;
        }
        DraftTree { children }
    }

    impl Driver<'_> {
        fn run_branch(
            &mut self,
            ancestors: &[Level],
            current: &[(TokenId, Dist)],
            script: Vec<f64>,
            mass: f64,
        ) -> Result<(), VerifyError> {
            let tree = assemble(ancestors, current);
            let mut rng = ScriptedSource::new(script);
            let result = verify_tree(self.target, self.prefix, &tree, &mut rng)?;
            debug_assert_eq!(rng.remaining(), 0, "oracle script not fully consumed");
            *self
                .outcomes
                .entry(result.accepted.ids().to_vec())
                .or_insert(0.0) += mass;
            self.branches += 1;
            Ok(())
        }

        /// Walks trials at one level, slot by slot, fusing the token draw
        /// of slot `idx` with its accept/reject trial.
        #[allow(clippy::too_many_arguments)]
        fn explore_level(
            &mut self,
            slots: &[SlotSpec],
            idx: usize,
            blocked: &mut Vec<TokenId>,
            tried: &mut Vec<(TokenId, Dist)>,
            o_resid: &Dist,
            ctx: &TokenSeq,
            ancestors: &mut Vec<Level>,
            script: &mut Vec<f64>,
            mass: f64,
        ) -> Result<(), VerifyError> {
            if idx == slots.len() {
                // Every realized child rejected: enumerate the residual.
                for z in 0..o_resid.len() as TokenId {
                    let rz = o_resid.get(z);
                    if rz <= 0.0 {
                        continue;
                    }
                    script.push(token_draw(o_resid, z));
                    self.run_branch(ancestors, tried, script.clone(), mass * rz)?;
                    script.pop();
                }
                return Ok(());
            }

            let slot = &slots[idx];
            let q_full = self.drafters[slot.drafter_idx].next_distribution(ctx);
            let q = match q_full.restricted(blocked) {
                Some(q) => q,
                // No mass left for this slot: it never materializes.
                None => {
                    return self.explore_level(
                        slots,
                        idx + 1,
                        blocked,
                        tried,
                        o_resid,
                        ctx,
                        ancestors,
                        script,
                        mass,
                    );
                }
            };

            for x in 0..q.len() as TokenId {
                let qx = q.get(x);
                if qx <= 0.0 {
                    continue;
                }
                let p_acc = (o_resid.get(x) / qx).min(1.0);

                if p_acc > 0.0 {
                    // Accept this child and descend into its slots.
                    script.push(accept_draw(p_acc));
                    tried.push((x, q_full.clone()));
                    let m = mass * qx * p_acc;
                    let mut next_ctx = ctx.clone();
                    next_ctx.push(x);
                    let level = Level {
                        before: tried[..tried.len() - 1].to_vec(),
                        accepted: (x, q_full.clone()),
                    };
                    ancestors.push(level);
                    if slot.children.is_empty() {
                        // Accepted leaf: bonus token.
                        let bonus = self.target.next_distribution(&next_ctx);
                        for z in 0..bonus.len() as TokenId {
                            let bz = bonus.get(z);
                            if bz <= 0.0 {
                                continue;
                            }
                            script.push(token_draw(&bonus, z));
                            self.run_branch(ancestors, &[], script.clone(), m * bz)?;
                            script.pop();
                        }
                    } else {
                        let o_next = self.target.next_distribution(&next_ctx);
                        self.explore_level(
                            &slot.children,
                            0,
                            &mut Vec::new(),
                            &mut Vec::new(),
                            &o_next,
                            &next_ctx,
                            ancestors,
                            script,
                            m,
                        )?;
                    }
                    ancestors.pop();
                    tried.pop();
                    script.pop();
                }

                if p_acc < 1.0 {
                    // Reject: subtract the restricted drafter distribution
                    // from the running residual and move to the next slot.
                    let o_next = normalize(&residual_weights(o_resid, &q))
                        .expect("rejection implies positive residual mass");
                    script.push(reject_draw(p_acc));
                    blocked.push(x);
                    tried.push((x, q_full.clone()));
                    self.explore_level(
                        slots,
                        idx + 1,
                        blocked,
                        tried,
                        &o_next,
                        ctx,
                        ancestors,
                        script,
                        mass * qx * (1.0 - p_acc),
                    )?;
                    tried.pop();
                    blocked.pop();
                    script.pop();
                }
            }
            Ok(())
        }
    }

    let mut driver = Driver {
        target,
        drafters,
        prefix,
        outcomes: BTreeMap::new(),
        branches: 0,
    };
    let o_root = target.next_distribution(prefix);
    driver.explore_level(
        slots,
        0,
        &mut Vec::new(),
        &mut Vec::new(),
        &o_root,
        &prefix.clone(),
        &mut Vec::new(),
        &mut Vec::new(),
        1.0,
    )?;

    let total: f64 = driver.outcomes.values().sum();
    Ok(CaseOutcome {
        max_tvd: conditional_tvds(&driver.outcomes, target, prefix),
        mass_err: (1.0 - total).abs(),
        branches: driver.branches,
    })
}

fn rand_below(src: &mut SeededSource, n: usize) -> usize {
    ((src.next_uniform() * n as f64) as usize).min(n - 1)
}

/// Random distribution with a mass floor, so no branch interval collapses
/// to floating-point width.
pub fn random_dist(vocab: usize, src: &mut SeededSource) -> Dist {
    let weights: Vec<f64> = (0..vocab).map(|_| 0.05 + src.next_uniform()).collect();
    normalize(&weights).expect("positive weights")
}

/// Random order-1 tabular model over `vocab` tokens.
pub fn random_model(vocab: usize, src: &mut SeededSource) -> TabularModel {
    let mut entries = BTreeMap::new();
    for t in 0..vocab as TokenId {
        entries.insert(vec![t], random_dist(vocab, src));
    }
    TabularModel::new(1, entries, random_dist(vocab, src)).expect("valid model")
}

/// Randomized linear suite: `trials` cases over vocab sizes
/// `2..=vocab_max` and draft lengths `1..=gamma_max`.
pub fn run_linear_suite(
    trials: usize,
    vocab_max: usize,
    gamma_max: usize,
    seed: u64,
) -> SuiteReport {
    let mut report = SuiteReport {
        cases: 0,
        max_tvd: 0.0,
        max_mass_err: 0.0,
        total_branches: 0,
        worst_case: String::new(),
    };
    for case in 0..trials {
        let mut src = SeededSource::derive(seed, &[0x11ea4, case as u64]);
        let vocab = 2 + rand_below(&mut src, vocab_max - 1);
        let gamma = 1 + rand_below(&mut src, gamma_max);
        let target = random_model(vocab, &mut src);
        let drafter = random_model(vocab, &mut src);
        let prefix_len = rand_below(&mut src, 3);
        let prefix = TokenSeq::from_ids(
            (0..prefix_len)
                .map(|_| rand_below(&mut src, vocab) as TokenId)
                .collect(),
        );
        let outcome =
            check_linear_case(&target, &drafter, &prefix, gamma).expect("oracle case runs");
        report.cases += 1;
        report.total_branches += outcome.branches;
        report.max_mass_err = report.max_mass_err.max(outcome.mass_err);
        if outcome.max_tvd > report.max_tvd {
            report.max_tvd = outcome.max_tvd;
            report.worst_case = format!("case {case}: vocab {vocab}, gamma {gamma}, seed {seed}");
        }
    }
    report
}

fn random_slots(
    src: &mut SeededSource,
    n_drafters: usize,
    max_siblings: usize,
    depth_left: usize,
) -> Vec<SlotSpec> {
    let count = 1 + rand_below(src, max_siblings);
    (0..count)
        .map(|_| {
            let children = if depth_left > 1 && src.next_uniform() < 0.7 {
                random_slots(src, n_drafters, max_siblings, depth_left - 1)
            } else {
                Vec::new()
            };
            SlotSpec {
                drafter_idx: rand_below(src, n_drafters),
                children,
            }
        })
        .collect()
}

/// Randomized tree suite: `trials` cases with ≤ `max_siblings` siblings,
/// depth ≤ `max_depth`, vocab sizes `2..=vocab_max`.
pub fn run_tree_suite(
    trials: usize,
    vocab_max: usize,
    max_siblings: usize,
    max_depth: usize,
    seed: u64,
) -> SuiteReport {
    let mut report = SuiteReport {
        cases: 0,
        max_tvd: 0.0,
        max_mass_err: 0.0,
        total_branches: 0,
        worst_case: String::new(),
    };
    for case in 0..trials {
        let mut src = SeededSource::derive(seed, &[0x7ee5, case as u64]);
        let vocab = 2 + rand_below(&mut src, vocab_max - 1);
        let target = random_model(vocab, &mut src);
        let drafter_models: Vec<TabularModel> =
            (0..3).map(|_| random_model(vocab, &mut src)).collect();
        let drafters: Vec<&dyn Model> = drafter_models.iter().map(|m| m as &dyn Model).collect();
        let slots = random_slots(&mut src, drafters.len(), max_siblings, max_depth);
        let prefix_len = rand_below(&mut src, 3);
        let prefix = TokenSeq::from_ids(
            (0..prefix_len)
                .map(|_| rand_below(&mut src, vocab) as TokenId)
                .collect(),
        );
        let outcome =
            check_tree_case(&target, &drafters, &slots, &prefix).expect("oracle case runs");
        report.cases += 1;
        report.total_branches += outcome.branches;
        report.max_mass_err = report.max_mass_err.max(outcome.mass_err);
        if outcome.max_tvd > report.max_tvd {
            report.max_tvd = outcome.max_tvd;
            report.worst_case = format!(
                "case {case}: vocab {vocab}, slots [{}], seed {seed}",
                SlotSpec::describe(&slots)
            );
        }
    }
    report
}
