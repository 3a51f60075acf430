//! Batch assignment and speculation budgeting.
//!
//! The scheduler picks a subset of pooled requests and per-request draft
//! budgets minimizing `T_ttl / b + λ·Γ` subject to the token cap
//! `Γ = Σ γ_i ≤ Γ_max`, the memory cap `Σ m_i ≤ M_max`, and the latency
//! cap `T_ttl ≤ T_max`, where
//! `T_ttl = max_i T_ssm(b, l, γ_i) + T_llm(b, l, Γ)` and `l` is the
//! longest selected request. Oversubscribed budgets are trimmed by
//! repeatedly decrementing the largest γ (lowest index on ties).
//!
//! The exact solver enumerates subsets and is the reference up to a
//! configurable pool size; beyond that a documented greedy approximation
//! grows the batch in ascending-length order while the objective improves.
//!
//! Latencies are affine in batch size, critical length, and token count.
//! The paper-facing quantities are "experimentally modeled"; affine is the
//! simplest monotone, exactly calibratable form, and [`LatencyModelLike`]
//! lets a step-function model replace it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::TokenSeq;
use crate::RequestId;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("empty request pool")]
    EmptyPool,
    #[error("token cap {cap} below the {count} selected requests (γ_i ≥ 1 each)")]
    TokenCapTooSmall { cap: u64, count: usize },
    #[error("no feasible non-empty batch: {0}")]
    Infeasible(String),
    #[error("calibration needs at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("calibration design is rank-deficient: regressor `{0}` never varies")]
    ConstantRegressor(&'static str),
    #[error("calibration design is rank-deficient (collinear regressors)")]
    RankDeficient,
    #[error("calibration sample parse error: {0}")]
    SampleParse(String),
}

/// A pooled inference request as the scheduler sees it.
#[derive(Debug, Clone)]
pub struct Request {
    pub id: RequestId,
    pub prompt: TokenSeq,
    pub generated: TokenSeq,
    /// Abstract memory footprint, > 0.
    pub mem: f64,
    /// Draft-token budget for the next round, ≥ 1.
    pub gamma: u32,
    /// Acceptance length observed at the latest verification.
    pub accept_len_last: usize,
    pub max_new: usize,
    pub domain: String,
    pub arrival_ms: f64,
}

impl Request {
    /// Current sequence length `l_i = |prompt| + |generated|`.
    pub fn seq_len(&self) -> usize {
        self.prompt.len() + self.generated.len()
    }

    pub fn remaining(&self) -> usize {
        self.max_new.saturating_sub(self.generated.len())
    }
}

/// Affine latency models for drafting and verification, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    /// T_ssm(b, l, γ) = s0 + s_b·b + s_l·l + s_g·γ
    pub s0: f64,
    pub s_b: f64,
    pub s_l: f64,
    pub s_g: f64,
    /// T_llm(b, l, Γ) = v0 + v_b·b + v_l·l + v_g·Γ
    pub v0: f64,
    pub v_b: f64,
    pub v_l: f64,
    pub v_g: f64,
}

impl LatencyModel {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        let all = [
            self.s0, self.s_b, self.s_l, self.s_g, self.v0, self.v_b, self.v_l, self.v_g,
        ];
        if all.iter().any(|c| *c < 0.0 || !c.is_finite()) {
            return Err(ScheduleError::Infeasible(
                "latency coefficients must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn constant(ssm_ms: f64, llm_ms: f64) -> Self {
        Self {
            s0: ssm_ms,
            s_b: 0.0,
            s_l: 0.0,
            s_g: 0.0,
            v0: llm_ms,
            v_b: 0.0,
            v_l: 0.0,
            v_g: 0.0,
        }
    }
}

/// Anything that predicts drafting/verification latency from the batch
/// shape. The affine [`LatencyModel`] is the default implementation.
pub trait LatencyModelLike {
    fn t_ssm(&self, b: usize, l: usize, gamma: u32) -> f64;
    fn t_llm(&self, b: usize, l: usize, total_gamma: u64) -> f64;
}

impl LatencyModelLike for LatencyModel {
    fn t_ssm(&self, b: usize, l: usize, gamma: u32) -> f64 {
        self.s0 + self.s_b * b as f64 + self.s_l * l as f64 + self.s_g * gamma as f64
    }

    fn t_llm(&self, b: usize, l: usize, total_gamma: u64) -> f64 {
        self.v0 + self.v_b * b as f64 + self.v_l * l as f64 + self.v_g * total_gamma as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Exact,
    Greedy,
}

/// Scheduler knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Objective weight on verified-token count. Implemented with the sign
    /// as printed (`+λΓ` penalizes tokens); set negative to reward them.
    pub lambda: f64,
    pub t_max_ms: f64,
    pub m_max: f64,
    pub gamma_max: u64,
    pub solver: SolverKind,
    /// Exact enumeration bound; larger pools fall back to greedy.
    pub exact_threshold: usize,
    /// Initial per-request draft budget.
    pub gamma0: u32,
    /// Upper bound for the post-verification budget update
    /// γ ← clamp(accept_len + 1, 1, gamma_cap).
    pub gamma_cap: u32,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            t_max_ms: 1e9,
            m_max: 1e9,
            gamma_max: 64,
            solver: SolverKind::Exact,
            exact_threshold: 12,
            gamma0: 4,
            gamma_cap: 8,
        }
    }
}

/// A feasible batch plan: selected request ids (ascending), their trimmed
/// γ budgets, and the derived quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub selected: Vec<RequestId>,
    pub gammas: Vec<u32>,
    pub batch_size: usize,
    /// Critical (longest selected) sequence length.
    pub critical_len: usize,
    pub total_gamma: u64,
    pub predicted_ttl_ms: f64,
    pub objective: f64,
    /// Set when no feasible non-empty subset exists; `selected` is empty.
    pub infeasible: Option<String>,
}

impl BatchPlan {
    pub fn empty(reason: String) -> Self {
        Self {
            selected: Vec::new(),
            gammas: Vec::new(),
            batch_size: 0,
            critical_len: 0,
            total_gamma: 0,
            predicted_ttl_ms: 0.0,
            objective: f64::INFINITY,
            infeasible: Some(reason),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

/// End-to-end latency of a planned batch:
/// `max_i T_ssm(b, l, γ_i) + T_llm(b, l, Γ)`.
pub fn predict_ttl(
    gammas: &[u32],
    batch_size: usize,
    critical_len: usize,
    lat: &dyn LatencyModelLike,
) -> f64 {
    let total: u64 = gammas.iter().map(|g| *g as u64).sum();
    let ssm = gammas
        .iter()
        .map(|g| lat.t_ssm(batch_size, critical_len, *g))
        .fold(0.0f64, f64::max);
    ssm + lat.t_llm(batch_size, critical_len, total)
}

/// Trims draft budgets to the token cap: while `Σ γ_i > Γ_max`, decrement
/// the largest γ (lowest index on ties). Every γ stays ≥ 1.
pub fn adaptive_speculation(gammas: &[u32], gamma_max: u64) -> Result<Vec<u32>, ScheduleError> {
    if (gammas.len() as u64) > gamma_max {
        return Err(ScheduleError::TokenCapTooSmall {
            cap: gamma_max,
            count: gammas.len(),
        });
    }
    let mut out: Vec<u32> = gammas.to_vec();
    debug_assert!(out.iter().all(|g| *g >= 1));
    let mut total: u64 = out.iter().map(|g| *g as u64).sum();
    while total > gamma_max {
        let mut j = 0usize;
        for i in 1..out.len() {
            if out[i] > out[j] {
                j = i;
            }
        }
        out[j] -= 1;
        total -= 1;
    }
    Ok(out)
}

fn evaluate_subset(
    pool: &[&Request],
    idxs: &[usize],
    cfg: &SchedulerConfig,
    lat: &dyn LatencyModelLike,
) -> Option<(Vec<u32>, usize, f64, f64)> {
    let mem: f64 = idxs.iter().map(|&i| pool[i].mem).sum();
    if mem > cfg.m_max {
        return None;
    }
    let gammas_in: Vec<u32> = idxs.iter().map(|&i| pool[i].gamma).collect();
    let gammas = adaptive_speculation(&gammas_in, cfg.gamma_max).ok()?;
    let b = idxs.len();
    let l = idxs.iter().map(|&i| pool[i].seq_len()).max().unwrap_or(0);
    let ttl = predict_ttl(&gammas, b, l, lat);
    if ttl > cfg.t_max_ms {
        return None;
    }
    let total: u64 = gammas.iter().map(|g| *g as u64).sum();
    let objective = ttl / b as f64 + cfg.lambda * total as f64;
    Some((gammas, l, ttl, objective))
}

/// Picks the batch minimizing the objective. Pools at most
/// `exact_threshold` large are solved exactly by subset enumeration;
/// larger pools use the greedy growth heuristic. Requests are considered
/// in ascending id order, which makes ties deterministic.
pub fn batch_assign(
    pool: &[&Request],
    cfg: &SchedulerConfig,
    lat: &dyn LatencyModelLike,
) -> Result<BatchPlan, ScheduleError> {
    if pool.is_empty() {
        return Err(ScheduleError::EmptyPool);
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by_key(|&i| pool[i].id);

    let use_exact = matches!(cfg.solver, SolverKind::Exact) && pool.len() <= cfg.exact_threshold;
    let best = if use_exact {
        exact_assign(pool, &order, cfg, lat)
    } else {
        greedy_assign(pool, &order, cfg, lat)
    };

    match best {
        Some((idxs, gammas, l, ttl, objective)) => {
            let total = gammas.iter().map(|g| *g as u64).sum();
            Ok(BatchPlan {
                selected: idxs.iter().map(|&i| pool[i].id).collect(),
                batch_size: idxs.len(),
                gammas,
                critical_len: l,
                total_gamma: total,
                predicted_ttl_ms: ttl,
                objective,
                infeasible: None,
            })
        }
        None => Ok(BatchPlan::empty(diagnose_infeasibility(pool, cfg, lat))),
    }
}

type Candidate = (Vec<usize>, Vec<u32>, usize, f64, f64);

fn exact_assign(
    pool: &[&Request],
    order: &[usize],
    cfg: &SchedulerConfig,
    lat: &dyn LatencyModelLike,
) -> Option<Candidate> {
    let n = order.len();
    let mut best: Option<Candidate> = None;
    for mask in 1u64..(1u64 << n) {
        let idxs: Vec<usize> = (0..n)
            .filter(|bit| mask & (1 << bit) != 0)
            .map(|bit| order[bit])
            .collect();
        if let Some((gammas, l, ttl, obj)) = evaluate_subset(pool, &idxs, cfg, lat) {
            if best.as_ref().is_none_or(|b| obj < b.4) {
                best = Some((idxs, gammas, l, ttl, obj));
            }
        }
    }
    best
}

fn greedy_assign(
    pool: &[&Request],
    order: &[usize],
    cfg: &SchedulerConfig,
    lat: &dyn LatencyModelLike,
) -> Option<Candidate> {
    // Ascending sequence length, ties by id order, so short requests are
    // batched before they are dominated by a long critical path.
    let mut by_len = order.to_vec();
    by_len.sort_by_key(|&i| (pool[i].seq_len(), pool[i].id));

    // Seed with the first feasible singleton.
    let mut chosen: Vec<usize> = Vec::new();
    let mut current: Option<Candidate> = None;
    let mut rest = by_len.into_iter();
    for i in rest.by_ref() {
        if let Some((g, l, t, o)) = evaluate_subset(pool, &[i], cfg, lat) {
            chosen.push(i);
            current = Some((vec![i], g, l, t, o));
            break;
        }
    }
    let mut current = current?;

    // Grow while the objective improves.
    for i in rest {
        chosen.push(i);
        match evaluate_subset(pool, &chosen, cfg, lat) {
            Some((g, l, t, o)) if o < current.4 => {
                current = (chosen.clone(), g, l, t, o);
            }
            _ => {
                chosen.pop();
                break;
            }
        }
    }
    Some(current)
}

fn diagnose_infeasibility(
    pool: &[&Request],
    cfg: &SchedulerConfig,
    lat: &dyn LatencyModelLike,
) -> String {
    // No subset was feasible, so in particular no singleton was. Report
    // the violated constraint for the easiest singleton.
    let mut reasons = Vec::new();
    if let Some(r) = pool
        .iter()
        .min_by(|a, b| a.mem.partial_cmp(&b.mem).unwrap())
    {
        if r.mem > cfg.m_max {
            reasons.push(format!(
                "memory: request {} needs {} > M_max {}",
                r.id, r.mem, cfg.m_max
            ));
        }
    }
    if cfg.gamma_max < 1 {
        reasons.push(format!("token cap: Γ_max {} < 1", cfg.gamma_max));
    }
    if let Some(r) = pool.iter().min_by_key(|r| r.seq_len()) {
        let ttl = predict_ttl(&[1], 1, r.seq_len(), lat);
        if ttl > cfg.t_max_ms {
            reasons.push(format!(
                "latency: minimal batch for request {} predicts {ttl} ms > T_max {} ms",
                r.id, cfg.t_max_ms
            ));
        }
    }
    if reasons.is_empty() {
        reasons.push("constraint interaction leaves no feasible subset".into());
    }
    reasons.join("; ")
}

/// One calibration observation: batch size, critical length, token count
/// (γ for drafting, Γ for verification), observed latency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencySample {
    pub b: f64,
    pub l: f64,
    pub tokens: f64,
    pub ms: f64,
}

/// Reads calibration samples from CSV with header `b,l,tokens,ms`.
pub fn read_samples_csv<R: std::io::Read>(reader: R) -> Result<Vec<LatencySample>, ScheduleError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    {
        let headers = rdr
            .headers()
            .map_err(|e| ScheduleError::SampleParse(e.to_string()))?;
        let expect = ["b", "l", "tokens", "ms"];
        let got: Vec<&str> = headers.iter().map(str::trim).collect();
        if got != expect {
            return Err(ScheduleError::SampleParse(format!(
                "expected header {expect:?}, got {got:?}"
            )));
        }
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| ScheduleError::SampleParse(e.to_string()))?;
        let field = |i: usize| -> Result<f64, ScheduleError> {
            rec.get(i)
                .ok_or_else(|| ScheduleError::SampleParse(format!("row {rec:?} too short")))?
                .trim()
                .parse::<f64>()
                .map_err(|e| ScheduleError::SampleParse(format!("row {rec:?}: {e}")))
        };
        out.push(LatencySample {
            b: field(0)?,
            l: field(1)?,
            tokens: field(2)?,
            ms: field(3)?,
        });
    }
    Ok(out)
}

/// Fitted affine coefficients `(intercept, per-b, per-l, per-token)` with
/// the residual root-mean-square error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    pub intercept: f64,
    pub per_batch: f64,
    pub per_len: f64,
    pub per_token: f64,
    pub rmse: f64,
}

impl AffineFit {
    pub fn predict(&self, b: f64, l: f64, tokens: f64) -> f64 {
        self.intercept + self.per_batch * b + self.per_len * l + self.per_token * tokens
    }
}

/// Least-squares fit of the affine latency model, with negative
/// coefficients clamped to zero. Rejects designs where a regressor never
/// varies (naming it) or the columns are collinear.
pub fn calibrate(samples: &[LatencySample]) -> Result<AffineFit, ScheduleError> {
    if samples.len() < 4 {
        return Err(ScheduleError::TooFewSamples {
            need: 4,
            got: samples.len(),
        });
    }
    let distinct = |f: fn(&LatencySample) -> f64| {
        let mut vals: Vec<f64> = samples.iter().map(f).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals.dedup();
        vals.len()
    };
    if distinct(|s| s.b) < 2 {
        return Err(ScheduleError::ConstantRegressor("b"));
    }
    if distinct(|s| s.l) < 2 {
        return Err(ScheduleError::ConstantRegressor("l"));
    }
    if distinct(|s| s.tokens) < 2 {
        return Err(ScheduleError::ConstantRegressor("tokens"));
    }

    let n = samples.len();
    let design = nalgebra::DMatrix::from_fn(n, 4, |r, c| match c {
        0 => 1.0,
        1 => samples[r].b,
        2 => samples[r].l,
        _ => samples[r].tokens,
    });
    let rhs = nalgebra::DVector::from_fn(n, |r, _| samples[r].ms);

    let svd = design.clone().svd(true, true);
    let rank = svd.rank(1e-9 * svd.singular_values.max());
    if rank < 4 {
        return Err(ScheduleError::RankDeficient);
    }
    let coef = svd
        .solve(&rhs, 0.0)
        .map_err(|e| ScheduleError::SampleParse(e.to_string()))?;

    let fit = AffineFit {
        intercept: coef[0].max(0.0),
        per_batch: coef[1].max(0.0),
        per_len: coef[2].max(0.0),
        per_token: coef[3].max(0.0),
        rmse: 0.0,
    };
    let sse: f64 = samples
        .iter()
        .map(|s| {
            let e = fit.predict(s.b, s.l, s.tokens) - s.ms;
            e * e
        })
        .sum();
    Ok(AffineFit {
        rmse: (sse / n as f64).sqrt(),
        ..fit
    })
}

/// Post-verification budget update: γ ← clamp(accept_len + 1, 1, cap).
pub fn next_gamma(accept_len: usize, cfg: &SchedulerConfig) -> u32 {
    ((accept_len as u32).saturating_add(1)).clamp(1, cfg.gamma_cap)
}

/// Spread of a budget vector (max − min), used by the trimming invariant.
pub fn gamma_spread(gammas: &[u32]) -> u32 {
    match (gammas.iter().max(), gammas.iter().min()) {
        (Some(max), Some(min)) => max - min,
        _ => 0,
    }
}

/// Quick helper for building pool entries in tests and the simulator.
pub fn make_request(id: RequestId, prompt_len: usize, max_new: usize, gamma: u32) -> Request {
    Request {
        id,
        prompt: TokenSeq::from_ids(vec![0; prompt_len]),
        generated: TokenSeq::new(),
        mem: (prompt_len + max_new) as f64,
        gamma,
        accept_len_last: 0,
        max_new,
        domain: String::new(),
        arrival_ms: 0.0,
    }
}

/// Scales drafter fanout with verifier queue depth: strictly below `low`
/// the cluster may add a node per request, strictly above `high` it sheds
/// one. An interpretation hook; the defaults (low = 0, high = max) leave
/// fanout untouched regardless of load.
pub fn participation_fanout(
    base_fanout: usize,
    n_nodes: usize,
    queue_depth: usize,
    low: usize,
    high: usize,
) -> usize {
    if queue_depth > high {
        base_fanout.saturating_sub(1).max(1)
    } else if queue_depth < low {
        (base_fanout + 1).min(n_nodes)
    } else {
        base_fanout
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predict_ttl_reference_values() {
        let lat = LatencyModel::constant(1.0, 1.0);
        assert_eq!(predict_ttl(&[3], 1, 10, &lat), 2.0);

        let lat = LatencyModel {
            s0: 0.0,
            s_b: 0.0,
            s_l: 0.0,
            s_g: 1.0,
            v0: 3.0,
            v_b: 0.0,
            v_l: 0.0,
            v_g: 0.0,
        };
        assert_eq!(predict_ttl(&[2, 5], 2, 10, &lat), 8.0);
    }

    #[test]
    fn predict_ttl_monotone_in_token_totals() {
        let lat = LatencyModel {
            s0: 1.0,
            s_b: 0.1,
            s_l: 0.01,
            s_g: 0.5,
            v0: 2.0,
            v_b: 0.2,
            v_l: 0.02,
            v_g: 0.3,
        };
        let base = predict_ttl(&[2, 2], 2, 10, &lat);
        assert!(predict_ttl(&[4, 4], 2, 10, &lat) > base);
        assert!(predict_ttl(&[2, 2], 2, 20, &lat) > base);
    }

    #[test]
    fn adaptive_speculation_reference_traces() {
        assert_eq!(adaptive_speculation(&[3, 3], 6).unwrap(), vec![3, 3]);
        assert_eq!(adaptive_speculation(&[5, 2, 2], 7).unwrap(), vec![3, 2, 2]);
        // (4,4) cap 5: (4,4) → (3,4) → (3,3) → (2,3).
        assert_eq!(adaptive_speculation(&[4, 4], 5).unwrap(), vec![2, 3]);
    }

    #[test]
    fn adaptive_speculation_infeasible_cap() {
        assert_eq!(
            adaptive_speculation(&[1, 1, 1], 2),
            Err(ScheduleError::TokenCapTooSmall { cap: 2, count: 3 })
        );
    }

    #[test]
    fn adaptive_speculation_never_raises_and_keeps_floor() {
        let input = [7u32, 1, 3, 6, 2];
        let out = adaptive_speculation(&input, 9).unwrap();
        assert_eq!(out.iter().map(|g| *g as u64).sum::<u64>(), 9);
        for (a, b) in input.iter().zip(&out) {
            assert!(b <= a);
            assert!(*b >= 1);
        }
        assert!(gamma_spread(&out) <= gamma_spread(&input));
    }

    #[test]
    fn batch_assign_single_request() {
        let r = make_request(0, 8, 16, 3);
        let cfg = SchedulerConfig::default();
        let lat = LatencyModel::constant(1.0, 2.0);
        let plan = batch_assign(&[&r], &cfg, &lat).unwrap();
        assert_eq!(plan.selected, vec![0]);
        assert_eq!(plan.gammas, vec![3]);
        assert!((plan.objective - (3.0 + cfg.lambda * 3.0)).abs() < 1e-12);
    }

    #[test]
    fn batching_identical_requests_halves_per_request_latency() {
        let a = make_request(0, 8, 16, 3);
        let b = make_request(1, 8, 16, 3);
        let cfg = SchedulerConfig {
            lambda: 0.0,
            ..Default::default()
        };
        // No dependence on b or Γ: batching is free.
        let lat = LatencyModel {
            s0: 2.0,
            s_b: 0.0,
            s_l: 0.0,
            s_g: 0.0,
            v0: 2.0,
            v_b: 0.0,
            v_l: 0.0,
            v_g: 0.0,
        };
        let plan = batch_assign(&[&a, &b], &cfg, &lat).unwrap();
        assert_eq!(plan.selected, vec![0, 1]);
        assert_eq!(plan.objective, 2.0);
    }

    #[test]
    fn over_memory_request_never_selected() {
        let mut a = make_request(0, 8, 16, 3);
        a.mem = 1e12;
        let b = make_request(1, 8, 16, 3);
        let cfg = SchedulerConfig::default();
        let lat = LatencyModel::constant(1.0, 1.0);
        let plan = batch_assign(&[&a, &b], &cfg, &lat).unwrap();
        assert_eq!(plan.selected, vec![1]);
    }

    #[test]
    fn infeasible_pool_reports_reason() {
        let mut a = make_request(0, 8, 16, 3);
        a.mem = 1e12;
        let cfg = SchedulerConfig::default();
        let lat = LatencyModel::constant(1.0, 1.0);
        let plan = batch_assign(&[&a], &cfg, &lat).unwrap();
        assert!(plan.is_empty());
        let reason = plan.infeasible.unwrap();
        assert!(reason.contains("memory"), "{reason}");
    }

    #[test]
    fn plan_respects_all_caps() {
        let reqs: Vec<Request> = (0..6)
            .map(|i| make_request(i, 4 + i as usize, 16, 5))
            .collect();
        let pool: Vec<&Request> = reqs.iter().collect();
        let cfg = SchedulerConfig {
            gamma_max: 12,
            m_max: 90.0,
            t_max_ms: 50.0,
            lambda: 0.0,
            ..Default::default()
        };
        let lat = LatencyModel {
            s0: 1.0,
            s_b: 0.5,
            s_l: 0.1,
            s_g: 1.0,
            v0: 1.0,
            v_b: 0.5,
            v_l: 0.1,
            v_g: 0.5,
        };
        let plan = batch_assign(&pool, &cfg, &lat).unwrap();
        assert!(!plan.is_empty());
        assert!(plan.total_gamma <= cfg.gamma_max);
        assert!(plan.predicted_ttl_ms <= cfg.t_max_ms);
        let mem: f64 = plan.selected.iter().map(|id| reqs[*id as usize].mem).sum();
        assert!(mem <= cfg.m_max);
    }

    #[test]
    fn greedy_never_beats_exact() {
        let reqs: Vec<Request> = (0..8)
            .map(|i| make_request(i, 3 + (i as usize * 7) % 11, 16, 2 + (i as u32 % 4)))
            .collect();
        let pool: Vec<&Request> = reqs.iter().collect();
        let lat = LatencyModel {
            s0: 1.0,
            s_b: 0.4,
            s_l: 0.05,
            s_g: 0.8,
            v0: 2.0,
            v_b: 0.6,
            v_l: 0.02,
            v_g: 0.4,
        };
        let exact_cfg = SchedulerConfig {
            gamma_max: 16,
            ..Default::default()
        };
        let greedy_cfg = SchedulerConfig {
            solver: SolverKind::Greedy,
            ..exact_cfg.clone()
        };
        let exact = batch_assign(&pool, &exact_cfg, &lat).unwrap();
        let greedy = batch_assign(&pool, &greedy_cfg, &lat).unwrap();
        assert!(exact.objective <= greedy.objective + 1e-12);
    }

    #[test]
    fn calibrate_recovers_noiseless_coefficients() {
        let truth = AffineFit {
            intercept: 1.5,
            per_batch: 0.25,
            per_len: 0.03,
            per_token: 0.4,
            rmse: 0.0,
        };
        let mut samples = Vec::new();
        for b in 1..=4 {
            for l in [8.0, 16.0, 32.0] {
                for t in [2.0, 4.0, 8.0] {
                    samples.push(LatencySample {
                        b: b as f64,
                        l,
                        tokens: t,
                        ms: truth.predict(b as f64, l, t),
                    });
                }
            }
        }
        let fit = calibrate(&samples).unwrap();
        assert!((fit.intercept - truth.intercept).abs() < 1e-9);
        assert!((fit.per_batch - truth.per_batch).abs() < 1e-9);
        assert!((fit.per_len - truth.per_len).abs() < 1e-9);
        assert!((fit.per_token - truth.per_token).abs() < 1e-9);
        assert!(fit.rmse < 1e-9);
    }

    #[test]
    fn calibrate_constant_observations_yield_zero_slopes() {
        let samples: Vec<LatencySample> = (0..8)
            .map(|i| LatencySample {
                b: (i % 4 + 1) as f64,
                l: ((i * 3) % 5 + 1) as f64,
                tokens: ((i * 7) % 3 + 1) as f64,
                ms: 5.0,
            })
            .collect();
        let fit = calibrate(&samples).unwrap();
        assert!((fit.intercept - 5.0).abs() < 1e-9);
        assert!(fit.per_batch.abs() < 1e-9);
        assert!(fit.per_len.abs() < 1e-9);
        assert!(fit.per_token.abs() < 1e-9);
    }

    #[test]
    fn calibrate_names_the_constant_regressor() {
        let samples: Vec<LatencySample> = (0..6)
            .map(|i| LatencySample {
                b: 2.0,
                l: i as f64 + 1.0,
                tokens: (i * 2) as f64 + 1.0,
                ms: i as f64,
            })
            .collect();
        assert_eq!(
            calibrate(&samples),
            Err(ScheduleError::ConstantRegressor("b"))
        );
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let csv = "b,l,tokens,ms\n1,8,4,10.5\n2,8,4,12.0\n";
        let samples = read_samples_csv(csv.as_bytes()).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[1].b, 2.0);

        assert!(read_samples_csv("x,y\n1,2\n".as_bytes()).is_err());
        assert!(read_samples_csv("b,l,tokens,ms\n1,2,oops,4\n".as_bytes()).is_err());
    }

    #[test]
    fn gamma_update_tracks_acceptance() {
        let cfg = SchedulerConfig::default();
        assert_eq!(next_gamma(0, &cfg), 1);
        assert_eq!(next_gamma(3, &cfg), 4);
        assert_eq!(next_gamma(100, &cfg), cfg.gamma_cap);
    }

    #[test]
    fn participation_scales_with_queue_depth() {
        // Inert defaults: low = 0 never boosts.
        assert_eq!(participation_fanout(2, 4, 0, 0, usize::MAX), 2);
        assert_eq!(participation_fanout(2, 4, 0, 1, 2), 3);
        assert_eq!(participation_fanout(2, 4, 1, 1, 2), 2);
        assert_eq!(participation_fanout(2, 4, 5, 1, 2), 1);
        assert_eq!(participation_fanout(1, 4, 9, 1, 2), 1);
        assert_eq!(participation_fanout(4, 4, 0, 1, 2), 4);
    }
}
