//! Acceptance suite: one test per criterion, each printing a PASS line
//! with the measured quantity (run with `--nocapture` to see them all).

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use cospec_core::drafting::{fuse_step, route_request, routing_score, RoutingPolicy};
use cospec_core::models::TabularModel;
use cospec_core::net::spawn_loopback_cluster;
use cospec_core::oracle;
use cospec_core::pipeline::synthetic;
use cospec_core::pipeline::{
    run, run_with_engine, write_trace, AffineLat, ClusterSpec, DrafterSpec, Mode, Setup,
    TraceEvent, VerifierSpec, WorkloadItem,
};
use cospec_core::rng::{SeededSource, UniformSource};
use cospec_core::scheduler::{
    adaptive_speculation, batch_assign, LatencyModel, Request, ScheduleError, SchedulerConfig,
    SolverKind,
};
use cospec_core::vocab::Vocabulary;
use cospec_core::{NodeId, Prob, RequestId};

const TVD_TOL: f64 = 1e-12;

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{criterion} failed: {detail}");
}

// --- 1. distribution preservation, linear ---------------------------------

#[test]
fn criterion_1_linear_distribution_preservation() {
    let started = Instant::now();
    let rep = oracle::run_linear_suite(500, 6, 3, 0xace1);
    let elapsed = started.elapsed();
    let detail = format!(
        "{} cases, {} branches, max TVD {:.3e}, mass err {:.3e}, {:.1?}",
        rep.cases, rep.total_branches, rep.max_tvd, rep.max_mass_err, elapsed
    );
    report(
        "1 linear-preservation",
        rep.max_tvd <= TVD_TOL && elapsed <= Duration::from_secs(60),
        &detail,
    );
}

// --- 2. distribution preservation, tree ------------------------------------

#[test]
fn criterion_2_tree_distribution_preservation() {
    let started = Instant::now();
    let rep = oracle::run_tree_suite(200, 5, 3, 2, 0xace2);
    let elapsed = started.elapsed();
    let detail = format!(
        "{} cases, {} branches, max TVD {:.3e}, mass err {:.3e}, {:.1?}",
        rep.cases, rep.total_branches, rep.max_tvd, rep.max_mass_err, elapsed
    );
    report(
        "2 tree-preservation",
        rep.max_tvd <= TVD_TOL && elapsed <= Duration::from_secs(120),
        &detail,
    );
}

// --- 3. scheduler optimality ------------------------------------------------

/// Reference while-loop from the trimming rule, reimplemented without the
/// library's helper.
fn oracle_trim(gammas: &[u32], cap: u64) -> Option<Vec<u32>> {
    if gammas.len() as u64 > cap {
        return None;
    }
    let mut g = gammas.to_vec();
    let mut total: u64 = g.iter().map(|x| *x as u64).sum();
    while total > cap {
        let mut j = 0usize;
        for i in 1..g.len() {
            if g[i] > g[j] {
                j = i;
            }
        }
        g[j] -= 1;
        total -= 1;
    }
    Some(g)
}

/// Brute-force best objective over every non-empty subset, trimmed
/// budgets included. Recomputes every quantity from the raw definitions.
fn oracle_best_objective(
    pool: &[Request],
    cfg: &SchedulerConfig,
    lat: &LatencyModel,
) -> Option<f64> {
    let n = pool.len();
    let mut best: Option<f64> = None;
    for mask in 1u64..(1u64 << n) {
        let idxs: Vec<usize> = (0..n).filter(|b| mask & (1 << b) != 0).collect();
        let mem: f64 = idxs.iter().map(|&i| pool[i].mem).sum();
        if mem > cfg.m_max {
            continue;
        }
        let gammas: Vec<u32> = idxs.iter().map(|&i| pool[i].gamma).collect();
        let Some(trimmed) = oracle_trim(&gammas, cfg.gamma_max) else {
            continue;
        };
        let b = idxs.len() as f64;
        let l = idxs.iter().map(|&i| pool[i].seq_len()).max().unwrap() as f64;
        let total: u64 = trimmed.iter().map(|g| *g as u64).sum();
        let ssm = trimmed
            .iter()
            .map(|g| lat.s0 + lat.s_b * b + lat.s_l * l + lat.s_g * *g as f64)
            .fold(f64::MIN, f64::max);
        let ttl = ssm + lat.v0 + lat.v_b * b + lat.v_l * l + lat.v_g * total as f64;
        if ttl > cfg.t_max_ms {
            continue;
        }
        let obj = ttl / b + cfg.lambda * total as f64;
        best = Some(best.map_or(obj, |cur: f64| cur.min(obj)));
    }
    best
}

#[test]
fn criterion_3_scheduler_matches_brute_force() {
    let started = Instant::now();
    let mut src = SeededSource::new(0xace3);
    let mut rint = |lo: usize, hi: usize| lo + (src.next_uniform() * (hi - lo + 1) as f64) as usize;

    let mut worst_gap = 0.0f64;
    let mut feasible_pools = 0usize;
    for case in 0..200 {
        let n = 1 + (case % 12);
        let mut src2 = SeededSource::new(0xbb00 + case as u64);
        let pool: Vec<Request> = (0..n)
            .map(|i| {
                let prompt_len = 2 + (src2.next_uniform() * 30.0) as usize;
                let mut r = cospec_core::scheduler::make_request(
                    i as RequestId,
                    prompt_len,
                    16,
                    1 + (src2.next_uniform() * 6.0) as u32,
                );
                r.mem = 1.0 + src2.next_uniform() * 20.0;
                r
            })
            .collect();
        let lat = LatencyModel {
            s0: src2.next_uniform() * 2.0,
            s_b: src2.next_uniform(),
            s_l: src2.next_uniform() * 0.1,
            s_g: src2.next_uniform(),
            v0: src2.next_uniform() * 2.0,
            v_b: src2.next_uniform(),
            v_l: src2.next_uniform() * 0.1,
            v_g: src2.next_uniform(),
        };
        let cfg = SchedulerConfig {
            lambda: src2.next_uniform() * 0.1,
            t_max_ms: 2.0 + src2.next_uniform() * 30.0,
            m_max: 5.0 + src2.next_uniform() * 80.0,
            gamma_max: rint(1, 3 * n) as u64,
            solver: SolverKind::Exact,
            exact_threshold: 12,
            gamma0: 4,
            gamma_cap: 8,
        };

        let refs: Vec<&Request> = pool.iter().collect();
        let plan = batch_assign(&refs, &cfg, &lat).unwrap();
        let expected = oracle_best_objective(&pool, &cfg, &lat);
        match expected {
            Some(obj) => {
                feasible_pools += 1;
                assert!(
                    !plan.is_empty(),
                    "case {case}: oracle found a feasible plan, solver did not"
                );
                worst_gap = worst_gap.max((plan.objective - obj).abs());
            }
            None => assert!(
                plan.is_empty(),
                "case {case}: solver found an infeasible plan"
            ),
        }
    }

    // Trimming matches the reference loop element-for-element.
    let mut trim_cases = 0usize;
    for case in 0..200u64 {
        let mut src3 = SeededSource::new(0xcc00 + case);
        let n = 1 + (src3.next_uniform() * 7.0) as usize;
        let g: Vec<u32> = (0..n)
            .map(|_| 1 + (src3.next_uniform() * 8.0) as u32)
            .collect();
        let cap = (src3.next_uniform() * (3 * n) as f64) as u64;
        match (adaptive_speculation(&g, cap), oracle_trim(&g, cap)) {
            (Ok(got), Some(want)) => {
                assert_eq!(got, want, "case {case}");
                trim_cases += 1;
            }
            (Err(ScheduleError::TokenCapTooSmall { .. }), None) => {}
            (got, want) => panic!("case {case}: {got:?} vs {want:?}"),
        }
    }

    let elapsed = started.elapsed();
    let detail = format!(
        "200 pools ({feasible_pools} feasible), worst objective gap {worst_gap:.3e}, {trim_cases} trim vectors matched, {elapsed:.1?}"
    );
    report(
        "3 scheduler-optimality",
        worst_gap <= 1e-9 && elapsed <= Duration::from_secs(60),
        &detail,
    );
}

// --- 4. routing & fusion properties -----------------------------------------

#[test]
fn criterion_4_routing_and_fusion_properties() {
    let mut src = SeededSource::new(0xace4);

    // Monotonicity by finite differences over 10k random vectors.
    let mut checked = 0usize;
    for _ in 0..10_000 {
        let k = 1 + (src.next_uniform() * 5.0) as usize;
        let c: Vec<Prob> = (0..k).map(|_| 0.02 + src.next_uniform() * 0.95).collect();
        let d: Vec<Prob> = (0..k).map(|_| 0.02 + src.next_uniform() * 0.95).collect();
        let s: f64 = routing_score(&c, &d).unwrap();
        assert!(s > 0.0 && s < 1.0);
        let i = (src.next_uniform() * k as f64) as usize % k;
        let h = 0.005;
        let mut c2 = c.clone();
        c2[i] += h;
        assert!(
            routing_score::<f64>(&c2, &d).unwrap() > s,
            "score must rise in c[{i}]"
        );
        let mut d2 = d.clone();
        d2[i] += h;
        assert!(
            routing_score::<f64>(&c, &d2).unwrap() > s,
            "score must rise in d[{i}]"
        );
        checked += 1;
    }

    // fuse_step is the confidence argmax with (node id, token id) ties.
    for case in 0..2000u64 {
        let mut s2 = SeededSource::new(0xdd00 + case);
        let n = 1 + (s2.next_uniform() * 6.0) as usize;
        let cands: Vec<(NodeId, u32, Prob)> = (0..n)
            .map(|i| {
                (
                    i as NodeId,
                    (s2.next_uniform() * 9.0) as u32,
                    // Coarse grid to force ties.
                    (s2.next_uniform() * 4.0).floor() / 4.0 + 0.1,
                )
            })
            .collect();
        let (tok, node) = fuse_step(&cands).unwrap();
        let best = cands
            .iter()
            .fold(None::<&(NodeId, u32, Prob)>, |acc, c| match acc {
                None => Some(c),
                Some(b) => {
                    if c.2 > b.2 || (c.2 == b.2 && (c.0 < b.0 || (c.0 == b.0 && c.1 < b.1))) {
                        Some(c)
                    } else {
                        Some(b)
                    }
                }
            })
            .unwrap();
        assert_eq!((tok, node), (best.1, best.0), "case {case}: {cands:?}");
    }

    // route_request with alpha = 1 equals top-k, exhaustively over
    // permutations for N ≤ 6 and sampled rows for N = 7, 8.
    let mut topk_rows = 0usize;
    for n in 1..=8usize {
        for fanout in 1..=3usize.min(n) {
            let policy = RoutingPolicy {
                alpha: 1.0,
                beta: 0.0,
                tau: 2,
                fanout,
                decay: 0.9,
            };
            let rows: Vec<Vec<Prob>> = if n <= 6 {
                permutations((0..n).map(|i| 0.1 + 0.1 * i as f64).collect())
            } else {
                (0..200)
                    .map(|c| {
                        let mut s3 = SeededSource::new(0xee00 + c);
                        // Quantized so ties occur.
                        (0..n)
                            .map(|_| (s3.next_uniform() * 5.0).floor() / 10.0 + 0.2)
                            .collect()
                    })
                    .collect()
            };
            for row in rows {
                let mut rng = SeededSource::new(1);
                let got = route_request(&row, &policy, 0, &mut rng).unwrap();
                let want = reference_top_k(&row, fanout);
                assert_eq!(got, want, "row {row:?} fanout {fanout}");
                topk_rows += 1;
            }
        }
    }

    // Exploration and exploitation branches are the same operator at the
    // same coefficient: identical draws yield identical selections.
    for case in 0..500u64 {
        let mut s4 = SeededSource::new(0xf100 + case);
        let n = 2 + (s4.next_uniform() * 6.0) as usize;
        let row: Vec<Prob> = (0..n).map(|_| s4.next_uniform()).collect();
        let coef = s4.next_uniform();
        let explore_policy = RoutingPolicy {
            alpha: coef.max(1e-9),
            beta: 0.0,
            tau: 10,
            fanout: 2.min(n),
            decay: 0.9,
        };
        let exploit_policy = RoutingPolicy {
            alpha: 1.0,
            beta: coef.max(1e-9),
            tau: 0,
            fanout: 2.min(n),
            decay: 0.9,
        };
        let mut r1 = SeededSource::new(case);
        let mut r2 = SeededSource::new(case);
        // accept_len 0 < tau=10 → exploration with alpha=coef;
        // accept_len 5 ≥ tau=0 → exploitation with beta=coef.
        let a = route_request(&row, &explore_policy, 0, &mut r1).unwrap();
        let b = route_request(&row, &exploit_policy, 5, &mut r2).unwrap();
        assert_eq!(a, b, "case {case}");
    }

    report(
        "4 routing-fusion-properties",
        true,
        &format!("{checked} monotonicity probes, 2000 fusion cases, {topk_rows} top-k rows, 500 branch-identity cases"),
    );
}

fn permutations(values: Vec<f64>) -> Vec<Vec<f64>> {
    if values.len() <= 1 {
        return vec![values];
    }
    let mut out = Vec::new();
    for i in 0..values.len() {
        let mut rest = values.clone();
        let head = rest.remove(i);
        for mut tail in permutations(rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

fn reference_top_k(row: &[Prob], k: usize) -> Vec<NodeId> {
    let mut order: Vec<NodeId> = (0..row.len() as NodeId).collect();
    order.sort_by(|a, b| {
        row[*b as usize]
            .partial_cmp(&row[*a as usize])
            .unwrap()
            .then(a.cmp(b))
    });
    let mut sel: Vec<NodeId> = order.into_iter().take(k).collect();
    sel.sort_unstable();
    sel
}

// --- 5. ensemble trend --------------------------------------------------------

#[test]
fn criterion_5_ensemble_trend_on_three_domain_workload() {
    let started = Instant::now();
    let workload = synthetic::three_domain_workload(1000, 5.0, 24, 7);

    let routed = synthetic::three_domain_setup(0.8);
    assert_eq!(routed.routing.fanout, 2);
    let routed_out = run(&routed, &workload, Mode::Sequential, 17).unwrap();

    let mut random_single = synthetic::three_domain_setup(0.8);
    random_single.routing = RoutingPolicy {
        alpha: 1e-12,
        beta: 0.0,
        tau: 2,
        fanout: 1,
        decay: 0.9,
    };
    let random_out = run(&random_single, &workload, Mode::Sequential, 17).unwrap();

    let ratio = routed_out.metrics.mean_accept_len / random_out.metrics.mean_accept_len;
    let elapsed = started.elapsed();
    let detail = format!(
        "routed+fused mean accept {:.3}, random single-drafter {:.3}, ratio {:.3} (need ≥ 1.10), {:.1?}",
        routed_out.metrics.mean_accept_len, random_out.metrics.mean_accept_len, ratio, elapsed
    );
    report(
        "5 ensemble-trend",
        ratio >= 1.10 && elapsed <= Duration::from_secs(300),
        &detail,
    );
}

// --- 6. pipelining benefit ----------------------------------------------------

/// Deterministic model: always continues with token 0.
fn chain_model(v: usize) -> TabularModel {
    let mut probs = vec![0.0; v];
    probs[0] = 1.0;
    TabularModel::new(
        0,
        BTreeMap::new(),
        cospec_core::dist::Distribution::new(probs).unwrap(),
    )
    .unwrap()
}

fn balanced_setup(stage_ms: f64) -> Setup {
    let v = 4;
    let target = chain_model(v);
    let cluster = ClusterSpec {
        drafters: vec![
            DrafterSpec {
                model: Arc::new(target.clone()),
                domain: "a".into(),
                cost_per_hour: 0.12,
                latency: AffineLat::constant(stage_ms),
            },
            DrafterSpec {
                model: Arc::new(target.clone()),
                domain: "b".into(),
                cost_per_hour: 0.22,
                latency: AffineLat::constant(stage_ms),
            },
        ],
        verifier: VerifierSpec {
            model: Arc::new(target),
            cost_per_hour: 5.67,
            latency: AffineLat::constant(stage_ms),
        },
    };
    Setup {
        vocab: Vocabulary::numbered(v).unwrap(),
        embeddings: onehot(v),
        cluster,
        sched: SchedulerConfig {
            gamma_max: 16,
            ..Default::default()
        },
        planner: LatencyModel::constant(stage_ms, stage_ms),
        routing: RoutingPolicy {
            fanout: 2,
            ..Default::default()
        },
        queue_low: 0,
        queue_high: usize::MAX,
    }
}

fn onehot(v: usize) -> cospec_core::Embeddings {
    cospec_core::embed::EmbeddingTable::new(
        v,
        (0..v)
            .map(|i| {
                let mut e = vec![0.0; v];
                e[i] = 1.0;
                e
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn criterion_6_pipelining_benefit() {
    let setup = balanced_setup(10.0);
    let workload: Vec<WorkloadItem> = (0..32)
        .map(|i| WorkloadItem {
            arrival_ms: 0.0,
            prompt: vec![0, 0, (i % 4) as u32],
            max_new: 12,
            domain: "a".into(),
        })
        .collect();

    let seq = run(&setup, &workload, Mode::Sequential, 21).unwrap();
    let pip = run(&setup, &workload, Mode::Pipelined, 21).unwrap();

    let makespan_ratio = pip.metrics.makespan_ms / seq.metrics.makespan_ms;
    let cost_ok = pip.metrics.cost_per_token <= seq.metrics.cost_per_token * (1.0 + 1e-9);
    let detail = format!(
        "T_ssm = T_llm = 10 ms per batch; makespan pipelined {:.1} ms vs sequential {:.1} ms (ratio {:.3}, need ≤ 0.9); cost/token {:.3e} vs {:.3e} $ (rates 0.12/0.22/5.67 per hr)",
        pip.metrics.makespan_ms,
        seq.metrics.makespan_ms,
        makespan_ratio,
        pip.metrics.cost_per_token,
        seq.metrics.cost_per_token
    );
    report(
        "6 pipelining-benefit",
        makespan_ratio <= 0.9 && cost_ok,
        &detail,
    );
}

// --- 7. determinism & transport transparency -----------------------------------

fn tokens_by_request(events: &[TraceEvent]) -> BTreeMap<RequestId, Vec<u32>> {
    let mut out: BTreeMap<RequestId, Vec<u32>> = BTreeMap::new();
    for ev in events {
        if let TraceEvent::VerifyDone { outcomes, .. } = ev {
            for o in outcomes {
                out.entry(o.req)
                    .or_default()
                    .extend(o.tokens.iter().copied());
            }
        }
    }
    out
}

#[test]
fn criterion_7_determinism_and_transport_transparency() {
    // Byte-identical traces for identical (workload, config, seed).
    let setup = synthetic::three_domain_setup(0.8);
    let workload = synthetic::three_domain_workload(100, 5.0, 16, 3);
    let a = run(&setup, &workload, Mode::Pipelined, 5).unwrap();
    let b = run(&setup, &workload, Mode::Pipelined, 5).unwrap();
    let mut bytes_a = Vec::new();
    let mut bytes_b = Vec::new();
    write_trace(&mut bytes_a, &a.header, &a.events).unwrap();
    write_trace(&mut bytes_b, &b.header, &b.events).unwrap();
    assert_eq!(
        bytes_a, bytes_b,
        "identical runs must serialize identically"
    );

    // Loopback wall-clock cluster vs in-process: token-identical output
    // on 50 seeded scenarios.
    let mut scenarios = 0usize;
    for seed in 0..50u64 {
        let setup = synthetic::three_domain_setup(0.8);
        let workload = synthetic::three_domain_workload(5, 2.0, 6, 1000 + seed);
        let local = run(&setup, &workload, Mode::Sequential, seed).unwrap();

        let (mut engine, handles) =
            spawn_loopback_cluster(&setup.cluster, Duration::from_millis(500));
        let remote =
            run_with_engine(&setup, &workload, Mode::Sequential, seed, &mut engine).unwrap();
        engine.shutdown();
        for h in handles {
            h.join()
                .expect("worker joins")
                .expect("worker exits cleanly");
        }

        assert_eq!(
            tokens_by_request(&local.events),
            tokens_by_request(&remote.events),
            "seed {seed}: loopback and in-process token outputs differ"
        );
        scenarios += 1;
    }

    report(
        "7 determinism-transparency",
        true,
        &format!("byte-identical traces; {scenarios} loopback scenarios token-identical"),
    );
}

// --- 8. protocol robustness -----------------------------------------------------

#[test]
fn criterion_8_protocol_round_trip_and_fuzz() {
    use cospec_core::net::{decode, encode, Decoded, Frame, FrameKind};

    let kinds = [
        FrameKind::RouteRequest,
        FrameKind::DraftStep,
        FrameKind::FusedToken,
        FrameKind::DraftTreeMsg,
        FrameKind::VerifyResult,
        FrameKind::Join,
        FrameKind::Leave,
        FrameKind::Heartbeat,
    ];

    // 10k random frames round-trip bit-exactly.
    let mut src = SeededSource::new(0xace8);
    for case in 0..10_000usize {
        let kind = kinds[case % kinds.len()];
        let len = (src.next_uniform() * 256.0) as usize;
        let payload: Vec<u8> = (0..len)
            .map(|_| (src.next_uniform() * 256.0) as u8)
            .collect();
        let frame = Frame::new(kind, (src.next_uniform() * 1e12) as u64, payload);
        let bytes = encode(&frame).unwrap();
        match decode(&bytes).unwrap() {
            Decoded::Frame(parsed, consumed) => {
                assert_eq!(parsed, frame);
                assert_eq!(consumed, bytes.len());
            }
            Decoded::NeedMore(n) => panic!("complete frame reported NeedMore({n})"),
        }
    }

    // Fuzzed byte streams never panic: random bytes, truncations, and
    // single-byte corruptions of valid frames.
    let mut fuzz_cases = 0usize;
    for case in 0..10_000u64 {
        let mut s = SeededSource::new(0xfa11 + case);
        let len = (s.next_uniform() * 64.0) as usize;
        let bytes: Vec<u8> = (0..len).map(|_| (s.next_uniform() * 256.0) as u8).collect();
        let _ = decode(&bytes); // must return, never panic
        fuzz_cases += 1;
    }
    let valid = encode(&Frame::new(FrameKind::DraftStep, 3, vec![1, 2, 3, 4])).unwrap();
    for i in 0..valid.len() {
        for delta in [1u8, 0x80] {
            let mut corrupted = valid.clone();
            corrupted[i] = corrupted[i].wrapping_add(delta);
            let _ = decode(&corrupted);
            fuzz_cases += 1;
        }
        let _ = decode(&valid[..i]);
        fuzz_cases += 1;
    }

    // Typed payload parsers tolerate arbitrary payloads.
    for case in 0..2_000u64 {
        let mut s = SeededSource::new(0xfeed + case);
        let len = (s.next_uniform() * 48.0) as usize;
        let payload: Vec<u8> = (0..len).map(|_| (s.next_uniform() * 256.0) as u8).collect();
        use cospec_core::net::*;
        let f = Frame::new(FrameKind::DraftStep, 0, payload.clone());
        let _ = DraftStepMsg::parse(&f);
        let f = Frame::new(FrameKind::RouteRequest, 0, payload.clone());
        let _ = RouteRequestMsg::parse(&f);
        let f = Frame::new(FrameKind::DraftTreeMsg, 0, payload.clone());
        let _ = DraftTreeMsgBody::parse(&f);
        let f = Frame::new(FrameKind::VerifyResult, 0, payload.clone());
        let _ = VerifyResultMsg::parse(&f);
        let f = Frame::new(FrameKind::Join, 0, payload);
        let _ = JoinMsg::parse(&f);
        fuzz_cases += 1;
    }

    report(
        "8 protocol-robustness",
        true,
        &format!("10000 round-trips, {fuzz_cases} fuzz inputs without a panic"),
    );
}
