//! Event traces, metrics, persistence and replay.
//!
//! A run emits a versioned header line followed by one JSON event per
//! line. Metrics are always derived from the trace, so recomputing them
//! from a persisted file is bit-identical to the original run.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::TokenId;
use crate::{NodeId, RequestId};

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace version {got} unsupported (expected {TRACE_VERSION})")]
    VersionMismatch { got: u32 },
    #[error("trace parse error at line {line}, byte offset {offset}: {msg}")]
    Parse {
        line: usize,
        offset: usize,
        msg: String,
    },
    #[error("trace has no events")]
    NoEvents,
    #[error("trace missing header line")]
    NoHeader,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// First line of a trace file. Carries enough of the cluster shape to
/// recompute cost metrics without the original config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub version: u32,
    pub seed: u64,
    pub mode: String,
    /// $/hr per drafter node, indexed by node id.
    pub drafter_rates: Vec<f64>,
    /// $/hr for the verifier.
    pub verifier_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub req: RequestId,
    /// Draft tokens accepted by the verifier this round.
    pub accept_len: usize,
    /// Draft tokens offered for verification this round.
    pub drafted: u32,
    /// Tokens actually appended to the request (after eos/max-length cut).
    pub appended: u32,
    /// The appended tokens themselves.
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    Arrival {
        t: f64,
        req: RequestId,
        domain: String,
    },
    DraftStart {
        t: f64,
        batch: u64,
        reqs: Vec<RequestId>,
        /// Routed drafter nodes, aligned with `reqs`.
        routed: Vec<Vec<NodeId>>,
        b: usize,
        l: usize,
        gammas: Vec<u32>,
    },
    DraftDone {
        t: f64,
        batch: u64,
    },
    VerifyStart {
        t: f64,
        batch: u64,
        b: usize,
        l: usize,
        /// Total draft-tree tokens shipped for verification.
        total_tokens: u64,
    },
    VerifyDone {
        t: f64,
        batch: u64,
        outcomes: Vec<VerifyOutcome>,
    },
    Complete {
        t: f64,
        req: RequestId,
        tokens: u64,
    },
}

impl TraceEvent {
    pub fn time(&self) -> f64 {
        match self {
            TraceEvent::Arrival { t, .. }
            | TraceEvent::DraftStart { t, .. }
            | TraceEvent::DraftDone { t, .. }
            | TraceEvent::VerifyStart { t, .. }
            | TraceEvent::VerifyDone { t, .. }
            | TraceEvent::Complete { t, .. } => *t,
        }
    }
}

/// Aggregated run metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub requests_completed: usize,
    pub total_tokens: u64,
    pub makespan_ms: f64,
    /// Mean over requests of (completion − arrival) / tokens generated.
    pub mean_latency_ms_per_token: f64,
    pub throughput_tokens_per_s: f64,
    /// Σ(node rate × busy time) / total tokens.
    pub cost_per_token: f64,
    pub verification_steps: u64,
    pub mean_accept_len: f64,
    /// Accepted draft tokens per verification step.
    pub acceptance_ratio: f64,
    pub drafter_busy_ms: Vec<f64>,
    pub verifier_busy_ms: f64,
}

impl Metrics {
    /// CSV summary, columns `metric,value,unit`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value,unit\n");
        let mut row = |m: &str, v: f64, u: &str| {
            out.push_str(&format!("{m},{v},{u}\n"));
        };
        row(
            "requests_completed",
            self.requests_completed as f64,
            "requests",
        );
        row("total_tokens", self.total_tokens as f64, "tokens");
        row("makespan", self.makespan_ms, "ms");
        row("mean_latency", self.mean_latency_ms_per_token, "ms/token");
        row("throughput", self.throughput_tokens_per_s, "tokens/s");
        row("cost_per_token", self.cost_per_token, "$/token");
        row(
            "verification_steps",
            self.verification_steps as f64,
            "steps",
        );
        row("mean_accept_len", self.mean_accept_len, "tokens");
        row("acceptance_ratio", self.acceptance_ratio, "tokens/step");
        out
    }
}

/// Derives metrics from a trace. Busy time is attributed per batch: every
/// drafter routed to at least one request in the batch is busy for the
/// whole drafting interval, and the verifier for the verification
/// interval.
pub fn compute_metrics(header: &TraceHeader, events: &[TraceEvent]) -> Result<Metrics, TraceError> {
    if events.is_empty() {
        return Err(TraceError::NoEvents);
    }

    let mut arrivals: std::collections::BTreeMap<RequestId, f64> = Default::default();
    let mut draft_start: std::collections::BTreeMap<u64, (f64, Vec<NodeId>)> = Default::default();
    let mut verify_start: std::collections::BTreeMap<u64, f64> = Default::default();
    let mut drafter_busy = vec![0.0f64; header.drafter_rates.len()];
    let mut verifier_busy = 0.0f64;
    let mut total_tokens = 0u64;
    let mut completed = 0usize;
    let mut latency_sum = 0.0f64;
    let mut steps = 0u64;
    let mut accepted_draft_tokens = 0u64;
    let mut makespan: f64 = 0.0;

    for ev in events {
        makespan = makespan.max(ev.time());
        match ev {
            TraceEvent::Arrival { t, req, .. } => {
                arrivals.insert(*req, *t);
            }
            TraceEvent::DraftStart {
                t, batch, routed, ..
            } => {
                let mut union: Vec<NodeId> = routed.iter().flatten().copied().collect();
                union.sort_unstable();
                union.dedup();
                draft_start.insert(*batch, (*t, union));
            }
            TraceEvent::DraftDone { t, batch } => {
                if let Some((t0, nodes)) = draft_start.get(batch) {
                    for n in nodes {
                        if let Some(b) = drafter_busy.get_mut(*n as usize) {
                            *b += t - t0;
                        }
                    }
                }
            }
            TraceEvent::VerifyStart { t, batch, .. } => {
                verify_start.insert(*batch, *t);
            }
            TraceEvent::VerifyDone { t, batch, outcomes } => {
                if let Some(t0) = verify_start.get(batch) {
                    verifier_busy += t - t0;
                }
                steps += outcomes.len() as u64;
                for o in outcomes {
                    accepted_draft_tokens += o.accept_len as u64;
                }
            }
            TraceEvent::Complete { t, req, tokens } => {
                completed += 1;
                total_tokens += tokens;
                if let Some(t0) = arrivals.get(req) {
                    if *tokens > 0 {
                        latency_sum += (t - t0) / *tokens as f64;
                    }
                }
            }
        }
    }

    let ms_to_hours = 1.0 / 3_600_000.0;
    let mut cost = verifier_busy * ms_to_hours * header.verifier_rate;
    for (n, busy) in drafter_busy.iter().enumerate() {
        cost += busy * ms_to_hours * header.drafter_rates[n];
    }

    Ok(Metrics {
        requests_completed: completed,
        total_tokens,
        makespan_ms: makespan,
        mean_latency_ms_per_token: if completed > 0 {
            latency_sum / completed as f64
        } else {
            0.0
        },
        throughput_tokens_per_s: if makespan > 0.0 {
            total_tokens as f64 / (makespan / 1000.0)
        } else {
            0.0
        },
        cost_per_token: if total_tokens > 0 {
            cost / total_tokens as f64
        } else {
            0.0
        },
        verification_steps: steps,
        mean_accept_len: if steps > 0 {
            accepted_draft_tokens as f64 / steps as f64
        } else {
            0.0
        },
        acceptance_ratio: if steps > 0 {
            accepted_draft_tokens as f64 / steps as f64
        } else {
            0.0
        },
        drafter_busy_ms: drafter_busy,
        verifier_busy_ms: verifier_busy,
    })
}

/// Writes header + events as JSON Lines.
pub fn write_trace<W: Write>(
    mut w: W,
    header: &TraceHeader,
    events: &[TraceEvent],
) -> Result<(), TraceError> {
    serde_json::to_writer(&mut w, header).map_err(|e| TraceError::Parse {
        line: 0,
        offset: 0,
        msg: e.to_string(),
    })?;
    w.write_all(b"\n")?;
    for ev in events {
        serde_json::to_writer(&mut w, ev).map_err(|e| TraceError::Parse {
            line: 0,
            offset: 0,
            msg: e.to_string(),
        })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a trace file back. Reports the line and byte offset of the first
/// malformed line.
pub fn read_trace<R: BufRead>(r: R) -> Result<(TraceHeader, Vec<TraceEvent>), TraceError> {
    let mut lines = r.lines();
    let mut offset = 0usize;
    let header_line = lines.next().ok_or(TraceError::NoHeader)??;
    let header: TraceHeader =
        serde_json::from_str(&header_line).map_err(|e| TraceError::Parse {
            line: 1,
            offset: 0,
            msg: e.to_string(),
        })?;
    if header.version != TRACE_VERSION {
        return Err(TraceError::VersionMismatch {
            got: header.version,
        });
    }
    offset += header_line.len() + 1;

    let mut events = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            offset += line.len() + 1;
            continue;
        }
        let ev: TraceEvent = serde_json::from_str(&line).map_err(|e| TraceError::Parse {
            line: i + 2,
            offset,
            msg: e.to_string(),
        })?;
        events.push(ev);
        offset += line.len() + 1;
    }
    if events.is_empty() {
        return Err(TraceError::NoEvents);
    }
    Ok((header, events))
}

/// Recomputes metrics from a persisted trace.
pub fn replay<R: BufRead>(r: R) -> Result<Metrics, TraceError> {
    let (header, events) = read_trace(r)?;
    compute_metrics(&header, &events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_trace() -> (TraceHeader, Vec<TraceEvent>) {
        let header = TraceHeader {
            version: TRACE_VERSION,
            seed: 7,
            mode: "sequential".into(),
            drafter_rates: vec![0.12, 0.22],
            verifier_rate: 5.67,
        };
        let events = vec![
            TraceEvent::Arrival {
                t: 0.0,
                req: 0,
                domain: "alpha".into(),
            },
            TraceEvent::DraftStart {
                t: 0.0,
                batch: 0,
                reqs: vec![0],
                routed: vec![vec![0, 1]],
                b: 1,
                l: 4,
                gammas: vec![4],
            },
            TraceEvent::DraftDone { t: 100.0, batch: 0 },
            TraceEvent::VerifyStart {
                t: 100.0,
                batch: 0,
                b: 1,
                l: 4,
                total_tokens: 4,
            },
            TraceEvent::VerifyDone {
                t: 400.0,
                batch: 0,
                outcomes: vec![VerifyOutcome {
                    req: 0,
                    accept_len: 3,
                    drafted: 4,
                    appended: 4,
                    tokens: vec![1, 2, 3, 4],
                }],
            },
            TraceEvent::Complete {
                t: 1000.0,
                req: 0,
                tokens: 10,
            },
        ];
        (header, events)
    }

    #[test]
    fn metrics_definitions() {
        let (header, events) = tiny_trace();
        let m = compute_metrics(&header, &events).unwrap();
        assert_eq!(m.requests_completed, 1);
        assert_eq!(m.total_tokens, 10);
        assert_eq!(m.makespan_ms, 1000.0);
        // 1000 ms for 10 tokens.
        assert!((m.mean_latency_ms_per_token - 100.0).abs() < 1e-12);
        assert!((m.throughput_tokens_per_s - 10.0).abs() < 1e-12);
        assert_eq!(m.mean_accept_len, 3.0);
        assert_eq!(m.acceptance_ratio, 3.0);
    }

    #[test]
    fn idle_nodes_cost_nothing_and_cost_scales_linearly() {
        let (header, mut events) = tiny_trace();
        // Node 1 never routed.
        if let TraceEvent::DraftStart { routed, .. } = &mut events[1] {
            *routed = vec![vec![0]];
        }
        let m = compute_metrics(&header, &events).unwrap();
        assert_eq!(m.drafter_busy_ms[1], 0.0);

        let mut doubled = header.clone();
        doubled.drafter_rates = header.drafter_rates.iter().map(|r| r * 2.0).collect();
        doubled.verifier_rate = header.verifier_rate * 2.0;
        let m2 = compute_metrics(&doubled, &events).unwrap();
        assert!((m2.cost_per_token - 2.0 * m.cost_per_token).abs() < 1e-15);
    }

    #[test]
    fn trace_round_trip_and_replay() {
        let (header, events) = tiny_trace();
        let mut buf = Vec::new();
        write_trace(&mut buf, &header, &events).unwrap();
        let (h2, e2) = read_trace(buf.as_slice()).unwrap();
        assert_eq!(h2, header);
        assert_eq!(e2, events);
        let direct = compute_metrics(&header, &events).unwrap();
        let replayed = replay(buf.as_slice()).unwrap();
        assert_eq!(direct, replayed);
    }

    #[test]
    fn trace_error_paths() {
        // Empty file.
        assert!(matches!(
            read_trace("".as_bytes()),
            Err(TraceError::NoHeader)
        ));

        // Header only: no events.
        let (header, _) = tiny_trace();
        let mut buf = Vec::new();
        write_trace(&mut buf, &header, &[]).unwrap();
        assert!(matches!(
            read_trace(buf.as_slice()),
            Err(TraceError::NoEvents)
        ));

        // Version mismatch.
        let bad = r#"{"version":99,"seed":1,"mode":"x","drafter_rates":[],"verifier_rate":0.0}"#;
        assert!(matches!(
            read_trace(bad.as_bytes()),
            Err(TraceError::VersionMismatch { got: 99 })
        ));

        // Truncated event line reports position.
        let (header, events) = tiny_trace();
        let mut buf = Vec::new();
        write_trace(&mut buf, &header, &events).unwrap();
        let cut = buf.len() - 8;
        match read_trace(&buf[..cut]) {
            Err(TraceError::Parse { line, offset, .. }) => {
                assert!(line >= 2);
                assert!(offset > 0);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
