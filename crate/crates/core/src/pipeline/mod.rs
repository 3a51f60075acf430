//! End-to-end engine: request pool, discrete-event clock, and the
//! continuous batching loop.
//!
//! Each cycle schedules a batch from the pool, routes every selected
//! request to drafter nodes, runs a cooperative drafting round, assembles
//! and prunes the draft tree, verifies it against the target, feeds the
//! outcome back into routing scores and speculation budgets, and requeues
//! unfinished requests. Time is virtual: drafting and verification
//! occupy the cluster and the server for latencies given by per-node
//! affine models. In pipelined mode drafting of the next batch overlaps
//! verification of the current one (one-stage pipeline with a one-batch
//! buffer); in sequential mode the stages never overlap.
//!
//! A request's token trajectory depends only on its own state (routing
//! row, budget, per-round derived RNG streams), never on batch
//! composition, so identical (workload, config, seed) runs produce
//! byte-identical traces and the wire-protocol engine produces
//! token-identical output.

pub mod synthetic;
pub mod trace;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drafting::{
    cooperative_generate, route_request_with_fanout, tree_selection, update_routing, DraftRound,
    DraftingError, RoutingMatrix, RoutingPolicy,
};
use crate::models::Model;
use crate::rng::SeededSource;
use crate::scheduler::{
    batch_assign, next_gamma, participation_fanout, LatencyModel, Request, ScheduleError,
    SchedulerConfig,
};
use crate::verify::{verify_tree, DraftTree, VerifyError};
use crate::vocab::{TokenId, TokenSeq, Vocabulary};
use crate::{Embeddings, NodeId, RequestId};

pub use trace::{
    compute_metrics, read_trace, replay, write_trace, Metrics, TraceError, TraceEvent, TraceHeader,
    VerifyOutcome, TRACE_VERSION,
};

const ROUTE_TAG: u64 = 0x5207;
const VERIFY_TAG: u64 = 0xf237;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no feasible schedule: {0}")]
    Infeasible(String),
    #[error("setup invalid: {0}")]
    BadSetup(String),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Drafting(#[from] DraftingError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("draft engine failed: {0}")]
    Engine(String),
}

/// Execution mode of the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pipelined,
    Sequential,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Pipelined => write!(f, "pipelined"),
            Mode::Sequential => write!(f, "sequential"),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pipelined" => Ok(Mode::Pipelined),
            "sequential" => Ok(Mode::Sequential),
            other => Err(format!("unknown mode `{other}` (pipelined|sequential)")),
        }
    }
}

/// Affine latency in milliseconds as a function of batch size, critical
/// length, and token count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineLat {
    pub base: f64,
    pub per_batch: f64,
    pub per_len: f64,
    pub per_token: f64,
}

impl AffineLat {
    pub fn constant(ms: f64) -> Self {
        Self {
            base: ms,
            per_batch: 0.0,
            per_len: 0.0,
            per_token: 0.0,
        }
    }

    pub fn eval(&self, b: usize, l: usize, tokens: u64) -> f64 {
        self.base
            + self.per_batch * b as f64
            + self.per_len * l as f64
            + self.per_token * tokens as f64
    }
}

/// A drafter node of the speculation cluster.
#[derive(Clone)]
pub struct DrafterSpec {
    pub model: Arc<dyn Model>,
    pub domain: String,
    pub cost_per_hour: f64,
    pub latency: AffineLat,
}

/// The verification server.
#[derive(Clone)]
pub struct VerifierSpec {
    pub model: Arc<dyn Model>,
    pub cost_per_hour: f64,
    pub latency: AffineLat,
}

/// Cluster topology: N drafters, one verifier.
#[derive(Clone)]
pub struct ClusterSpec {
    pub drafters: Vec<DrafterSpec>,
    pub verifier: VerifierSpec,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.drafters.is_empty() {
            return Err(PipelineError::BadSetup(
                "cluster needs at least one drafter".into(),
            ));
        }
        let v = self.verifier.model.vocab_size();
        for (i, d) in self.drafters.iter().enumerate() {
            if d.model.vocab_size() != v {
                return Err(PipelineError::BadSetup(format!(
                    "drafter {i} vocab size {} differs from verifier {v}",
                    d.model.vocab_size()
                )));
            }
            if d.cost_per_hour < 0.0 {
                return Err(PipelineError::BadSetup(format!(
                    "drafter {i} has negative cost rate"
                )));
            }
        }
        if self.verifier.cost_per_hour < 0.0 {
            return Err(PipelineError::BadSetup(
                "verifier has negative cost rate".into(),
            ));
        }
        Ok(())
    }
}

/// Everything a run needs besides the workload.
pub struct Setup {
    pub vocab: Vocabulary,
    pub embeddings: Embeddings,
    pub cluster: ClusterSpec,
    pub sched: SchedulerConfig,
    /// Planning latency model used by the batch scheduler.
    pub planner: LatencyModel,
    pub routing: RoutingPolicy,
    /// Verifier queue depth below which the cluster may add a drafter per
    /// request (strictly-below semantics; 0 disables).
    pub queue_low: usize,
    /// Queue depth above which it sheds one.
    pub queue_high: usize,
}

impl Setup {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.cluster.validate()?;
        self.routing
            .validate(self.cluster.drafters.len())
            .map_err(PipelineError::Drafting)?;
        self.planner.validate().map_err(PipelineError::Schedule)?;
        if self.embeddings.len() < self.vocab.size() {
            return Err(PipelineError::BadSetup(format!(
                "embedding table covers {} tokens, vocabulary has {}",
                self.embeddings.len(),
                self.vocab.size()
            )));
        }
        Ok(())
    }
}

/// One workload line: `{"arrival_ms":t, "prompt":[ids], "max_new":n, "domain":"label"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadItem {
    pub arrival_ms: f64,
    pub prompt: Vec<TokenId>,
    /// Generation cap; defaults to 128 when a workload line omits it.
    #[serde(default = "default_max_new")]
    pub max_new: usize,
    #[serde(default)]
    pub domain: String,
}

fn default_max_new() -> usize {
    128
}

pub fn read_workload<R: std::io::BufRead>(r: R) -> Result<Vec<WorkloadItem>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| PipelineError::BadSetup(format!("workload read: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: WorkloadItem = serde_json::from_str(&line)
            .map_err(|e| PipelineError::BadSetup(format!("workload line {}: {e}", i + 1)))?;
        out.push(item);
    }
    if out.is_empty() {
        return Err(PipelineError::BadSetup("workload is empty".into()));
    }
    Ok(out)
}

pub fn write_workload<W: std::io::Write>(mut w: W, items: &[WorkloadItem]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Produces one cooperative drafting round. The in-process implementation
/// calls the drafting module directly; the wire-protocol implementation
/// drives remote workers through the same per-iteration barrier.
pub trait DraftEngine {
    fn run_round(
        &mut self,
        nodes: &[NodeId],
        prefix: &TokenSeq,
        k: usize,
    ) -> Result<DraftRound, PipelineError>;
}

/// Runs drafting rounds against the cluster models in this process.
pub struct InProcessEngine<'a> {
    cluster: &'a ClusterSpec,
}

impl<'a> InProcessEngine<'a> {
    pub fn new(cluster: &'a ClusterSpec) -> Self {
        Self { cluster }
    }
}

impl DraftEngine for InProcessEngine<'_> {
    fn run_round(
        &mut self,
        nodes: &[NodeId],
        prefix: &TokenSeq,
        k: usize,
    ) -> Result<DraftRound, PipelineError> {
        let refs: Vec<(NodeId, &dyn Model)> = nodes
            .iter()
            .map(|n| (*n, self.cluster.drafters[*n as usize].model.as_ref()))
            .collect();
        Ok(cooperative_generate(&refs, prefix, k)?)
    }
}

#[derive(Debug)]
enum Event {
    Arrival(usize),
    DraftDone(u64),
    VerifyDone(u64),
}

struct QueueEntry {
    time: f64,
    seq: u64,
    event: Event,
}

impl PartialEq for QueueEntry {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for QueueEntry {}
impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueueEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap via reversal: earliest time first, then insertion order.
        other
            .time
            .partial_cmp(&self.time)
            .expect("event times are finite")
            .then(other.seq.cmp(&self.seq))
    }
}

/// Virtual clock with a deterministic (time, insertion order) event queue.
struct EventClock {
    heap: BinaryHeap<QueueEntry>,
    seq: u64,
    now: f64,
}

impl EventClock {
    fn new() -> Self {
        Self {
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
        }
    }

    fn push(&mut self, time: f64, event: Event) {
        debug_assert!(time.is_finite());
        self.heap.push(QueueEntry {
            time,
            seq: self.seq,
            event,
        });
        self.seq += 1;
    }

    fn pop(&mut self) -> Option<(f64, Event)> {
        let e = self.heap.pop()?;
        debug_assert!(e.time >= self.now, "event time regressed");
        self.now = e.time;
        Some((e.time, e.event))
    }
}

struct BatchWork {
    id: u64,
    b: usize,
    l: usize,
    total_tree_tokens: u64,
    items: Vec<BatchItem>,
}

struct BatchItem {
    request: Request,
    round_idx: u64,
    routed: Vec<NodeId>,
    round: DraftRound,
    tree: DraftTree,
    gamma: u32,
}

/// Pool of live requests plus the routing matrix; every request is in
/// exactly one of pending / in-flight / completed.
struct RequestPool {
    pending: BTreeMap<RequestId, Request>,
    in_flight: BTreeSet<RequestId>,
    completed: BTreeSet<RequestId>,
    matrix: RoutingMatrix,
}

impl RequestPool {
    fn new(n_nodes: usize) -> Self {
        Self {
            pending: BTreeMap::new(),
            in_flight: BTreeSet::new(),
            completed: BTreeSet::new(),
            matrix: RoutingMatrix::new(n_nodes),
        }
    }

    fn admit(&mut self, req: Request) {
        self.matrix.insert_request(req.id);
        self.pending.insert(req.id, req);
    }

    fn take_for_batch(&mut self, id: RequestId) -> Request {
        let req = self
            .pending
            .remove(&id)
            .expect("scheduled request is pending");
        self.in_flight.insert(id);
        req
    }

    fn requeue(&mut self, req: Request) {
        self.in_flight.remove(&req.id);
        self.pending.insert(req.id, req);
    }

    fn complete(&mut self, id: RequestId) {
        self.in_flight.remove(&id);
        self.matrix.remove_request(id);
        self.completed.insert(id);
    }
}

/// Result of a run: the trace (header + events) and metrics derived from it.
#[derive(Debug)]
pub struct RunOutput {
    pub header: TraceHeader,
    pub events: Vec<TraceEvent>,
    pub metrics: Metrics,
}

/// Simulates the full loop with the in-process draft engine.
pub fn run(
    setup: &Setup,
    workload: &[WorkloadItem],
    mode: Mode,
    seed: u64,
) -> Result<RunOutput, PipelineError> {
    let mut engine = InProcessEngine::new(&setup.cluster);
    run_with_engine(setup, workload, mode, seed, &mut engine)
}

/// Simulates the full loop with a caller-provided draft engine (used by
/// the wall-clock/wire-protocol mode).
pub fn run_with_engine(
    setup: &Setup,
    workload: &[WorkloadItem],
    mode: Mode,
    seed: u64,
    engine: &mut dyn DraftEngine,
) -> Result<RunOutput, PipelineError> {
    setup.validate()?;
    if workload.is_empty() {
        return Err(PipelineError::BadSetup("workload is empty".into()));
    }
    for (i, item) in workload.iter().enumerate() {
        for &t in &item.prompt {
            setup
                .vocab
                .check_token(t)
                .map_err(|e| PipelineError::BadSetup(format!("workload item {i}: {e}")))?;
        }
        if item.max_new == 0 {
            return Err(PipelineError::BadSetup(format!(
                "workload item {i}: max_new must be ≥ 1"
            )));
        }
    }

    let mut sim = Sim {
        setup,
        mode,
        seed,
        engine,
        clock: EventClock::new(),
        pool: RequestPool::new(setup.cluster.drafters.len()),
        drafting: None,
        staged: None,
        verifying: None,
        batch_counter: 0,
        rounds_done: BTreeMap::new(),
        trace: Vec::new(),
        workload,
    };

    for (idx, item) in workload.iter().enumerate() {
        sim.clock.push(item.arrival_ms, Event::Arrival(idx));
    }

    while let Some((t, event)) = sim.clock.pop() {
        match event {
            Event::Arrival(idx) => sim.on_arrival(t, idx),
            Event::DraftDone(batch) => sim.on_draft_done(t, batch),
            Event::VerifyDone(batch) => sim.on_verify_done(t, batch)?,
        }
        sim.try_start_verify(t);
        sim.try_schedule(t)?;
    }

    if !sim.pool.pending.is_empty() || !sim.pool.in_flight.is_empty() {
        return Err(PipelineError::Infeasible(
            "run drained its events with live requests remaining".into(),
        ));
    }

    let header = TraceHeader {
        version: TRACE_VERSION,
        seed,
        mode: mode.to_string(),
        drafter_rates: setup
            .cluster
            .drafters
            .iter()
            .map(|d| d.cost_per_hour)
            .collect(),
        verifier_rate: setup.cluster.verifier.cost_per_hour,
    };
    let metrics = compute_metrics(&header, &sim.trace)?;
    Ok(RunOutput {
        header,
        events: sim.trace,
        metrics,
    })
}

struct Sim<'a> {
    setup: &'a Setup,
    mode: Mode,
    seed: u64,
    engine: &'a mut dyn DraftEngine,
    clock: EventClock,
    pool: RequestPool,
    drafting: Option<BatchWork>,
    staged: Option<BatchWork>,
    verifying: Option<BatchWork>,
    batch_counter: u64,
    rounds_done: BTreeMap<RequestId, u64>,
    trace: Vec<TraceEvent>,
    workload: &'a [WorkloadItem],
}

impl Sim<'_> {
    fn on_arrival(&mut self, t: f64, idx: usize) {
        let item = &self.workload[idx];
        let req = Request {
            id: idx as RequestId,
            prompt: TokenSeq::from_ids(item.prompt.clone()),
            generated: TokenSeq::new(),
            mem: (item.prompt.len() + item.max_new) as f64,
            gamma: self.setup.sched.gamma0.max(1),
            accept_len_last: 0,
            max_new: item.max_new,
            domain: item.domain.clone(),
            arrival_ms: t,
        };
        self.trace.push(TraceEvent::Arrival {
            t,
            req: req.id,
            domain: req.domain.clone(),
        });
        self.pool.admit(req);
    }

    fn nothing_in_flight(&self) -> bool {
        self.drafting.is_none() && self.staged.is_none() && self.verifying.is_none()
    }

    fn try_schedule(&mut self, t: f64) -> Result<(), PipelineError> {
        if self.drafting.is_some() || self.staged.is_some() {
            return Ok(());
        }
        if self.mode == Mode::Sequential && self.verifying.is_some() {
            return Ok(());
        }
        if self.pool.pending.is_empty() {
            return Ok(());
        }

        let pool_refs: Vec<&Request> = self.pool.pending.values().collect();
        let plan = batch_assign(&pool_refs, &self.setup.sched, &self.setup.planner)?;
        if plan.is_empty() {
            if self.nothing_in_flight() {
                return Err(PipelineError::Infeasible(
                    plan.infeasible.unwrap_or_else(|| "unknown".into()),
                ));
            }
            return Ok(()); // retry after in-flight work returns
        }

        let queue_depth = self.staged.is_some() as usize + self.verifying.is_some() as usize;
        let fanout = participation_fanout(
            self.setup.routing.fanout,
            self.setup.cluster.drafters.len(),
            queue_depth,
            self.setup.queue_low,
            self.setup.queue_high,
        );

        let batch_id = self.batch_counter;
        self.batch_counter += 1;

        let mut items = Vec::with_capacity(plan.selected.len());
        let mut total_tree_tokens = 0u64;
        for (i, &req_id) in plan.selected.iter().enumerate() {
            let request = self.pool.take_for_batch(req_id);
            let gamma = plan.gammas[i];
            let round_idx = {
                let c = self.rounds_done.entry(req_id).or_insert(0);
                let r = *c;
                *c += 1;
                r
            };
            let row = self
                .pool
                .matrix
                .row(req_id)
                .expect("in-flight request has a routing row")
                .to_vec();
            let mut route_rng = SeededSource::derive(self.seed, &[ROUTE_TAG, req_id, round_idx]);
            let routed = route_request_with_fanout(
                &row,
                &self.setup.routing,
                fanout,
                request.accept_len_last,
                &mut route_rng,
            )?;
            let mut prefix = request.prompt.clone();
            for &tok in request.generated.ids() {
                prefix.push(tok);
            }
            let round = self.engine.run_round(&routed, &prefix, gamma as usize)?;
            let tree = tree_selection(&round, gamma as usize);
            total_tree_tokens += tree.node_count() as u64;
            items.push(BatchItem {
                request,
                round_idx,
                routed,
                round,
                tree,
                gamma,
            });
        }

        // Drafting occupies every routed node until the slowest
        // (request, node) pair finishes.
        let mut duration = 0.0f64;
        for item in &items {
            for &n in &item.routed {
                let lat = &self.setup.cluster.drafters[n as usize].latency;
                duration =
                    duration.max(lat.eval(plan.batch_size, plan.critical_len, item.gamma as u64));
            }
        }

        self.trace.push(TraceEvent::DraftStart {
            t,
            batch: batch_id,
            reqs: items.iter().map(|i| i.request.id).collect(),
            routed: items.iter().map(|i| i.routed.clone()).collect(),
            b: plan.batch_size,
            l: plan.critical_len,
            gammas: items.iter().map(|i| i.gamma).collect(),
        });

        self.drafting = Some(BatchWork {
            id: batch_id,
            b: plan.batch_size,
            l: plan.critical_len,
            total_tree_tokens,
            items,
        });
        self.clock.push(t + duration, Event::DraftDone(batch_id));
        Ok(())
    }

    fn on_draft_done(&mut self, t: f64, batch: u64) {
        let work = self
            .drafting
            .take()
            .expect("draft-done with a batch in flight");
        debug_assert_eq!(work.id, batch);
        self.trace.push(TraceEvent::DraftDone { t, batch });
        self.staged = Some(work);
    }

    fn try_start_verify(&mut self, t: f64) {
        if self.verifying.is_some() || self.staged.is_none() {
            return;
        }
        let work = self.staged.take().expect("checked above");
        let duration =
            self.setup
                .cluster
                .verifier
                .latency
                .eval(work.b, work.l, work.total_tree_tokens);
        self.trace.push(TraceEvent::VerifyStart {
            t,
            batch: work.id,
            b: work.b,
            l: work.l,
            total_tokens: work.total_tree_tokens,
        });
        self.clock.push(t + duration, Event::VerifyDone(work.id));
        self.verifying = Some(work);
    }

    fn on_verify_done(&mut self, t: f64, batch: u64) -> Result<(), PipelineError> {
        let work = self
            .verifying
            .take()
            .expect("verify-done with a batch in flight");
        debug_assert_eq!(work.id, batch);

        let target = self.setup.cluster.verifier.model.as_ref();
        let mut outcomes = Vec::with_capacity(work.items.len());
        let mut completions: Vec<(RequestId, u64)> = Vec::new();

        for item in work.items {
            let BatchItem {
                mut request,
                round_idx,
                round,
                tree,
                ..
            } = item;
            let mut prefix = request.prompt.clone();
            for &tok in request.generated.ids() {
                prefix.push(tok);
            }
            let mut rng = SeededSource::derive(self.seed, &[VERIFY_TAG, request.id, round_idx]);
            let mut result = verify_tree(target, &prefix, &tree, &mut rng)?;
            result.per_node_draft = round.per_node_draft();

            update_routing(
                &mut self.pool.matrix,
                request.id,
                &round,
                &result,
                &self.setup.embeddings,
                &self.setup.routing,
            )?;

            // Append up to max_new tokens, cutting at eos.
            let remaining = request.max_new.saturating_sub(request.generated.len());
            let mut appended: Vec<TokenId> = Vec::new();
            let mut saw_eos = false;
            for &tok in result.accepted.ids() {
                if appended.len() >= remaining {
                    break;
                }
                appended.push(tok);
                if tok == self.setup.vocab.eos_id() {
                    saw_eos = true;
                    break;
                }
            }
            for &tok in &appended {
                request.generated.push(tok);
            }
            request.accept_len_last = result.accept_len;
            let left = request.max_new.saturating_sub(request.generated.len());
            request.gamma =
                next_gamma(result.accept_len, &self.setup.sched).min(left.max(1) as u32);

            outcomes.push(VerifyOutcome {
                req: request.id,
                accept_len: result.accept_len,
                drafted: tree.node_count() as u32,
                appended: appended.len() as u32,
                tokens: appended,
            });

            let done = saw_eos || request.generated.len() >= request.max_new;
            if done {
                completions.push((request.id, request.generated.len() as u64));
                self.pool.complete(request.id);
            } else {
                self.pool.requeue(request);
            }
        }

        self.trace
            .push(TraceEvent::VerifyDone { t, batch, outcomes });
        for (req, tokens) in completions {
            self.trace.push(TraceEvent::Complete { t, req, tokens });
        }
        Ok(())
    }
}
