//! Token-level wire protocol and star-topology transport.
//!
//! Frame layout, bit-exact:
//!
//! ```text
//! | payload len: u32 LE | version: u8 | kind: u8 | request id: u64 LE | payload |
//! ```
//!
//! Token ids travel as unsigned LEB128 varints, probabilities as IEEE-754
//! f64 little-endian. Payloads are capped at 1 MiB. Decoding is
//! streaming-safe: a partial buffer reports how many more bytes are
//! needed instead of failing.
//!
//! The coordinator runs the same per-iteration barrier as the in-process
//! drafting round: collect one `DraftStep` per routed node (dropping
//! nodes that miss the per-node timeout), fuse, broadcast `FusedToken`.
//! Workers execute `drafting::node_step`, so a loopback or TCP cluster
//! produces exactly the tokens the in-process engine produces.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::drafting::{fuse_step, node_step, DraftRound, NodeBranches};
use crate::models::Model;
use crate::pipeline::{ClusterSpec, DraftEngine, PipelineError};
use crate::vocab::{TokenId, TokenSeq};
use crate::{Dist, NodeId, RequestId};

pub const PROTOCOL_VERSION: u8 = 1;
pub const MAX_PAYLOAD: usize = 1 << 20;
/// Per-node round timeout. Loopback at desk scale needs a generous bound.
pub const DEFAULT_NODE_TIMEOUT: Duration = Duration::from_millis(50);

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("payload of {0} bytes exceeds the 1 MiB cap")]
    Oversize(usize),
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("unknown frame kind {0}")]
    UnknownKind(u8),
    #[error("varint overflows u64")]
    VarintOverflow,
    #[error("payload malformed: {0}")]
    Malformed(String),
    #[error("channel closed")]
    Closed,
    #[error("io: {0}")]
    Io(String),
    #[error("expected {expected} frame, got {got}")]
    WrongFrame {
        expected: &'static str,
        got: &'static str,
    },
    #[error("all routed nodes timed out; round aborted")]
    RoundAborted,
}

impl From<std::io::Error> for NetError {
    fn from(e: std::io::Error) -> Self {
        NetError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameKind {
    RouteRequest = 0,
    DraftStep = 1,
    FusedToken = 2,
    DraftTreeMsg = 3,
    VerifyResult = 4,
    Join = 5,
    Leave = 6,
    Heartbeat = 7,
}

impl FrameKind {
    fn from_byte(b: u8) -> Result<Self, NetError> {
        Ok(match b {
            0 => FrameKind::RouteRequest,
            1 => FrameKind::DraftStep,
            2 => FrameKind::FusedToken,
            3 => FrameKind::DraftTreeMsg,
            4 => FrameKind::VerifyResult,
            5 => FrameKind::Join,
            6 => FrameKind::Leave,
            7 => FrameKind::Heartbeat,
            other => return Err(NetError::UnknownKind(other)),
        })
    }

    fn name(self) -> &'static str {
        match self {
            FrameKind::RouteRequest => "RouteRequest",
            FrameKind::DraftStep => "DraftStep",
            FrameKind::FusedToken => "FusedToken",
            FrameKind::DraftTreeMsg => "DraftTreeMsg",
            FrameKind::VerifyResult => "VerifyResult",
            FrameKind::Join => "Join",
            FrameKind::Leave => "Leave",
            FrameKind::Heartbeat => "Heartbeat",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub version: u8,
    pub kind: FrameKind,
    pub request_id: RequestId,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: FrameKind, request_id: RequestId, payload: Vec<u8>) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            kind,
            request_id,
            payload,
        }
    }
}

/// Serializes a frame. Fails on oversize payloads.
pub fn encode(frame: &Frame) -> Result<Vec<u8>, NetError> {
    if frame.payload.len() > MAX_PAYLOAD {
        return Err(NetError::Oversize(frame.payload.len()));
    }
    let mut out = Vec::with_capacity(14 + frame.payload.len());
    out.extend_from_slice(&(frame.payload.len() as u32).to_le_bytes());
    out.push(frame.version);
    out.push(frame.kind as u8);
    out.extend_from_slice(&frame.request_id.to_le_bytes());
    out.extend_from_slice(&frame.payload);
    Ok(out)
}

/// Outcome of a streaming decode attempt.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    /// A complete frame and the number of bytes it consumed.
    Frame(Frame, usize),
    /// The buffer holds an incomplete frame; this many more bytes are needed.
    NeedMore(usize),
}

/// Parses one frame from the front of `buf`, or reports how many more
/// bytes are required. Never panics on arbitrary input.
pub fn decode(buf: &[u8]) -> Result<Decoded, NetError> {
    if buf.len() < 4 {
        return Ok(Decoded::NeedMore(4 - buf.len()));
    }
    let len = u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if len > MAX_PAYLOAD {
        return Err(NetError::Oversize(len));
    }
    let total = 4 + 1 + 1 + 8 + len;
    if buf.len() < total {
        return Ok(Decoded::NeedMore(total - buf.len()));
    }
    let version = buf[4];
    if version != PROTOCOL_VERSION {
        return Err(NetError::BadVersion(version));
    }
    let kind = FrameKind::from_byte(buf[5])?;
    let request_id = u64::from_le_bytes(buf[6..14].try_into().expect("8 bytes"));
    Ok(Decoded::Frame(
        Frame {
            version,
            kind,
            request_id,
            payload: buf[14..total].to_vec(),
        },
        total,
    ))
}

// --- varint / scalar payload primitives -----------------------------------

pub fn write_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

pub struct PayloadReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn varint(&mut self) -> Result<u64, NetError> {
        let mut value = 0u64;
        let mut shift = 0u32;
        loop {
            let byte = *self
                .buf
                .get(self.pos)
                .ok_or_else(|| NetError::Malformed("varint truncated".into()))?;
            self.pos += 1;
            if shift >= 63 && byte > 1 {
                return Err(NetError::VarintOverflow);
            }
            value |= u64::from(byte & 0x7f) << shift;
            if byte & 0x80 == 0 {
                return Ok(value);
            }
            shift += 7;
            if shift > 63 {
                return Err(NetError::VarintOverflow);
            }
        }
    }

    pub fn f64(&mut self) -> Result<f64, NetError> {
        let end = self.pos + 8;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| NetError::Malformed("f64 truncated".into()))?;
        self.pos = end;
        Ok(f64::from_le_bytes(bytes.try_into().expect("8 bytes")))
    }

    pub fn token(&mut self) -> Result<TokenId, NetError> {
        let v = self.varint()?;
        u32::try_from(v).map_err(|_| NetError::Malformed(format!("token id {v} exceeds u32")))
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or_else(|| NetError::Malformed("length overflow".into()))?;
        let b = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| NetError::Malformed("bytes truncated".into()))?;
        self.pos = end;
        Ok(b)
    }

    pub fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn write_dist(out: &mut Vec<u8>, dist: &Dist) {
    write_varint(out, dist.len() as u64);
    for p in dist.probs() {
        out.extend_from_slice(&p.to_le_bytes());
    }
}

fn read_dist(r: &mut PayloadReader) -> Result<Dist, NetError> {
    let n = r.varint()? as usize;
    if n == 0 || n > MAX_PAYLOAD / 8 {
        return Err(NetError::Malformed(format!("distribution length {n}")));
    }
    let mut probs = Vec::with_capacity(n);
    for _ in 0..n {
        probs.push(r.f64()?);
    }
    crate::dist::Distribution::new(probs).map_err(|e| NetError::Malformed(e.to_string()))
}

fn write_tokens(out: &mut Vec<u8>, tokens: &[TokenId]) {
    write_varint(out, tokens.len() as u64);
    for t in tokens {
        write_varint(out, u64::from(*t));
    }
}

fn read_tokens(r: &mut PayloadReader) -> Result<Vec<TokenId>, NetError> {
    let n = r.varint()? as usize;
    if n > MAX_PAYLOAD {
        return Err(NetError::Malformed(format!("token count {n}")));
    }
    let mut out = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        out.push(r.token()?);
    }
    Ok(out)
}

// --- typed payloads --------------------------------------------------------

/// Coordinator → node: start a drafting round for a request.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteRequestMsg {
    pub k: u32,
    pub context: Vec<TokenId>,
}

impl RouteRequestMsg {
    pub fn to_frame(&self, request_id: RequestId) -> Frame {
        let mut p = Vec::new();
        write_varint(&mut p, u64::from(self.k));
        write_tokens(&mut p, &self.context);
        Frame::new(FrameKind::RouteRequest, request_id, p)
    }

    pub fn parse(frame: &Frame) -> Result<Self, NetError> {
        expect_kind(frame, FrameKind::RouteRequest)?;
        let mut r = PayloadReader::new(&frame.payload);
        let k = r.varint()? as u32;
        let context = read_tokens(&mut r)?;
        Ok(Self { k, context })
    }
}

/// Node → coordinator: one iteration's own-branch token and fused-branch
/// proposal, with full step distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftStepMsg {
    pub node: NodeId,
    pub step: u32,
    pub own_token: TokenId,
    pub own_conf: f64,
    pub own_dist: Dist,
    pub proposal_token: TokenId,
    pub proposal_conf: f64,
    pub proposal_dist: Dist,
}

impl DraftStepMsg {
    pub fn to_frame(&self, request_id: RequestId) -> Frame {
        let mut p = Vec::new();
        write_varint(&mut p, u64::from(self.node));
        write_varint(&mut p, u64::from(self.step));
        write_varint(&mut p, u64::from(self.own_token));
        p.extend_from_slice(&self.own_conf.to_le_bytes());
        write_dist(&mut p, &self.own_dist);
        write_varint(&mut p, u64::from(self.proposal_token));
        p.extend_from_slice(&self.proposal_conf.to_le_bytes());
        write_dist(&mut p, &self.proposal_dist);
        Frame::new(FrameKind::DraftStep, request_id, p)
    }

    pub fn parse(frame: &Frame) -> Result<Self, NetError> {
        expect_kind(frame, FrameKind::DraftStep)?;
        let mut r = PayloadReader::new(&frame.payload);
        Ok(Self {
            node: r.varint()? as NodeId,
            step: r.varint()? as u32,
            own_token: r.token()?,
            own_conf: r.f64()?,
            own_dist: read_dist(&mut r)?,
            proposal_token: r.token()?,
            proposal_conf: r.f64()?,
            proposal_dist: read_dist(&mut r)?,
        })
    }
}

/// Coordinator → nodes: the fused token for an iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedTokenMsg {
    pub step: u32,
    pub token: TokenId,
}

impl FusedTokenMsg {
    pub fn to_frame(&self, request_id: RequestId) -> Frame {
        let mut p = Vec::new();
        write_varint(&mut p, u64::from(self.step));
        write_varint(&mut p, u64::from(self.token));
        Frame::new(FrameKind::FusedToken, request_id, p)
    }

    pub fn parse(frame: &Frame) -> Result<Self, NetError> {
        expect_kind(frame, FrameKind::FusedToken)?;
        let mut r = PayloadReader::new(&frame.payload);
        Ok(Self {
            step: r.varint()? as u32,
            token: r.token()?,
        })
    }
}

/// Cluster → server: a serialized draft tree (preorder, parent-indexed).
#[derive(Debug, Clone, PartialEq)]
pub struct DraftTreeMsgBody {
    pub tokens: Vec<TokenId>,
    /// Parent index + 1; 0 marks a root child.
    pub parents: Vec<u32>,
    pub drafters: Vec<NodeId>,
    pub probs: Vec<f64>,
    pub dists: Vec<Dist>,
}

impl DraftTreeMsgBody {
    pub fn to_frame(&self, request_id: RequestId) -> Frame {
        let mut p = Vec::new();
        write_varint(&mut p, self.tokens.len() as u64);
        for i in 0..self.tokens.len() {
            write_varint(&mut p, u64::from(self.tokens[i]));
            write_varint(&mut p, u64::from(self.parents[i]));
            write_varint(&mut p, u64::from(self.drafters[i]));
            p.extend_from_slice(&self.probs[i].to_le_bytes());
            write_dist(&mut p, &self.dists[i]);
        }
        Frame::new(FrameKind::DraftTreeMsg, request_id, p)
    }

    pub fn parse(frame: &Frame) -> Result<Self, NetError> {
        expect_kind(frame, FrameKind::DraftTreeMsg)?;
        let mut r = PayloadReader::new(&frame.payload);
        let n = r.varint()? as usize;
        if n > MAX_PAYLOAD / 16 {
            return Err(NetError::Malformed(format!("tree node count {n}")));
        }
        let mut body = Self {
            tokens: Vec::new(),
            parents: Vec::new(),
            drafters: Vec::new(),
            probs: Vec::new(),
            dists: Vec::new(),
        };
        for _ in 0..n {
            body.tokens.push(r.token()?);
            body.parents.push(r.varint()? as u32);
            body.drafters.push(r.varint()? as NodeId);
            body.probs.push(r.f64()?);
            body.dists.push(read_dist(&mut r)?);
        }
        Ok(body)
    }

    pub fn from_tree(tree: &crate::verify::DraftTree) -> Self {
        fn walk(nodes: &[crate::verify::DraftTreeNode], parent: u32, body: &mut DraftTreeMsgBody) {
            for n in nodes {
                body.tokens.push(n.token);
                body.parents.push(parent);
                body.drafters.push(n.drafter);
                body.probs.push(n.draft_prob);
                body.dists.push(n.dist.clone());
                let my_index = body.tokens.len() as u32;
                walk(&n.children, my_index, body);
            }
        }
        let mut body = Self {
            tokens: Vec::new(),
            parents: Vec::new(),
            drafters: Vec::new(),
            probs: Vec::new(),
            dists: Vec::new(),
        };
        walk(&tree.children, 0, &mut body);
        body
    }

    pub fn into_tree(self) -> Result<crate::verify::DraftTree, NetError> {
        use crate::verify::{DraftTree, DraftTreeNode};
        let n = self.tokens.len();
        let mut nodes: Vec<DraftTreeNode> = (0..n)
            .map(|i| DraftTreeNode {
                token: self.tokens[i],
                draft_prob: self.probs[i],
                drafter: self.drafters[i],
                dist: self.dists[i].clone(),
                children: Vec::new(),
            })
            .collect();
        // Children attach to lower-indexed parents (preorder), so popping
        // from the back keeps indices stable.
        let mut tree = DraftTree::default();
        for i in (0..n).rev() {
            let node = nodes.pop().expect("node exists");
            let parent = self.parents[i];
            if parent == 0 {
                tree.children.insert(0, node);
            } else {
                let p = parent as usize - 1;
                if p >= i {
                    return Err(NetError::Malformed(format!(
                        "tree parent {p} not before child {i}"
                    )));
                }
                nodes[p].children.insert(0, node);
            }
        }
        Ok(tree)
    }
}

/// Server → pool: verification outcome for a request.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyResultMsg {
    pub accept_len: u32,
    pub tokens: Vec<TokenId>,
    /// Rejection position + 1; 0 when all drafts were accepted.
    pub rejected_at: u32,
}

impl VerifyResultMsg {
    pub fn to_frame(&self, request_id: RequestId) -> Frame {
        let mut p = Vec::new();
        write_varint(&mut p, u64::from(self.accept_len));
        write_tokens(&mut p, &self.tokens);
        write_varint(&mut p, u64::from(self.rejected_at));
        Frame::new(FrameKind::VerifyResult, request_id, p)
    }

    pub fn parse(frame: &Frame) -> Result<Self, NetError> {
        expect_kind(frame, FrameKind::VerifyResult)?;
        let mut r = PayloadReader::new(&frame.payload);
        Ok(Self {
            accept_len: r.varint()? as u32,
            tokens: read_tokens(&mut r)?,
            rejected_at: r.varint()? as u32,
        })
    }
}

/// Node → coordinator on connect.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinMsg {
    pub node: NodeId,
    pub domain: String,
}

impl JoinMsg {
    pub fn to_frame(&self) -> Frame {
        let mut p = Vec::new();
        write_varint(&mut p, u64::from(self.node));
        let bytes = self.domain.as_bytes();
        write_varint(&mut p, bytes.len() as u64);
        p.extend_from_slice(bytes);
        Frame::new(FrameKind::Join, 0, p)
    }

    pub fn parse(frame: &Frame) -> Result<Self, NetError> {
        expect_kind(frame, FrameKind::Join)?;
        let mut r = PayloadReader::new(&frame.payload);
        let node = r.varint()? as NodeId;
        let len = r.varint()? as usize;
        let bytes = r.bytes(len)?;
        Ok(Self {
            node,
            domain: String::from_utf8(bytes.to_vec())
                .map_err(|e| NetError::Malformed(e.to_string()))?,
        })
    }
}

pub fn leave_frame(node: NodeId) -> Frame {
    let mut p = Vec::new();
    write_varint(&mut p, u64::from(node));
    Frame::new(FrameKind::Leave, 0, p)
}

pub fn heartbeat_frame() -> Frame {
    Frame::new(FrameKind::Heartbeat, 0, Vec::new())
}

fn expect_kind(frame: &Frame, kind: FrameKind) -> Result<(), NetError> {
    if frame.kind == kind {
        Ok(())
    } else {
        Err(NetError::WrongFrame {
            expected: kind.name(),
            got: frame.kind.name(),
        })
    }
}

// --- transports -------------------------------------------------------------

/// A reliable, ordered frame pipe between the coordinator and one node.
pub trait Transport: Send {
    fn send(&mut self, frame: &Frame) -> Result<(), NetError>;
    /// `Ok(None)` on timeout.
    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Frame>, NetError>;
}

/// In-process channel transport. Frames still pass through the byte codec
/// so loopback runs exercise the exact wire format.
pub struct LoopbackTransport {
    tx: mpsc::Sender<Vec<u8>>,
    rx: mpsc::Receiver<Vec<u8>>,
}

impl LoopbackTransport {
    /// Connected pair: what one end sends, the other receives.
    pub fn pair() -> (LoopbackTransport, LoopbackTransport) {
        let (atx, brx) = mpsc::channel();
        let (btx, arx) = mpsc::channel();
        (
            LoopbackTransport { tx: atx, rx: arx },
            LoopbackTransport { tx: btx, rx: brx },
        )
    }
}

impl Transport for LoopbackTransport {
    fn send(&mut self, frame: &Frame) -> Result<(), NetError> {
        let bytes = encode(frame)?;
        self.tx.send(bytes).map_err(|_| NetError::Closed)
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Frame>, NetError> {
        match self.rx.recv_timeout(timeout) {
            Ok(bytes) => match decode(&bytes)? {
                Decoded::Frame(f, consumed) => {
                    if consumed != bytes.len() {
                        return Err(NetError::Malformed(
                            "trailing bytes in loopback frame".into(),
                        ));
                    }
                    Ok(Some(f))
                }
                Decoded::NeedMore(_) => Err(NetError::Malformed("truncated loopback frame".into())),
            },
            Err(mpsc::RecvTimeoutError::Timeout) => Ok(None),
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(NetError::Closed),
        }
    }
}

/// Frame transport over a TCP stream with a streaming decode buffer.
pub struct TcpTransport {
    stream: TcpStream,
    rbuf: Vec<u8>,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> Result<Self, NetError> {
        stream.set_nodelay(true)?;
        Ok(Self {
            stream,
            rbuf: Vec::new(),
        })
    }

    pub fn connect(addr: &str) -> Result<Self, NetError> {
        Self::new(TcpStream::connect(addr)?)
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, frame: &Frame) -> Result<(), NetError> {
        let bytes = encode(frame)?;
        self.stream.write_all(&bytes)?;
        self.stream.flush()?;
        Ok(())
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Frame>, NetError> {
        let deadline = Instant::now() + timeout;
        loop {
            match decode(&self.rbuf)? {
                Decoded::Frame(f, consumed) => {
                    self.rbuf.drain(..consumed);
                    return Ok(Some(f));
                }
                Decoded::NeedMore(_) => {}
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            self.stream.set_read_timeout(Some(deadline - now))?;
            let mut chunk = [0u8; 4096];
            match self.stream.read(&mut chunk) {
                Ok(0) => return Err(NetError::Closed),
                Ok(n) => self.rbuf.extend_from_slice(&chunk[..n]),
                Err(e)
                    if e.kind() == std::io::ErrorKind::WouldBlock
                        || e.kind() == std::io::ErrorKind::TimedOut =>
                {
                    return Ok(None);
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

// --- drafter worker and coordinator round -----------------------------------

/// Runs a drafter node: answers `RouteRequest` rounds until `Leave`.
/// Heartbeats are echoed back.
pub fn run_drafter_worker(
    transport: &mut dyn Transport,
    node: NodeId,
    model: Arc<dyn Model>,
) -> Result<(), NetError> {
    loop {
        let frame = match transport.recv_timeout(Duration::from_millis(200))? {
            Some(f) => f,
            None => continue,
        };
        match frame.kind {
            FrameKind::Leave => return Ok(()),
            FrameKind::Heartbeat => {
                transport.send(&heartbeat_frame())?;
            }
            FrameKind::RouteRequest => {
                let req = RouteRequestMsg::parse(&frame)?;
                let request_id = frame.request_id;
                let mut own_ctx = TokenSeq::from_ids(req.context.clone());
                let mut fused_ctx = own_ctx.clone();
                for step in 0..req.k {
                    let s = node_step(model.as_ref(), &own_ctx, &fused_ctx);
                    own_ctx.push(s.own_token);
                    transport.send(
                        &DraftStepMsg {
                            node,
                            step,
                            own_token: s.own_token,
                            own_conf: s.own_conf,
                            own_dist: s.own_dist,
                            proposal_token: s.proposal_token,
                            proposal_conf: s.proposal_conf,
                            proposal_dist: s.proposal_dist,
                        }
                        .to_frame(request_id),
                    )?;
                    // Barrier: wait for the fused token before iterating.
                    let fused = loop {
                        match transport.recv_timeout(Duration::from_millis(200))? {
                            Some(f) if f.kind == FrameKind::Leave => return Ok(()),
                            Some(f) => break FusedTokenMsg::parse(&f)?,
                            None => continue,
                        }
                    };
                    fused_ctx.push(fused.token);
                }
            }
            other => {
                return Err(NetError::WrongFrame {
                    expected: "RouteRequest|Leave|Heartbeat",
                    got: other.name(),
                })
            }
        }
    }
}

/// Runs one cooperative drafting round over transports: sends the round
/// start to every routed node, then per iteration collects one
/// `DraftStep` per live node (dropping nodes that miss `timeout`), fuses,
/// and broadcasts the fused token. Nodes that survive all K iterations
/// form the returned round; if every node drops, the round aborts.
pub fn coordinator_round(
    connections: &mut [(NodeId, &mut dyn Transport)],
    request_id: RequestId,
    prefix: &TokenSeq,
    k: usize,
    timeout: Duration,
) -> Result<DraftRound, NetError> {
    let msg = RouteRequestMsg {
        k: k as u32,
        context: prefix.ids().to_vec(),
    };
    let mut alive: Vec<bool> = vec![true; connections.len()];
    for (i, (_, t)) in connections.iter_mut().enumerate() {
        if t.send(&msg.to_frame(request_id)).is_err() {
            alive[i] = false;
        }
    }

    let mut branches: BTreeMap<NodeId, NodeBranches> = connections
        .iter()
        .map(|(id, _)| {
            (
                *id,
                NodeBranches {
                    node: *id,
                    own: Vec::new(),
                    own_dists: Vec::new(),
                    proposals: Vec::new(),
                    proposal_dists: Vec::new(),
                },
            )
        })
        .collect();
    let mut fused = Vec::with_capacity(k);

    for step in 0..k as u32 {
        let mut candidates = Vec::new();
        for (i, (id, transport)) in connections.iter_mut().enumerate() {
            if !alive[i] {
                continue;
            }
            let received = match transport.recv_timeout(timeout) {
                Ok(Some(f)) if f.kind == FrameKind::DraftStep => match DraftStepMsg::parse(&f) {
                    Ok(m) if m.step == step => Some(m),
                    _ => None,
                },
                _ => None,
            };
            match received {
                Some(m) => {
                    let b = branches.get_mut(id).expect("branch exists");
                    b.own.push((m.own_token, m.own_conf));
                    b.own_dists.push(m.own_dist);
                    b.proposals.push((m.proposal_token, m.proposal_conf));
                    b.proposal_dists.push(m.proposal_dist);
                    candidates.push((*id, m.proposal_token, m.proposal_conf));
                }
                // Timed out, closed, or out of protocol: drop from the round.
                None => alive[i] = false,
            }
        }
        if candidates.is_empty() {
            return Err(NetError::RoundAborted);
        }
        let (token, winner) = fuse_step(&candidates).map_err(|_| NetError::RoundAborted)?;
        let conf = candidates
            .iter()
            .find(|(n, t, _)| *n == winner && *t == token)
            .map(|(_, _, c)| *c)
            .unwrap_or(0.0);
        fused.push((token, conf, winner));
        let broadcast = FusedTokenMsg { step, token };
        for (i, (_, transport)) in connections.iter_mut().enumerate() {
            if alive[i] && transport.send(&broadcast.to_frame(request_id)).is_err() {
                alive[i] = false;
            }
        }
    }

    // Keep only nodes that contributed every iteration.
    let complete: Vec<NodeBranches> = connections
        .iter()
        .enumerate()
        .filter(|(i, _)| alive[*i])
        .map(|(_, (id, _))| branches.remove(id).expect("branch exists"))
        .filter(|b| b.own.len() == k)
        .collect();
    if complete.is_empty() {
        return Err(NetError::RoundAborted);
    }
    Ok(DraftRound {
        k,
        branches: complete,
        fused,
    })
}

/// Draft engine backed by worker threads behind transports. Also records
/// wall-clock time spent inside rounds, for the measured-latency mode.
pub struct RemoteEngine {
    connections: Vec<(NodeId, Box<dyn Transport>)>,
    timeout: Duration,
    request_counter: RequestId,
    pub measured_round_ms: f64,
}

impl RemoteEngine {
    pub fn new(connections: Vec<(NodeId, Box<dyn Transport>)>, timeout: Duration) -> Self {
        Self {
            connections,
            timeout,
            request_counter: 0,
            measured_round_ms: 0.0,
        }
    }

    /// Tells every worker to shut down.
    pub fn shutdown(&mut self) {
        for (id, t) in &mut self.connections {
            let _ = t.send(&leave_frame(*id));
        }
    }
}

impl DraftEngine for RemoteEngine {
    fn run_round(
        &mut self,
        nodes: &[NodeId],
        prefix: &TokenSeq,
        k: usize,
    ) -> Result<DraftRound, PipelineError> {
        let started = Instant::now();
        self.request_counter += 1;
        let rid = self.request_counter;
        let mut selected: Vec<(NodeId, &mut dyn Transport)> = self
            .connections
            .iter_mut()
            .filter(|(id, _)| nodes.contains(id))
            .map(|(id, t)| (*id, t.as_mut() as &mut dyn Transport))
            .collect();
        let round = coordinator_round(&mut selected, rid, prefix, k, self.timeout)
            .map_err(|e| PipelineError::Engine(e.to_string()))?;
        self.measured_round_ms += started.elapsed().as_secs_f64() * 1000.0;
        Ok(round)
    }
}

/// Spawns one worker thread per cluster drafter over loopback transports
/// and returns the coordinator-side engine.
pub fn spawn_loopback_cluster(
    cluster: &ClusterSpec,
    timeout: Duration,
) -> (
    RemoteEngine,
    Vec<std::thread::JoinHandle<Result<(), NetError>>>,
) {
    let mut connections = Vec::new();
    let mut handles = Vec::new();
    for (i, drafter) in cluster.drafters.iter().enumerate() {
        let (coord_side, worker_side) = LoopbackTransport::pair();
        let model = Arc::clone(&drafter.model);
        let node = i as NodeId;
        handles.push(std::thread::spawn(move || {
            let mut t = worker_side;
            run_drafter_worker(&mut t, node, model)
        }));
        connections.push((node, Box::new(coord_side) as Box<dyn Transport>));
    }
    (RemoteEngine::new(connections, timeout), handles)
}
