//! Deterministic in-process transport over virtual time.
//!
//! All endpoints share one [`LoopbackFabric`]. Posted verbs become frames
//! queued for future delivery; per-link FIFO order is preserved while the
//! seeded latency model decides how links interleave, so ordering and race
//! tests replay exactly from a seed. The driver advances virtual time with
//! [`LoopbackFabric::advance_to`].

use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::frame::{Frame, FrameType};
use super::{
    check_region_bounds, CompletionStatus, ConnEvent, Endpoint, EndpointAddr, EndpointIdentity,
    MrId, MrKind, QpId, TransportError, Verb, VerbError, WorkCompletion, MAX_FRAME_PAYLOAD,
};
use crate::time::SimTime;

/// Per-frame delivery latency: `base + len * per_kib / 1024 + jitter`,
/// with jitter drawn uniformly from `[0, jitter)` per frame.
#[derive(Debug, Clone, Copy)]
pub struct LatencyModel {
    pub base_ns: u64,
    pub per_kib_ns: u64,
    pub jitter_ns: u64,
}

impl LatencyModel {
    /// Roughly a fast NIC: 10 us base, ~20 GB/s, mild jitter.
    pub fn nic_like() -> Self {
        LatencyModel {
            base_ns: 10_000,
            per_kib_ns: 50,
            jitter_ns: 2_000,
        }
    }

    /// High-variance schedule for race hunting: jitter dominates base.
    pub fn adversarial() -> Self {
        LatencyModel {
            base_ns: 500,
            per_kib_ns: 10,
            jitter_ns: 200_000,
        }
    }

    fn sample(&self, wire_len: usize, rng: &mut ChaCha8Rng) -> u64 {
        let size = (wire_len as u64 * self.per_kib_ns) / 1024;
        let jitter = if self.jitter_ns > 0 {
            rng.gen_range(0..self.jitter_ns)
        } else {
            0
        };
        self.base_ns + size + jitter
    }
}

/// A verb applied to some region, recorded in service order and replayed by
/// the reference interpreter to check byte fidelity. Reads produce two
/// records because the source is sampled when the request is served and the
/// destination written when the response arrives; interleaved writes between
/// the two must be observable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VerbRecord {
    /// A read request sampled `len` bytes out of the source region.
    ReadServe {
        token: (u64, u64),
        src_addr: u64,
        src_mr: u32,
        src_offset: u64,
        len: u32,
    },
    /// The sampled bytes of `token` landed in the destination region.
    ReadPlace {
        token: (u64, u64),
        dst_addr: u64,
        dst_mr: u32,
        dst_offset: u64,
    },
    /// One-sided write of literal bytes into `dst` region.
    CopyWrite {
        dst_addr: u64,
        dst_mr: u32,
        dst_offset: u64,
        payload: Vec<u8>,
    },
    /// A matched send delivered into the receiver's region.
    RecvDeliver {
        dst_addr: u64,
        dst_mr: u32,
        dst_offset: u64,
        payload: Vec<u8>,
    },
}

#[derive(Debug)]
struct Region {
    kind: MrKind,
    bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum QpPhase {
    Connecting,
    Ready,
    Closed,
}

#[derive(Debug)]
struct PendingOp {
    verb: Verb,
    local_mr: MrId,
    local_offset: u64,
    len: u32,
}

#[derive(Debug)]
struct PostedRecv {
    wr_id: u64,
    mr: MrId,
    offset: u64,
    max_len: u32,
}

#[derive(Debug)]
struct ParkedSend {
    src_addr: u64,
    src_qp: u64,
    wr_id: u64,
    payload: Vec<u8>,
}

#[derive(Debug)]
struct QpState {
    phase: QpPhase,
    peer_addr: u64,
    peer_qp: Option<u64>,
    peer_identity: Option<EndpointIdentity>,
    outstanding: BTreeMap<u64, PendingOp>,
    posted_recvs: VecDeque<PostedRecv>,
    parked_sends: VecDeque<ParkedSend>,
}

#[derive(Debug)]
struct EndpointState {
    alive: bool,
    identity: EndpointIdentity,
    mrs: BTreeMap<u32, Region>,
    next_mr: u32,
    qps: BTreeMap<u64, QpState>,
    next_qp: u64,
    cq: VecDeque<WorkCompletion>,
    conn_events: VecDeque<ConnEvent>,
    responder_callbacks: u64,
}

impl EndpointState {
    fn new(identity: EndpointIdentity) -> Self {
        EndpointState {
            alive: true,
            identity,
            mrs: BTreeMap::new(),
            next_mr: 1,
            qps: BTreeMap::new(),
            next_qp: 1,
            cq: VecDeque::new(),
            conn_events: VecDeque::new(),
            responder_callbacks: 0,
        }
    }

    fn complete(&mut self, qp: u64, wr_id: u64, verb: Verb, status: CompletionStatus, bytes: u32) {
        self.cq.push_back(WorkCompletion {
            qp: QpId(qp),
            wr_id,
            verb,
            status,
            byte_count: bytes,
        });
    }
}

#[derive(Debug)]
enum Event {
    Deliver {
        src_addr: u64,
        src_qp: u64,
        dst_addr: u64,
        dst_qp: Option<u64>,
        frame: Frame,
    },
    SendTimeout {
        dst_addr: u64,
        dst_qp: u64,
        src_addr: u64,
        src_qp: u64,
        wr_id: u64,
    },
    ConnectFailed {
        addr: u64,
        qp: u64,
        reason: String,
    },
}

struct Queued {
    at: SimTime,
    seq: u64,
    event: Event,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

pub struct FabricCore {
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Reverse<Queued>>,
    endpoints: BTreeMap<u64, EndpointState>,
    next_addr: u64,
    latency: LatencyModel,
    rng: ChaCha8Rng,
    /// earliest allowed next delivery per (src, dst), preserving link FIFO
    link_clock: BTreeMap<(u64, u64), SimTime>,
    send_timeout_ns: u64,
    verb_trace: Option<Vec<VerbRecord>>,
}

impl FabricCore {
    fn schedule(&mut self, at: SimTime, event: Event) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(Queued { at, seq, event }));
    }

    /// Queue a frame for delivery, keeping per-link FIFO order.
    fn send_frame(
        &mut self,
        src_addr: u64,
        src_qp: u64,
        dst_addr: u64,
        dst_qp: Option<u64>,
        frame: Frame,
    ) {
        let latency = self.latency.sample(frame.wire_len(), &mut self.rng);
        let mut at = self.now.plus(latency);
        let clock = self.link_clock.entry((src_addr, dst_addr)).or_default();
        if at < *clock {
            at = *clock;
        }
        *clock = at;
        self.schedule(
            at,
            Event::Deliver {
                src_addr,
                src_qp,
                dst_addr,
                dst_qp,
                frame,
            },
        );
    }

    fn trace(&mut self, record: VerbRecord) {
        if let Some(trace) = self.verb_trace.as_mut() {
            trace.push(record);
        }
    }

    fn endpoint_alive(&self, addr: u64) -> bool {
        self.endpoints.get(&addr).map(|e| e.alive).unwrap_or(false)
    }

    fn handle(&mut self, event: Event) {
        match event {
            Event::Deliver {
                src_addr,
                src_qp,
                dst_addr,
                dst_qp,
                frame,
            } => self.deliver(src_addr, src_qp, dst_addr, dst_qp, frame),
            Event::SendTimeout {
                dst_addr,
                dst_qp,
                src_addr,
                src_qp,
                wr_id,
            } => {
                let Some(dst) = self.endpoints.get_mut(&dst_addr) else {
                    return;
                };
                let Some(qp) = dst.qps.get_mut(&dst_qp) else {
                    return;
                };
                let before = qp.parked_sends.len();
                qp.parked_sends
                    .retain(|p| !(p.src_addr == src_addr && p.src_qp == src_qp && p.wr_id == wr_id));
                if qp.parked_sends.len() != before {
                    // still unmatched: bounce a timeout status to the sender
                    let reply = Frame {
                        frame_type: FrameType::RecvReady,
                        wr_id,
                        mr_id: VerbError::Timeout.code(),
                        offset: 0,
                        length: 0,
                        payload: Vec::new(),
                    };
                    self.send_frame(dst_addr, dst_qp, src_addr, Some(src_qp), reply);
                }
            }
            Event::ConnectFailed { addr, qp, reason } => {
                if let Some(ep) = self.endpoints.get_mut(&addr) {
                    if let Some(q) = ep.qps.get_mut(&qp) {
                        q.phase = QpPhase::Closed;
                    }
                    ep.conn_events
                        .push_back(ConnEvent::ConnectFailed { qp: QpId(qp), reason });
                }
            }
        }
    }

    fn deliver(
        &mut self,
        src_addr: u64,
        src_qp: u64,
        dst_addr: u64,
        dst_qp: Option<u64>,
        frame: Frame,
    ) {
        if !self.endpoint_alive(dst_addr) {
            self.bounce_to_dead_peer(src_addr, src_qp, frame);
            return;
        }
        match frame.frame_type {
            FrameType::Hello => {
                let identity = frame.identity();
                let dst = self.endpoints.get_mut(&dst_addr).unwrap();
                let qp_id = dst.next_qp;
                dst.next_qp += 1;
                dst.qps.insert(
                    qp_id,
                    QpState {
                        phase: QpPhase::Ready,
                        peer_addr: src_addr,
                        peer_qp: Some(src_qp),
                        peer_identity: identity,
                        outstanding: BTreeMap::new(),
                        posted_recvs: VecDeque::new(),
                        parked_sends: VecDeque::new(),
                    },
                );
                if let Some(peer) = identity {
                    dst.conn_events.push_back(ConnEvent::Accepted {
                        qp: QpId(qp_id),
                        peer,
                    });
                }
                let ack = Frame::hello_ack(dst.identity);
                self.send_frame(dst_addr, qp_id, src_addr, Some(src_qp), ack);
            }
            FrameType::HelloAck => {
                let identity = frame.identity();
                let dst = self.endpoints.get_mut(&dst_addr).unwrap();
                let Some(qp) = dst_qp.and_then(|id| dst.qps.get_mut(&id)) else {
                    return;
                };
                if qp.phase == QpPhase::Connecting {
                    qp.phase = QpPhase::Ready;
                    qp.peer_qp = Some(src_qp);
                    qp.peer_identity = identity;
                    if let Some(peer) = identity {
                        dst.conn_events.push_back(ConnEvent::Connected {
                            qp: QpId(dst_qp.unwrap()),
                            peer,
                        });
                    }
                }
            }
            FrameType::ReadReq => {
                // served below the application: no callbacks, no app events
                let dst = self.endpoints.get_mut(&dst_addr).unwrap();
                let (status, payload) = match dst.mrs.get(&frame.mr_id) {
                    None => (VerbError::UnknownMr.code(), Vec::new()),
                    Some(region) => {
                        match check_region_bounds(
                            region.bytes.len() as u64,
                            frame.offset,
                            frame.length as u64,
                        ) {
                            Err(_) => (VerbError::OutOfBounds.code(), Vec::new()),
                            Ok(()) => {
                                let start = frame.offset as usize;
                                let end = start + frame.length as usize;
                                (0, region.bytes[start..end].to_vec())
                            }
                        }
                    }
                };
                if status == 0 {
                    self.trace(VerbRecord::ReadServe {
                        token: (src_addr, frame.wr_id),
                        src_addr: dst_addr,
                        src_mr: frame.mr_id,
                        src_offset: frame.offset,
                        len: frame.length,
                    });
                }
                let length = payload.len() as u32;
                let reply = Frame {
                    frame_type: FrameType::ReadResp,
                    wr_id: frame.wr_id,
                    mr_id: status,
                    offset: 0,
                    length,
                    payload,
                };
                self.send_frame(dst_addr, dst_qp.unwrap_or(0), src_addr, Some(src_qp), reply);
            }
            FrameType::ReadResp => {
                let dst = self.endpoints.get_mut(&dst_addr).unwrap();
                let Some(qp_id) = dst_qp else { return };
                let Some(qp) = dst.qps.get_mut(&qp_id) else {
                    return;
                };
                let Some(op) = qp.outstanding.remove(&frame.wr_id) else {
                    return;
                };
                if frame.mr_id == 0 {
                    let region = dst.mrs.get_mut(&op.local_mr.0).expect("validated at post");
                    let start = op.local_offset as usize;
                    region.bytes[start..start + frame.payload.len()]
                        .copy_from_slice(&frame.payload);
                    dst.complete(
                        qp_id,
                        frame.wr_id,
                        Verb::Read,
                        CompletionStatus::Success,
                        frame.length,
                    );
                    self.trace(VerbRecord::ReadPlace {
                        token: (dst_addr, frame.wr_id),
                        dst_addr,
                        dst_mr: op.local_mr.0,
                        dst_offset: op.local_offset,
                    });
                } else {
                    let err = VerbError::from_code(frame.mr_id).unwrap_or(VerbError::Disconnected);
                    dst.complete(
                        qp_id,
                        frame.wr_id,
                        Verb::Read,
                        CompletionStatus::Error(err),
                        0,
                    );
                }
            }
            FrameType::Write => {
                let dst = self.endpoints.get_mut(&dst_addr).unwrap();
                let status = match dst.mrs.get_mut(&frame.mr_id) {
                    None => VerbError::UnknownMr.code(),
                    Some(region) => {
                        match check_region_bounds(
                            region.bytes.len() as u64,
                            frame.offset,
                            frame.length as u64,
                        ) {
                            Err(_) => VerbError::OutOfBounds.code(),
                            Ok(()) => {
                                let start = frame.offset as usize;
                                region.bytes[start..start + frame.payload.len()]
                                    .copy_from_slice(&frame.payload);
                                0
                            }
                        }
                    }
                };
                if status == 0 {
                    self.trace(VerbRecord::CopyWrite {
                        dst_addr,
                        dst_mr: frame.mr_id,
                        dst_offset: frame.offset,
                        payload: frame.payload.clone(),
                    });
                }
                let reply = Frame {
                    frame_type: FrameType::WriteAck,
                    wr_id: frame.wr_id,
                    mr_id: status,
                    offset: 0,
                    length: 0,
                    payload: Vec::new(),
                };
                self.send_frame(dst_addr, dst_qp.unwrap_or(0), src_addr, Some(src_qp), reply);
            }
            FrameType::WriteAck => {
                let dst = self.endpoints.get_mut(&dst_addr).unwrap();
                let Some(qp_id) = dst_qp else { return };
                let Some(qp) = dst.qps.get_mut(&qp_id) else {
                    return;
                };
                let Some(op) = qp.outstanding.remove(&frame.wr_id) else {
                    return;
                };
                let status = if frame.mr_id == 0 {
                    CompletionStatus::Success
                } else {
                    CompletionStatus::Error(
                        VerbError::from_code(frame.mr_id).unwrap_or(VerbError::Disconnected),
                    )
                };
                let bytes = if frame.mr_id == 0 { op.len } else { 0 };
                dst.complete(qp_id, frame.wr_id, Verb::Write, status, bytes);
            }
            FrameType::Send => {
                let Some(qp_id) = dst_qp else { return };
                let has_recv = {
                    let dst = self.endpoints.get_mut(&dst_addr).unwrap();
                    let Some(qp) = dst.qps.get_mut(&qp_id) else {
                        return;
                    };
                    !qp.posted_recvs.is_empty()
                };
                if has_recv {
                    self.match_send(
                        dst_addr,
                        qp_id,
                        ParkedSend {
                            src_addr,
                            src_qp,
                            wr_id: frame.wr_id,
                            payload: frame.payload,
                        },
                    );
                } else {
                    let timeout = self.send_timeout_ns;
                    let dst = self.endpoints.get_mut(&dst_addr).unwrap();
                    let qp = dst.qps.get_mut(&qp_id).unwrap();
                    qp.parked_sends.push_back(ParkedSend {
                        src_addr,
                        src_qp,
                        wr_id: frame.wr_id,
                        payload: frame.payload,
                    });
                    let at = self.now.plus(timeout);
                    self.schedule(
                        at,
                        Event::SendTimeout {
                            dst_addr,
                            dst_qp: qp_id,
                            src_addr,
                            src_qp,
                            wr_id: frame.wr_id,
                        },
                    );
                }
            }
            FrameType::RecvReady => {
                let dst = self.endpoints.get_mut(&dst_addr).unwrap();
                let Some(qp_id) = dst_qp else { return };
                let Some(qp) = dst.qps.get_mut(&qp_id) else {
                    return;
                };
                let Some(op) = qp.outstanding.remove(&frame.wr_id) else {
                    return;
                };
                let status = if frame.mr_id == 0 {
                    CompletionStatus::Success
                } else {
                    CompletionStatus::Error(
                        VerbError::from_code(frame.mr_id).unwrap_or(VerbError::Disconnected),
                    )
                };
                let bytes = if frame.mr_id == 0 { op.len } else { 0 };
                dst.complete(qp_id, frame.wr_id, Verb::Send, status, bytes);
            }
        }
    }

    /// Match one arrived send against the receiver's queue head.
    fn match_send(&mut self, dst_addr: u64, qp_id: u64, send: ParkedSend) {
        let dst = self.endpoints.get_mut(&dst_addr).unwrap();
        let qp = dst.qps.get_mut(&qp_id).unwrap();
        let recv = qp.posted_recvs.pop_front().expect("caller checked");
        let (status, delivered);
        if send.payload.len() as u64 > recv.max_len as u64 {
            status = VerbError::RecvTooSmall.code();
            delivered = 0;
            dst.complete(
                qp_id,
                recv.wr_id,
                Verb::Recv,
                CompletionStatus::Error(VerbError::RecvTooSmall),
                0,
            );
        } else {
            let region = dst.mrs.get_mut(&recv.mr.0).expect("validated at post");
            let start = recv.offset as usize;
            region.bytes[start..start + send.payload.len()].copy_from_slice(&send.payload);
            status = 0;
            delivered = send.payload.len() as u32;
            dst.complete(
                qp_id,
                recv.wr_id,
                Verb::Recv,
                CompletionStatus::Success,
                delivered,
            );
            self.trace(VerbRecord::RecvDeliver {
                dst_addr,
                dst_mr: recv.mr.0,
                dst_offset: recv.offset,
                payload: send.payload.clone(),
            });
        }
        let reply = Frame {
            frame_type: FrameType::RecvReady,
            wr_id: send.wr_id,
            mr_id: status,
            offset: 0,
            length: delivered,
            payload: Vec::new(),
        };
        self.send_frame(dst_addr, qp_id, send.src_addr, Some(send.src_qp), reply);
    }

    /// The destination endpoint is gone: fail the source's op if it expects
    /// a response; drop response frames outright.
    fn bounce_to_dead_peer(&mut self, src_addr: u64, src_qp: u64, frame: Frame) {
        let Some(src) = self.endpoints.get_mut(&src_addr) else {
            return;
        };
        if !src.alive {
            return;
        }
        match frame.frame_type {
            FrameType::Hello => {
                if let Some(qp) = src.qps.get_mut(&src_qp) {
                    qp.phase = QpPhase::Closed;
                }
                src.conn_events.push_back(ConnEvent::ConnectFailed {
                    qp: QpId(src_qp),
                    reason: "peer unreachable".to_string(),
                });
            }
            FrameType::ReadReq | FrameType::Write | FrameType::Send => {
                let verb = match frame.frame_type {
                    FrameType::ReadReq => Verb::Read,
                    FrameType::Write => Verb::Write,
                    _ => Verb::Send,
                };
                let (removed, newly_closed) = match src.qps.get_mut(&src_qp) {
                    Some(qp) => {
                        let removed = qp.outstanding.remove(&frame.wr_id).is_some();
                        let newly_closed = qp.phase != QpPhase::Closed;
                        qp.phase = QpPhase::Closed;
                        (removed, newly_closed)
                    }
                    None => (false, false),
                };
                if removed {
                    src.complete(
                        src_qp,
                        frame.wr_id,
                        verb,
                        CompletionStatus::Error(VerbError::Disconnected),
                        0,
                    );
                }
                if newly_closed {
                    src.conn_events
                        .push_back(ConnEvent::Disconnected { qp: QpId(src_qp) });
                }
            }
            _ => {}
        }
    }
}

/// Shared handle to the deterministic fabric.
#[derive(Clone)]
pub struct LoopbackFabric {
    core: Rc<RefCell<FabricCore>>,
}

impl LoopbackFabric {
    pub fn new(seed: u64, latency: LatencyModel) -> Self {
        LoopbackFabric {
            core: Rc::new(RefCell::new(FabricCore {
                now: SimTime::ZERO,
                seq: 0,
                queue: BinaryHeap::new(),
                endpoints: BTreeMap::new(),
                next_addr: 1,
                latency,
                rng: ChaCha8Rng::seed_from_u64(seed),
                link_clock: BTreeMap::new(),
                send_timeout_ns: 500_000_000, // 500 ms virtual
                verb_trace: None,
            })),
        }
    }

    pub fn with_send_timeout(self, timeout_ns: u64) -> Self {
        self.core.borrow_mut().send_timeout_ns = timeout_ns;
        self
    }

    /// Create a new endpoint on this fabric.
    pub fn endpoint(&self, identity: EndpointIdentity) -> LoopbackEndpoint {
        let mut core = self.core.borrow_mut();
        let addr = core.next_addr;
        core.next_addr += 1;
        core.endpoints.insert(addr, EndpointState::new(identity));
        LoopbackEndpoint {
            core: Rc::clone(&self.core),
            addr,
        }
    }

    pub fn now(&self) -> SimTime {
        self.core.borrow().now
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.core.borrow().queue.peek().map(|Reverse(q)| q.at)
    }

    /// Deliver everything scheduled up to and including `t`, then set the
    /// clock to `t`.
    pub fn advance_to(&self, t: SimTime) {
        loop {
            let event = {
                let mut core = self.core.borrow_mut();
                match core.queue.peek() {
                    Some(Reverse(q)) if q.at <= t => {
                        let Reverse(q) = core.queue.pop().unwrap();
                        core.now = q.at;
                        Some(q.event)
                    }
                    _ => None,
                }
            };
            match event {
                Some(e) => self.core.borrow_mut().handle(e),
                None => break,
            }
        }
        let mut core = self.core.borrow_mut();
        if core.now < t {
            core.now = t;
        }
    }

    /// Advance to the next scheduled event, if any, and return the new time.
    pub fn advance_next(&self) -> Option<SimTime> {
        let t = self.next_event_time()?;
        self.advance_to(t);
        Some(t)
    }

    /// Drain all queued activity (useful in tests). Returns the final time.
    pub fn run_until_idle(&self) -> SimTime {
        while self.advance_next().is_some() {}
        self.now()
    }

    /// Kill an endpoint: pending frames to it bounce, peers observe
    /// disconnects, its outstanding work errors out.
    pub fn remove_endpoint(&self, addr: &EndpointAddr) {
        let EndpointAddr::Sim(addr) = addr else {
            return;
        };
        let mut core = self.core.borrow_mut();
        if let Some(ep) = core.endpoints.get_mut(addr) {
            ep.alive = false;
        }
        // fail peers' outstanding ops towards the dead endpoint
        let peers: Vec<u64> = core.endpoints.keys().copied().collect();
        for peer_addr in peers {
            if peer_addr == *addr {
                continue;
            }
            let ep = core.endpoints.get_mut(&peer_addr).unwrap();
            if !ep.alive {
                continue;
            }
            let qp_ids: Vec<u64> = ep
                .qps
                .iter()
                .filter(|(_, q)| q.peer_addr == *addr && q.phase == QpPhase::Ready)
                .map(|(&id, _)| id)
                .collect();
            for qp_id in qp_ids {
                let qp = ep.qps.get_mut(&qp_id).unwrap();
                qp.phase = QpPhase::Closed;
                let pending: Vec<(u64, Verb)> = qp
                    .outstanding
                    .iter()
                    .map(|(&wr, op)| (wr, op.verb))
                    .collect();
                qp.outstanding.clear();
                for (wr, verb) in pending {
                    ep.complete(
                        qp_id,
                        wr,
                        verb,
                        CompletionStatus::Error(VerbError::Disconnected),
                        0,
                    );
                }
                ep.conn_events
                    .push_back(ConnEvent::Disconnected { qp: QpId(qp_id) });
            }
        }
    }

    /// Start recording served verbs for the reference interpreter.
    pub fn enable_verb_trace(&self) {
        self.core.borrow_mut().verb_trace = Some(Vec::new());
    }

    pub fn take_verb_trace(&self) -> Vec<VerbRecord> {
        self.core
            .borrow_mut()
            .verb_trace
            .replace(Vec::new())
            .unwrap_or_default()
    }

    /// Snapshot of a region's bytes (test support).
    pub fn region_snapshot(&self, addr: &EndpointAddr, mr: MrId) -> Option<Vec<u8>> {
        let EndpointAddr::Sim(addr) = addr else {
            return None;
        };
        self.core
            .borrow()
            .endpoints
            .get(addr)
            .and_then(|e| e.mrs.get(&mr.0))
            .map(|r| r.bytes.clone())
    }
}

/// One endpoint handle on the loopback fabric. Not `Send`: deterministic
/// runs are single-threaded by design.
pub struct LoopbackEndpoint {
    core: Rc<RefCell<FabricCore>>,
    addr: u64,
}

impl LoopbackEndpoint {
    fn with_state<R>(&self, f: impl FnOnce(&mut EndpointState) -> R) -> R {
        let mut core = self.core.borrow_mut();
        let state = core
            .endpoints
            .get_mut(&self.addr)
            .expect("endpoint exists while handle lives");
        f(state)
    }

    fn ready_qp_peer(&self, qp: QpId) -> Result<(u64, u64), TransportError> {
        let core = self.core.borrow();
        let state = core.endpoints.get(&self.addr).ok_or(TransportError::Shutdown)?;
        let q = state.qps.get(&qp.0).ok_or(TransportError::UnknownQp(qp))?;
        if q.phase != QpPhase::Ready {
            return Err(TransportError::QpNotReady(qp));
        }
        Ok((q.peer_addr, q.peer_qp.expect("ready qp has peer")))
    }

    fn check_wr_free(&self, qp: QpId, wr_id: u64) -> Result<(), TransportError> {
        let core = self.core.borrow();
        let state = core.endpoints.get(&self.addr).ok_or(TransportError::Shutdown)?;
        let q = state.qps.get(&qp.0).ok_or(TransportError::UnknownQp(qp))?;
        if q.outstanding.contains_key(&wr_id) {
            return Err(TransportError::DuplicateWrId(wr_id));
        }
        Ok(())
    }

    fn check_local_span(&self, mr: MrId, offset: u64, len: u64) -> Result<(), TransportError> {
        let core = self.core.borrow();
        let state = core.endpoints.get(&self.addr).ok_or(TransportError::Shutdown)?;
        let region = state.mrs.get(&mr.0).ok_or(TransportError::UnknownMr(mr.0))?;
        check_region_bounds(region.bytes.len() as u64, offset, len)
    }

    fn record_outstanding(&self, qp: QpId, wr_id: u64, op: PendingOp) {
        self.with_state(|s| {
            s.qps
                .get_mut(&qp.0)
                .expect("checked")
                .outstanding
                .insert(wr_id, op);
        });
    }
}

impl Endpoint for LoopbackEndpoint {
    fn addr(&self) -> EndpointAddr {
        EndpointAddr::Sim(self.addr)
    }

    fn identity(&self) -> EndpointIdentity {
        self.with_state(|s| s.identity)
    }

    fn register_mr(&mut self, kind: MrKind, len: u64) -> Result<MrId, TransportError> {
        if len == 0 {
            return Err(TransportError::ZeroLength);
        }
        if len > (1 << 32) {
            return Err(TransportError::ResourceExhausted(len));
        }
        Ok(self.with_state(|s| {
            let id = s.next_mr;
            s.next_mr += 1;
            s.mrs.insert(
                id,
                Region {
                    kind,
                    bytes: vec![0u8; len as usize],
                },
            );
            MrId(id)
        }))
    }

    fn mr_len(&self, mr: MrId) -> Result<u64, TransportError> {
        let core = self.core.borrow();
        let state = core.endpoints.get(&self.addr).ok_or(TransportError::Shutdown)?;
        state
            .mrs
            .get(&mr.0)
            .map(|r| r.bytes.len() as u64)
            .ok_or(TransportError::UnknownMr(mr.0))
    }

    fn mr_write(&mut self, mr: MrId, offset: u64, data: &[u8]) -> Result<(), TransportError> {
        self.with_state(|s| {
            let region = s.mrs.get_mut(&mr.0).ok_or(TransportError::UnknownMr(mr.0))?;
            check_region_bounds(region.bytes.len() as u64, offset, data.len() as u64)?;
            let start = offset as usize;
            region.bytes[start..start + data.len()].copy_from_slice(data);
            Ok(())
        })
    }

    fn mr_read(&self, mr: MrId, offset: u64, len: u64) -> Result<Vec<u8>, TransportError> {
        let core = self.core.borrow();
        let state = core.endpoints.get(&self.addr).ok_or(TransportError::Shutdown)?;
        let region = state.mrs.get(&mr.0).ok_or(TransportError::UnknownMr(mr.0))?;
        check_region_bounds(region.bytes.len() as u64, offset, len)?;
        let start = offset as usize;
        Ok(region.bytes[start..start + len as usize].to_vec())
    }

    fn begin_connect(&mut self, peer: &EndpointAddr) -> Result<QpId, TransportError> {
        let EndpointAddr::Sim(peer_addr) = peer else {
            return Err(TransportError::Io(format!(
                "loopback endpoint cannot reach {peer}"
            )));
        };
        let peer_addr = *peer_addr;
        let identity = self.identity();
        let qp_id = self.with_state(|s| {
            let id = s.next_qp;
            s.next_qp += 1;
            s.qps.insert(
                id,
                QpState {
                    phase: QpPhase::Connecting,
                    peer_addr,
                    peer_qp: None,
                    peer_identity: None,
                    outstanding: BTreeMap::new(),
                    posted_recvs: VecDeque::new(),
                    parked_sends: VecDeque::new(),
                },
            );
            id
        });
        let mut core = self.core.borrow_mut();
        if core.endpoint_alive(peer_addr) {
            core.send_frame(self.addr, qp_id, peer_addr, None, Frame::hello(identity));
        } else {
            let at = core.now.plus(core.latency.base_ns);
            core.schedule(
                at,
                Event::ConnectFailed {
                    addr: self.addr,
                    qp: qp_id,
                    reason: format!("no endpoint at sim:{peer_addr}"),
                },
            );
        }
        Ok(QpId(qp_id))
    }

    fn poll_conn_events(&mut self) -> Vec<ConnEvent> {
        self.with_state(|s| s.conn_events.drain(..).collect())
    }

    fn qp_peer(&self, qp: QpId) -> Option<EndpointIdentity> {
        let core = self.core.borrow();
        core.endpoints
            .get(&self.addr)
            .and_then(|s| s.qps.get(&qp.0))
            .and_then(|q| q.peer_identity)
    }

    fn close_qp(&mut self, qp: QpId) {
        self.with_state(|s| {
            if let Some(q) = s.qps.get_mut(&qp.0) {
                q.phase = QpPhase::Closed;
            }
        });
    }

    fn post_read(
        &mut self,
        qp: QpId,
        remote_mr: u32,
        remote_offset: u64,
        local_mr: MrId,
        local_offset: u64,
        len: u32,
        wr_id: u64,
    ) -> Result<(), TransportError> {
        if len == 0 {
            return Err(TransportError::ZeroLength);
        }
        if len > MAX_FRAME_PAYLOAD {
            return Err(TransportError::PayloadTooLarge {
                len: len as u64,
                cap: MAX_FRAME_PAYLOAD,
            });
        }
        let (peer_addr, peer_qp) = self.ready_qp_peer(qp)?;
        self.check_wr_free(qp, wr_id)?;
        self.check_local_span(local_mr, local_offset, len as u64)?;
        self.record_outstanding(
            qp,
            wr_id,
            PendingOp {
                verb: Verb::Read,
                local_mr,
                local_offset,
                len,
            },
        );
        let mut core = self.core.borrow_mut();
        core.send_frame(
            self.addr,
            qp.0,
            peer_addr,
            Some(peer_qp),
            Frame {
                frame_type: FrameType::ReadReq,
                wr_id,
                mr_id: remote_mr,
                offset: remote_offset,
                length: len,
                payload: Vec::new(),
            },
        );
        Ok(())
    }

    fn post_write(
        &mut self,
        qp: QpId,
        payload: &[u8],
        remote_mr: u32,
        remote_offset: u64,
        wr_id: u64,
    ) -> Result<(), TransportError> {
        if payload.is_empty() {
            return Err(TransportError::ZeroLength);
        }
        if payload.len() as u64 > MAX_FRAME_PAYLOAD as u64 {
            return Err(TransportError::PayloadTooLarge {
                len: payload.len() as u64,
                cap: MAX_FRAME_PAYLOAD,
            });
        }
        let (peer_addr, peer_qp) = self.ready_qp_peer(qp)?;
        self.check_wr_free(qp, wr_id)?;
        self.record_outstanding(
            qp,
            wr_id,
            PendingOp {
                verb: Verb::Write,
                local_mr: MrId(0),
                local_offset: 0,
                len: payload.len() as u32,
            },
        );
        self.core.borrow_mut().send_frame(
            self.addr,
            qp.0,
            peer_addr,
            Some(peer_qp),
            Frame {
                frame_type: FrameType::Write,
                wr_id,
                mr_id: remote_mr,
                offset: remote_offset,
                length: payload.len() as u32,
                payload: payload.to_vec(),
            },
        );
        Ok(())
    }

    fn post_send(&mut self, qp: QpId, payload: &[u8], wr_id: u64) -> Result<(), TransportError> {
        if payload.is_empty() {
            return Err(TransportError::ZeroLength);
        }
        if payload.len() as u64 > MAX_FRAME_PAYLOAD as u64 {
            return Err(TransportError::PayloadTooLarge {
                len: payload.len() as u64,
                cap: MAX_FRAME_PAYLOAD,
            });
        }
        let (peer_addr, peer_qp) = self.ready_qp_peer(qp)?;
        self.check_wr_free(qp, wr_id)?;
        self.record_outstanding(
            qp,
            wr_id,
            PendingOp {
                verb: Verb::Send,
                local_mr: MrId(0),
                local_offset: 0,
                len: payload.len() as u32,
            },
        );
        self.core.borrow_mut().send_frame(
            self.addr,
            qp.0,
            peer_addr,
            Some(peer_qp),
            Frame {
                frame_type: FrameType::Send,
                wr_id,
                mr_id: 0,
                offset: 0,
                length: payload.len() as u32,
                payload: payload.to_vec(),
            },
        );
        Ok(())
    }

    fn post_recv(
        &mut self,
        qp: QpId,
        mr: MrId,
        offset: u64,
        max_len: u32,
        wr_id: u64,
    ) -> Result<(), TransportError> {
        if max_len == 0 {
            return Err(TransportError::ZeroLength);
        }
        self.check_local_span(mr, offset, max_len as u64)?;
        // receives may be posted while connecting, so only require the QP
        let qp_exists = self.with_state(|s| s.qps.contains_key(&qp.0));
        if !qp_exists {
            return Err(TransportError::UnknownQp(qp));
        }
        let parked = self.with_state(|s| {
            let q = s.qps.get_mut(&qp.0).unwrap();
            q.posted_recvs.push_back(PostedRecv {
                wr_id,
                mr,
                offset,
                max_len,
            });
            q.parked_sends.pop_front()
        });
        if let Some(send) = parked {
            self.core.borrow_mut().match_send(self.addr, qp.0, send);
        }
        Ok(())
    }

    fn poll_cq(&mut self, max: usize) -> Vec<WorkCompletion> {
        self.with_state(|s| {
            let n = max.min(s.cq.len());
            s.cq.drain(..n).collect()
        })
    }

    fn responder_callbacks(&self) -> u64 {
        self.with_state(|s| s.responder_callbacks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::Role;

    fn pair(seed: u64, latency: LatencyModel) -> (LoopbackFabric, LoopbackEndpoint, LoopbackEndpoint, QpId, QpId) {
        let fabric = LoopbackFabric::new(seed, latency);
        let mut a = fabric.endpoint(EndpointIdentity::new(Role::Decode, 1, 0));
        let b = fabric.endpoint(EndpointIdentity::new(Role::Prefill, 2, 0));
        let qp_a = a.begin_connect(&b.addr()).unwrap();
        fabric.run_until_idle();
        let mut b = b;
        let accepted = b.poll_conn_events();
        let qp_b = match &accepted[0] {
            ConnEvent::Accepted { qp, peer } => {
                assert_eq!(peer.worker_id, 1);
                *qp
            }
            other => panic!("expected accept, got {other:?}"),
        };
        let connected = a.poll_conn_events();
        assert!(matches!(connected[0], ConnEvent::Connected { .. }));
        (fabric, a, b, qp_a, qp_b)
    }

    fn quiet() -> LatencyModel {
        LatencyModel {
            base_ns: 1_000,
            per_kib_ns: 10,
            jitter_ns: 0,
        }
    }

    /// Deterministic pattern used as the byte oracle in transfer tests.
    fn pattern(len: usize, salt: u8) -> Vec<u8> {
        (0..len).map(|i| (i as u8).wrapping_mul(31).wrapping_add(salt)).collect()
    }

    #[test]
    fn read_copies_remote_bytes_exactly() {
        let (fabric, mut a, mut b, qp_a, _qp_b) = pair(7, quiet());
        let mr_b = b.register_mr(MrKind::GpuPayload, 16384).unwrap();
        let data = pattern(8192, 3);
        b.mr_write(mr_b, 4096, &data).unwrap();
        let mr_a = a.register_mr(MrKind::GpuPayload, 8192).unwrap();

        a.post_read(qp_a, mr_b.0, 4096, mr_a, 0, 8192, 11).unwrap();
        fabric.run_until_idle();

        let wcs = a.poll_cq(16);
        assert_eq!(wcs.len(), 1);
        assert_eq!(wcs[0].wr_id, 11);
        assert_eq!(wcs[0].verb, Verb::Read);
        assert!(wcs[0].status.is_success());
        assert_eq!(wcs[0].byte_count, 8192);
        assert_eq!(a.mr_read(mr_a, 0, 8192).unwrap(), data);
        // the responder application saw nothing
        assert_eq!(b.poll_cq(16).len(), 0);
        assert_eq!(b.responder_callbacks(), 0);
    }

    #[test]
    fn out_of_bounds_read_fails_with_error_completion() {
        let (fabric, mut a, mut b, qp_a, _) = pair(7, quiet());
        let mr_b = b.register_mr(MrKind::GpuPayload, 4096).unwrap();
        let mr_a = a.register_mr(MrKind::GpuPayload, 4096).unwrap();

        // remote offset length-1 with len 2 crosses the region end
        a.post_read(qp_a, mr_b.0, 4095, mr_a, 0, 2, 1).unwrap();
        fabric.run_until_idle();
        let wcs = a.poll_cq(16);
        assert_eq!(wcs.len(), 1);
        assert_eq!(
            wcs[0].status,
            CompletionStatus::Error(VerbError::OutOfBounds)
        );
        // unknown remote mr also errors
        a.post_read(qp_a, 99, 0, mr_a, 0, 16, 2).unwrap();
        fabric.run_until_idle();
        assert_eq!(
            a.poll_cq(16)[0].status,
            CompletionStatus::Error(VerbError::UnknownMr)
        );
    }

    #[test]
    fn zero_length_and_oversize_rejected_at_post() {
        let (_fabric, mut a, mut b, qp_a, _) = pair(7, quiet());
        let mr_b = b.register_mr(MrKind::GpuPayload, 4096).unwrap();
        let mr_a = a.register_mr(MrKind::GpuPayload, 4096).unwrap();
        assert!(matches!(
            a.post_read(qp_a, mr_b.0, 0, mr_a, 0, 0, 1),
            Err(TransportError::ZeroLength)
        ));
        assert!(matches!(
            a.post_read(qp_a, mr_b.0, 0, mr_a, 0, MAX_FRAME_PAYLOAD + 1, 1),
            Err(TransportError::PayloadTooLarge { .. })
        ));
        assert!(matches!(
            a.post_send(qp_a, &[], 1),
            Err(TransportError::ZeroLength)
        ));
        // local bounds are checked synchronously
        assert!(matches!(
            a.post_read(qp_a, mr_b.0, 0, mr_a, 4090, 16, 1),
            Err(TransportError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn reads_complete_in_posting_order() {
        let (fabric, mut a, mut b, qp_a, _) = pair(7, quiet());
        let mr_b = b.register_mr(MrKind::GpuPayload, 4096).unwrap();
        b.mr_write(mr_b, 0, &pattern(4096, 9)).unwrap();
        let mr_a = a.register_mr(MrKind::GpuPayload, 4096).unwrap();
        for i in 0..8u64 {
            a.post_read(qp_a, mr_b.0, i * 512, mr_a, i * 512, 512, 100 + i)
                .unwrap();
        }
        fabric.run_until_idle();
        let wcs = a.poll_cq(16);
        let ids: Vec<u64> = wcs.iter().map(|w| w.wr_id).collect();
        assert_eq!(ids, (100..108).collect::<Vec<_>>());
    }

    #[test]
    fn write_mirrors_read_semantics() {
        let (fabric, mut a, mut b, qp_a, _) = pair(7, quiet());
        let mr_b = b.register_mr(MrKind::GpuPayload, 8192).unwrap();
        let data = pattern(1024, 5);
        a.post_write(qp_a, &data, mr_b.0, 2048, 21).unwrap();
        fabric.run_until_idle();
        let wcs = a.poll_cq(16);
        assert!(wcs[0].status.is_success());
        assert_eq!(wcs[0].byte_count, 1024);
        assert_eq!(b.mr_read(mr_b, 2048, 1024).unwrap(), data);
        assert_eq!(b.poll_cq(16).len(), 0, "write is one-sided");
        assert_eq!(b.responder_callbacks(), 0);

        a.post_write(qp_a, &data, mr_b.0, 8000, 22).unwrap();
        fabric.run_until_idle();
        assert_eq!(
            a.poll_cq(16)[0].status,
            CompletionStatus::Error(VerbError::OutOfBounds)
        );
    }

    #[test]
    fn send_recv_rendezvous() {
        let (fabric, mut a, mut b, qp_a, qp_b) = pair(7, quiet());
        let mr_b = b.register_mr(MrKind::CpuControl, 4096).unwrap();
        let payload = pattern(100, 1);

        // send first: parks until the receive is posted (advance within the
        // rendezvous timeout window, not past it)
        a.post_send(qp_a, &payload, 31).unwrap();
        fabric.advance_to(fabric.now().plus(10_000_000));
        assert!(a.poll_cq(16).is_empty(), "send must not complete unmatched");

        b.post_recv(qp_b, mr_b, 64, 512, 41).unwrap();
        fabric.advance_to(fabric.now().plus(10_000_000));
        let b_wcs = b.poll_cq(16);
        assert_eq!(b_wcs.len(), 1);
        assert_eq!(b_wcs[0].verb, Verb::Recv);
        assert_eq!(b_wcs[0].byte_count, 100);
        assert_eq!(b.mr_read(mr_b, 64, 100).unwrap(), payload);
        let a_wcs = a.poll_cq(16);
        assert_eq!(a_wcs.len(), 1);
        assert_eq!(a_wcs[0].verb, Verb::Send);
        assert!(a_wcs[0].status.is_success());
    }

    #[test]
    fn oversized_send_errors_both_sides() {
        let (fabric, mut a, mut b, qp_a, qp_b) = pair(7, quiet());
        let mr_b = b.register_mr(MrKind::CpuControl, 4096).unwrap();
        b.post_recv(qp_b, mr_b, 0, 16, 51).unwrap();
        a.post_send(qp_a, &pattern(64, 2), 52).unwrap();
        fabric.run_until_idle();
        assert_eq!(
            b.poll_cq(16)[0].status,
            CompletionStatus::Error(VerbError::RecvTooSmall)
        );
        assert_eq!(
            a.poll_cq(16)[0].status,
            CompletionStatus::Error(VerbError::RecvTooSmall)
        );
    }

    #[test]
    fn unmatched_send_times_out() {
        let fabric = LoopbackFabric::new(7, quiet()).with_send_timeout(1_000_000);
        let mut a = fabric.endpoint(EndpointIdentity::new(Role::Decode, 1, 0));
        let b = fabric.endpoint(EndpointIdentity::new(Role::Prefill, 2, 0));
        let qp_a = a.begin_connect(&b.addr()).unwrap();
        fabric.run_until_idle();
        a.poll_conn_events();
        a.post_send(qp_a, &[1, 2, 3], 61).unwrap();
        fabric.run_until_idle();
        let wcs = a.poll_cq(16);
        assert_eq!(wcs.len(), 1);
        assert_eq!(wcs[0].status, CompletionStatus::Error(VerbError::Timeout));
    }

    #[test]
    fn poll_cq_drains_in_batches() {
        let (fabric, mut a, mut b, qp_a, _) = pair(7, quiet());
        let mr_b = b.register_mr(MrKind::GpuPayload, 4096).unwrap();
        let mr_a = a.register_mr(MrKind::GpuPayload, 4096).unwrap();
        assert!(a.poll_cq(16).is_empty());
        for i in 0..5u64 {
            a.post_read(qp_a, mr_b.0, 0, mr_a, 0, 64, i).unwrap();
        }
        fabric.run_until_idle();
        assert_eq!(a.poll_cq(2).len(), 2);
        assert_eq!(a.poll_cq(16).len(), 3);
        assert_eq!(a.poll_cq(16).len(), 0);
    }

    #[test]
    fn duplicate_wr_id_rejected_while_outstanding() {
        let (fabric, mut a, mut b, qp_a, _) = pair(7, quiet());
        let mr_b = b.register_mr(MrKind::GpuPayload, 4096).unwrap();
        let mr_a = a.register_mr(MrKind::GpuPayload, 4096).unwrap();
        a.post_read(qp_a, mr_b.0, 0, mr_a, 0, 64, 9).unwrap();
        assert!(matches!(
            a.post_read(qp_a, mr_b.0, 0, mr_a, 0, 64, 9),
            Err(TransportError::DuplicateWrId(9))
        ));
        fabric.run_until_idle();
        assert_eq!(a.poll_cq(16).len(), 1);
        // completed: the id may be reused
        a.post_read(qp_a, mr_b.0, 0, mr_a, 0, 64, 9).unwrap();
        fabric.run_until_idle();
        assert_eq!(a.poll_cq(16).len(), 1);
    }

    #[test]
    fn connect_to_missing_endpoint_fails() {
        let fabric = LoopbackFabric::new(7, quiet());
        let mut a = fabric.endpoint(EndpointIdentity::new(Role::Decode, 1, 0));
        let qp = a.begin_connect(&EndpointAddr::Sim(999)).unwrap();
        fabric.run_until_idle();
        let events = a.poll_conn_events();
        assert!(
            matches!(&events[0], ConnEvent::ConnectFailed { qp: q, .. } if *q == qp),
            "got {events:?}"
        );
        // posting on the failed qp is a synchronous error
        assert!(a.post_send(qp, &[1], 1).is_err());
    }

    #[test]
    fn removed_endpoint_fails_outstanding_and_disconnects() {
        let (fabric, mut a, mut b, qp_a, _) = pair(7, quiet());
        let mr_b = b.register_mr(MrKind::GpuPayload, 4096).unwrap();
        let mr_a = a.register_mr(MrKind::GpuPayload, 4096).unwrap();
        a.post_read(qp_a, mr_b.0, 0, mr_a, 0, 64, 71).unwrap();
        fabric.remove_endpoint(&b.addr());
        fabric.run_until_idle();
        let wcs = a.poll_cq(16);
        assert_eq!(wcs.len(), 1);
        assert_eq!(
            wcs[0].status,
            CompletionStatus::Error(VerbError::Disconnected)
        );
        let events = a.poll_conn_events();
        assert!(events.iter().any(|e| matches!(e, ConnEvent::Disconnected { .. })));
        // new posts on the dead qp fail synchronously
        assert!(matches!(
            a.post_read(qp_a, mr_b.0, 0, mr_a, 0, 64, 72),
            Err(TransportError::QpNotReady(_))
        ));
    }

    #[test]
    fn byte_fidelity_matches_interpreter_on_random_programs() {
        use crate::oracle::VerbInterpreter;
        use rand::Rng;

        for seed in 0..30u64 {
            let jitter = LatencyModel {
                base_ns: 100,
                per_kib_ns: 5,
                jitter_ns: 50_000,
            };
            let (fabric, mut a, mut b, qp_a, qp_b) = pair(seed, jitter);
            let mr_a = a.register_mr(MrKind::GpuPayload, 4096).unwrap();
            let mr_b = b.register_mr(MrKind::GpuPayload, 4096).unwrap();
            let init_a = pattern(4096, 11);
            let init_b = pattern(4096, 23);
            a.mr_write(mr_a, 0, &init_a).unwrap();
            b.mr_write(mr_b, 0, &init_b).unwrap();

            fabric.enable_verb_trace();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
            let mut wr = 1000u64;
            for _ in 0..40 {
                wr += 1;
                let off = rng.gen_range(0..63u64) * 64;
                let len = 64u32;
                match rng.gen_range(0..3u32) {
                    0 => {
                        a.post_read(qp_a, mr_b.0, off, mr_a, (4096 - 64) - off % 4032, len, wr)
                            .unwrap();
                    }
                    1 => {
                        let payload = pattern(len as usize, (wr % 251) as u8);
                        a.post_write(qp_a, &payload, mr_b.0, off, wr).unwrap();
                    }
                    _ => {
                        let payload = pattern(len as usize, (wr % 249) as u8);
                        b.post_recv(qp_b, mr_b, off, len, wr).unwrap();
                        a.post_send(qp_a, &payload, wr).unwrap();
                    }
                }
                if rng.gen_bool(0.3) {
                    fabric.advance_next();
                }
            }
            fabric.run_until_idle();

            let addr_a = match a.addr() {
                EndpointAddr::Sim(x) => x,
                _ => unreachable!(),
            };
            let addr_b = match b.addr() {
                EndpointAddr::Sim(x) => x,
                _ => unreachable!(),
            };
            let mut interp = VerbInterpreter::new();
            interp.load_region(addr_a, mr_a.0, init_a.clone());
            interp.load_region(addr_b, mr_b.0, init_b.clone());
            interp.replay(&fabric.take_verb_trace()).unwrap();
            assert_eq!(
                interp.region(addr_a, mr_a.0).unwrap(),
                &a.mr_read(mr_a, 0, 4096).unwrap()[..],
                "seed {seed}: initiator region diverged from interpreter"
            );
            assert_eq!(
                interp.region(addr_b, mr_b.0).unwrap(),
                &b.mr_read(mr_b, 0, 4096).unwrap()[..],
                "seed {seed}: responder region diverged from interpreter"
            );
            assert_eq!(a.responder_callbacks() + b.responder_callbacks(), 0);
        }
    }
}
