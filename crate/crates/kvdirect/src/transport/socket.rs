//! TCP-backed transport: the same verbs over real sockets.
//!
//! Each queue pair maps to one TCP connection; TCP's ordered reliable
//! delivery stands in for the RC transport assumed by the protocol. A
//! listener thread accepts connections and a reader thread per connection
//! services frames: one-sided READ_REQ/WRITE frames are handled entirely
//! inside these transport threads, the owning application is never invoked.

use std::collections::{BTreeMap, VecDeque};
use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::frame::{Frame, FrameType, HEADER_LEN};
use super::{
    check_region_bounds, CompletionStatus, ConnEvent, Endpoint, EndpointAddr, EndpointIdentity,
    MrId, MrKind, QpId, TransportError, Verb, VerbError, WorkCompletion, MAX_FRAME_PAYLOAD,
};

const READ_TICK: Duration = Duration::from_millis(10);
const CONNECT_TIMEOUT: Duration = Duration::from_millis(2_000);

#[derive(Debug)]
struct Region {
    #[allow(dead_code)]
    kind: MrKind,
    bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum QpPhase {
    Connecting,
    Ready,
    Closed,
}

struct PendingOp {
    verb: Verb,
    local_mr: MrId,
    local_offset: u64,
    len: u32,
}

struct PostedRecv {
    wr_id: u64,
    mr: MrId,
    offset: u64,
    max_len: u32,
}

struct ParkedSend {
    wr_id: u64,
    payload: Vec<u8>,
    deadline: Instant,
}

struct QpState {
    phase: QpPhase,
    peer_identity: Option<EndpointIdentity>,
    writer: Option<Arc<Mutex<TcpStream>>>,
    outstanding: BTreeMap<u64, PendingOp>,
    posted_recvs: VecDeque<PostedRecv>,
    parked_sends: VecDeque<ParkedSend>,
}

struct Core {
    identity: EndpointIdentity,
    mrs: BTreeMap<u32, Region>,
    next_mr: u32,
    qps: BTreeMap<u64, QpState>,
    next_qp: u64,
    cq: VecDeque<WorkCompletion>,
    conn_events: VecDeque<ConnEvent>,
    responder_callbacks: u64,
    send_timeout: Duration,
    shutdown: bool,
}

impl Core {
    fn complete(&mut self, qp: u64, wr_id: u64, verb: Verb, status: CompletionStatus, bytes: u32) {
        self.cq.push_back(WorkCompletion {
            qp: QpId(qp),
            wr_id,
            verb,
            status,
            byte_count: bytes,
        });
    }

    fn resolve(&mut self, qp_id: u64, frame: &Frame, verb: Verb) {
        let Some(qp) = self.qps.get_mut(&qp_id) else {
            return;
        };
        let Some(op) = qp.outstanding.remove(&frame.wr_id) else {
            return;
        };
        if frame.mr_id == 0 {
            if verb == Verb::Read {
                let region = self.mrs.get_mut(&op.local_mr.0).expect("validated at post");
                let start = op.local_offset as usize;
                region.bytes[start..start + frame.payload.len()].copy_from_slice(&frame.payload);
            }
            let bytes = if verb == Verb::Read {
                frame.length
            } else {
                op.len
            };
            self.complete(qp_id, frame.wr_id, verb, CompletionStatus::Success, bytes);
        } else {
            let err = VerbError::from_code(frame.mr_id).unwrap_or(VerbError::Disconnected);
            self.complete(qp_id, frame.wr_id, verb, CompletionStatus::Error(err), 0);
        }
    }

    /// Serve a one-sided frame below the application. Returns the reply.
    fn serve(&mut self, frame: &Frame) -> Frame {
        match frame.frame_type {
            FrameType::ReadReq => {
                let (status, payload) = match self.mrs.get(&frame.mr_id) {
                    None => (VerbError::UnknownMr.code(), Vec::new()),
                    Some(region) => match check_region_bounds(
                        region.bytes.len() as u64,
                        frame.offset,
                        frame.length as u64,
                    ) {
                        Err(_) => (VerbError::OutOfBounds.code(), Vec::new()),
                        Ok(()) => {
                            let start = frame.offset as usize;
                            (0, region.bytes[start..start + frame.length as usize].to_vec())
                        }
                    },
                };
                let length = payload.len() as u32;
                Frame {
                    frame_type: FrameType::ReadResp,
                    wr_id: frame.wr_id,
                    mr_id: status,
                    offset: 0,
                    length,
                    payload,
                }
            }
            FrameType::Write => {
                let status = match self.mrs.get_mut(&frame.mr_id) {
                    None => VerbError::UnknownMr.code(),
                    Some(region) => match check_region_bounds(
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
                    },
                };
                Frame {
                    frame_type: FrameType::WriteAck,
                    wr_id: frame.wr_id,
                    mr_id: status,
                    offset: 0,
                    length: 0,
                    payload: Vec::new(),
                }
            }
            _ => unreachable!("serve only handles one-sided frames"),
        }
    }

    /// Match the queue-head receive with one send. Returns the RECV_READY
    /// reply for the sender.
    fn match_send(&mut self, qp_id: u64, wr_id: u64, payload: Vec<u8>) -> Frame {
        let qp = self.qps.get_mut(&qp_id).unwrap();
        let recv = qp.posted_recvs.pop_front().expect("caller checked");
        let (status, delivered);
        if payload.len() as u64 > recv.max_len as u64 {
            status = VerbError::RecvTooSmall.code();
            delivered = 0;
            self.complete(
                qp_id,
                recv.wr_id,
                Verb::Recv,
                CompletionStatus::Error(VerbError::RecvTooSmall),
                0,
            );
        } else {
            let region = self.mrs.get_mut(&recv.mr.0).expect("validated at post");
            let start = recv.offset as usize;
            region.bytes[start..start + payload.len()].copy_from_slice(&payload);
            status = 0;
            delivered = payload.len() as u32;
            self.complete(
                qp_id,
                recv.wr_id,
                Verb::Recv,
                CompletionStatus::Success,
                delivered,
            );
        }
        Frame {
            frame_type: FrameType::RecvReady,
            wr_id,
            mr_id: status,
            offset: 0,
            length: delivered,
            payload: Vec::new(),
        }
    }

    fn fail_qp(&mut self, qp_id: u64) {
        let Some(qp) = self.qps.get_mut(&qp_id) else {
            return;
        };
        if qp.phase == QpPhase::Closed {
            return;
        }
        qp.phase = QpPhase::Closed;
        qp.writer = None;
        let pending: Vec<(u64, Verb)> = qp
            .outstanding
            .iter()
            .map(|(&wr, op)| (wr, op.verb))
            .collect();
        qp.outstanding.clear();
        for (wr, verb) in pending {
            self.complete(
                qp_id,
                wr,
                verb,
                CompletionStatus::Error(VerbError::Disconnected),
                0,
            );
        }
        self.conn_events
            .push_back(ConnEvent::Disconnected { qp: QpId(qp_id) });
    }

    /// Expire parked sends past their rendezvous deadline. Returns the
    /// timeout replies to write back.
    fn sweep_parked(&mut self, qp_id: u64, now: Instant) -> Vec<Frame> {
        let Some(qp) = self.qps.get_mut(&qp_id) else {
            return Vec::new();
        };
        let mut replies = Vec::new();
        qp.parked_sends.retain(|p| {
            if p.deadline <= now {
                replies.push(Frame {
                    frame_type: FrameType::RecvReady,
                    wr_id: p.wr_id,
                    mr_id: VerbError::Timeout.code(),
                    offset: 0,
                    length: 0,
                    payload: Vec::new(),
                });
                false
            } else {
                true
            }
        });
        replies
    }
}

fn write_frame(writer: &Arc<Mutex<TcpStream>>, frame: &Frame) -> std::io::Result<()> {
    let bytes = frame.encode();
    let mut stream = writer.lock().unwrap();
    stream.write_all(&bytes)
}

fn read_frame(stream: &mut TcpStream) -> std::io::Result<Option<Frame>> {
    let mut header = [0u8; HEADER_LEN];
    match read_exact_interruptible(stream, &mut header) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::WouldBlock || e.kind() == ErrorKind::TimedOut => {
            return Ok(None)
        }
        Err(e) => return Err(e),
    }
    let mut frame = Frame::decode_header(&header)
        .map_err(|e| std::io::Error::new(ErrorKind::InvalidData, e.to_string()))?;
    if frame.frame_type.carries_payload() && frame.length > 0 {
        let mut payload = vec![0u8; frame.length as usize];
        read_all_blocking(stream, &mut payload)?;
        frame.payload = payload;
    }
    Ok(Some(frame))
}

/// Like `read_exact`, but a timeout before the first byte returns
/// `WouldBlock`; once a frame has started we keep reading through ticks.
fn read_exact_interruptible(stream: &mut TcpStream, buf: &mut [u8]) -> std::io::Result<()> {
    let mut filled = 0usize;
    while filled < buf.len() {
        match stream.read(&mut buf[filled..]) {
            Ok(0) => return Err(std::io::Error::new(ErrorKind::UnexpectedEof, "peer closed")),
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::WouldBlock || e.kind() == ErrorKind::TimedOut => {
                if filled == 0 {
                    return Err(e);
                }
                // mid-frame: keep waiting for the rest
            }
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn read_all_blocking(stream: &mut TcpStream, buf: &mut [u8]) -> std::io::Result<()> {
    let mut filled = 0usize;
    while filled < buf.len() {
        match stream.read(&mut buf[filled..]) {
            Ok(0) => return Err(std::io::Error::new(ErrorKind::UnexpectedEof, "peer closed")),
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::WouldBlock || e.kind() == ErrorKind::TimedOut => {}
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// TCP endpoint. The owning worker drives `poll_cq`/`poll_conn_events`
/// while background threads service inbound frames.
pub struct SocketEndpoint {
    core: Arc<Mutex<Core>>,
    addr: SocketAddr,
}

impl SocketEndpoint {
    /// Bind a listener (use port 0 for an ephemeral port) and start the
    /// accept loop.
    pub fn bind(addr: SocketAddr, identity: EndpointIdentity) -> Result<Self, TransportError> {
        let listener = TcpListener::bind(addr).map_err(|e| TransportError::Io(e.to_string()))?;
        let local = listener
            .local_addr()
            .map_err(|e| TransportError::Io(e.to_string()))?;
        listener
            .set_nonblocking(true)
            .map_err(|e| TransportError::Io(e.to_string()))?;
        let core = Arc::new(Mutex::new(Core {
            identity,
            mrs: BTreeMap::new(),
            next_mr: 1,
            qps: BTreeMap::new(),
            next_qp: 1,
            cq: VecDeque::new(),
            conn_events: VecDeque::new(),
            responder_callbacks: 0,
            send_timeout: Duration::from_millis(2_000),
            shutdown: false,
        }));

        let accept_core = Arc::clone(&core);
        thread::Builder::new()
            .name(format!("accept-{local}"))
            .spawn(move || accept_loop(listener, accept_core))
            .map_err(|e| TransportError::Io(e.to_string()))?;

        Ok(SocketEndpoint { core, addr: local })
    }

    pub fn set_send_timeout(&self, timeout: Duration) {
        self.core.lock().unwrap().send_timeout = timeout;
    }

    /// Stop the accept loop and reader threads, closing every queue pair.
    pub fn shutdown(&self) {
        let mut core = self.core.lock().unwrap();
        core.shutdown = true;
        let qp_ids: Vec<u64> = core.qps.keys().copied().collect();
        for qp in qp_ids {
            core.fail_qp(qp);
        }
    }

    fn post_common(
        &self,
        qp: QpId,
        wr_id: u64,
        len: u64,
    ) -> Result<Arc<Mutex<TcpStream>>, TransportError> {
        if len == 0 {
            return Err(TransportError::ZeroLength);
        }
        if len > MAX_FRAME_PAYLOAD as u64 {
            return Err(TransportError::PayloadTooLarge {
                len,
                cap: MAX_FRAME_PAYLOAD,
            });
        }
        let core = self.core.lock().unwrap();
        let q = core.qps.get(&qp.0).ok_or(TransportError::UnknownQp(qp))?;
        if q.phase != QpPhase::Ready {
            return Err(TransportError::QpNotReady(qp));
        }
        if q.outstanding.contains_key(&wr_id) {
            return Err(TransportError::DuplicateWrId(wr_id));
        }
        Ok(Arc::clone(q.writer.as_ref().expect("ready qp has writer")))
    }

    fn record_outstanding(&self, qp: QpId, wr_id: u64, op: PendingOp) {
        self.core
            .lock()
            .unwrap()
            .qps
            .get_mut(&qp.0)
            .expect("checked")
            .outstanding
            .insert(wr_id, op);
    }

    fn abort_outstanding(&self, qp: QpId, wr_id: u64) {
        if let Some(q) = self.core.lock().unwrap().qps.get_mut(&qp.0) {
            q.outstanding.remove(&wr_id);
        }
    }
}

fn accept_loop(listener: TcpListener, core: Arc<Mutex<Core>>) {
    loop {
        if core.lock().unwrap().shutdown {
            return;
        }
        match listener.accept() {
            Ok((stream, _peer)) => {
                let conn_core = Arc::clone(&core);
                let _ = thread::Builder::new()
                    .name("qp-reader".to_string())
                    .spawn(move || reader_loop(stream, conn_core, None));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(2));
            }
            Err(_) => return,
        }
    }
}

/// Service one connection. `initiated_qp` is set when this side called
/// `begin_connect` (the HELLO is already sent and a QP id reserved).
fn reader_loop(mut stream: TcpStream, core: Arc<Mutex<Core>>, initiated_qp: Option<u64>) {
    let _ = stream.set_read_timeout(Some(READ_TICK));
    let _ = stream.set_nodelay(true);
    let writer = Arc::new(Mutex::new(match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return,
    }));

    let mut qp_id: Option<u64> = initiated_qp;
    loop {
        if core.lock().unwrap().shutdown {
            return;
        }
        let frame = match read_frame(&mut stream) {
            Ok(Some(frame)) => frame,
            Ok(None) => {
                // idle tick: expire parked rendezvous sends
                if let Some(id) = qp_id {
                    let replies = core.lock().unwrap().sweep_parked(id, Instant::now());
                    for reply in replies {
                        let _ = write_frame(&writer, &reply);
                    }
                }
                continue;
            }
            Err(_) => {
                if let Some(id) = qp_id {
                    core.lock().unwrap().fail_qp(id);
                }
                return;
            }
        };

        match frame.frame_type {
            FrameType::Hello => {
                let mut c = core.lock().unwrap();
                let id = c.next_qp;
                c.next_qp += 1;
                let identity = frame.identity();
                c.qps.insert(
                    id,
                    QpState {
                        phase: QpPhase::Ready,
                        peer_identity: identity,
                        writer: Some(Arc::clone(&writer)),
                        outstanding: BTreeMap::new(),
                        posted_recvs: VecDeque::new(),
                        parked_sends: VecDeque::new(),
                    },
                );
                if let Some(peer) = identity {
                    c.conn_events
                        .push_back(ConnEvent::Accepted { qp: QpId(id), peer });
                }
                let ack = Frame::hello_ack(c.identity);
                drop(c);
                if write_frame(&writer, &ack).is_err() {
                    core.lock().unwrap().fail_qp(id);
                    return;
                }
                qp_id = Some(id);
            }
            FrameType::HelloAck => {
                let Some(id) = qp_id else { continue };
                let mut c = core.lock().unwrap();
                if let Some(qp) = c.qps.get_mut(&id) {
                    if qp.phase == QpPhase::Connecting {
                        qp.phase = QpPhase::Ready;
                        qp.peer_identity = frame.identity();
                        if let Some(peer) = frame.identity() {
                            c.conn_events
                                .push_back(ConnEvent::Connected { qp: QpId(id), peer });
                        }
                    }
                }
            }
            FrameType::ReadReq | FrameType::Write => {
                // one-sided service path: application not involved
                let reply = core.lock().unwrap().serve(&frame);
                if write_frame(&writer, &reply).is_err() {
                    if let Some(id) = qp_id {
                        core.lock().unwrap().fail_qp(id);
                    }
                    return;
                }
            }
            FrameType::ReadResp => {
                if let Some(id) = qp_id {
                    core.lock().unwrap().resolve(id, &frame, Verb::Read);
                }
            }
            FrameType::WriteAck => {
                if let Some(id) = qp_id {
                    core.lock().unwrap().resolve(id, &frame, Verb::Write);
                }
            }
            FrameType::RecvReady => {
                if let Some(id) = qp_id {
                    core.lock().unwrap().resolve(id, &frame, Verb::Send);
                }
            }
            FrameType::Send => {
                let Some(id) = qp_id else { continue };
                let mut c = core.lock().unwrap();
                let has_recv = c
                    .qps
                    .get(&id)
                    .map(|q| !q.posted_recvs.is_empty())
                    .unwrap_or(false);
                if has_recv {
                    let reply = c.match_send(id, frame.wr_id, frame.payload);
                    drop(c);
                    let _ = write_frame(&writer, &reply);
                } else {
                    let deadline = Instant::now() + c.send_timeout;
                    if let Some(qp) = c.qps.get_mut(&id) {
                        qp.parked_sends.push_back(ParkedSend {
                            wr_id: frame.wr_id,
                            payload: frame.payload,
                            deadline,
                        });
                    }
                }
            }
        }
    }
}

impl Endpoint for SocketEndpoint {
    fn addr(&self) -> EndpointAddr {
        EndpointAddr::Net(self.addr)
    }

    fn identity(&self) -> EndpointIdentity {
        self.core.lock().unwrap().identity
    }

    fn register_mr(&mut self, kind: MrKind, len: u64) -> Result<MrId, TransportError> {
        if len == 0 {
            return Err(TransportError::ZeroLength);
        }
        if len > (1 << 32) {
            return Err(TransportError::ResourceExhausted(len));
        }
        let mut core = self.core.lock().unwrap();
        let id = core.next_mr;
        core.next_mr += 1;
        core.mrs.insert(
            id,
            Region {
                kind,
                bytes: vec![0u8; len as usize],
            },
        );
        Ok(MrId(id))
    }

    fn mr_len(&self, mr: MrId) -> Result<u64, TransportError> {
        let core = self.core.lock().unwrap();
        core.mrs
            .get(&mr.0)
            .map(|r| r.bytes.len() as u64)
            .ok_or(TransportError::UnknownMr(mr.0))
    }

    fn mr_write(&mut self, mr: MrId, offset: u64, data: &[u8]) -> Result<(), TransportError> {
        let mut core = self.core.lock().unwrap();
        let region = core.mrs.get_mut(&mr.0).ok_or(TransportError::UnknownMr(mr.0))?;
        check_region_bounds(region.bytes.len() as u64, offset, data.len() as u64)?;
        let start = offset as usize;
        region.bytes[start..start + data.len()].copy_from_slice(data);
        Ok(())
    }

    fn mr_read(&self, mr: MrId, offset: u64, len: u64) -> Result<Vec<u8>, TransportError> {
        let core = self.core.lock().unwrap();
        let region = core.mrs.get(&mr.0).ok_or(TransportError::UnknownMr(mr.0))?;
        check_region_bounds(region.bytes.len() as u64, offset, len)?;
        let start = offset as usize;
        Ok(region.bytes[start..start + len as usize].to_vec())
    }

    fn begin_connect(&mut self, peer: &EndpointAddr) -> Result<QpId, TransportError> {
        let EndpointAddr::Net(peer_addr) = *peer else {
            return Err(TransportError::Io(format!(
                "socket endpoint cannot reach {peer}"
            )));
        };
        let (qp_id, identity) = {
            let mut core = self.core.lock().unwrap();
            let id = core.next_qp;
            core.next_qp += 1;
            core.qps.insert(
                id,
                QpState {
                    phase: QpPhase::Connecting,
                    peer_identity: None,
                    writer: None,
                    outstanding: BTreeMap::new(),
                    posted_recvs: VecDeque::new(),
                    parked_sends: VecDeque::new(),
                },
            );
            (id, core.identity)
        };
        let core = Arc::clone(&self.core);
        thread::Builder::new()
            .name(format!("connect-{peer_addr}"))
            .spawn(move || match TcpStream::connect_timeout(&peer_addr, CONNECT_TIMEOUT) {
                Ok(stream) => {
                    let writer = match stream.try_clone() {
                        Ok(s) => Arc::new(Mutex::new(s)),
                        Err(e) => {
                            let mut c = core.lock().unwrap();
                            c.qps.get_mut(&qp_id).unwrap().phase = QpPhase::Closed;
                            c.conn_events.push_back(ConnEvent::ConnectFailed {
                                qp: QpId(qp_id),
                                reason: e.to_string(),
                            });
                            return;
                        }
                    };
                    if write_frame(&writer, &Frame::hello(identity)).is_err() {
                        let mut c = core.lock().unwrap();
                        c.qps.get_mut(&qp_id).unwrap().phase = QpPhase::Closed;
                        c.conn_events.push_back(ConnEvent::ConnectFailed {
                            qp: QpId(qp_id),
                            reason: "hello write failed".into(),
                        });
                        return;
                    }
                    core.lock().unwrap().qps.get_mut(&qp_id).unwrap().writer =
                        Some(Arc::clone(&writer));
                    reader_loop(stream, core, Some(qp_id));
                }
                Err(e) => {
                    let mut c = core.lock().unwrap();
                    c.qps.get_mut(&qp_id).unwrap().phase = QpPhase::Closed;
                    c.conn_events.push_back(ConnEvent::ConnectFailed {
                        qp: QpId(qp_id),
                        reason: e.to_string(),
                    });
                }
            })
            .map_err(|e| TransportError::Io(e.to_string()))?;
        Ok(QpId(qp_id))
    }

    fn poll_conn_events(&mut self) -> Vec<ConnEvent> {
        self.core.lock().unwrap().conn_events.drain(..).collect()
    }

    fn qp_peer(&self, qp: QpId) -> Option<EndpointIdentity> {
        self.core
            .lock()
            .unwrap()
            .qps
            .get(&qp.0)
            .and_then(|q| q.peer_identity)
    }

    fn close_qp(&mut self, qp: QpId) {
        let mut core = self.core.lock().unwrap();
        if let Some(q) = core.qps.get_mut(&qp.0) {
            q.phase = QpPhase::Closed;
            q.writer = None;
        }
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
        {
            let core = self.core.lock().unwrap();
            let region = core
                .mrs
                .get(&local_mr.0)
                .ok_or(TransportError::UnknownMr(local_mr.0))?;
            check_region_bounds(region.bytes.len() as u64, local_offset, len as u64)?;
        }
        let writer = self.post_common(qp, wr_id, len as u64)?;
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
        let frame = Frame {
            frame_type: FrameType::ReadReq,
            wr_id,
            mr_id: remote_mr,
            offset: remote_offset,
            length: len,
            payload: Vec::new(),
        };
        if write_frame(&writer, &frame).is_err() {
            self.abort_outstanding(qp, wr_id);
            return Err(TransportError::Io("write failed".into()));
        }
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
        let writer = self.post_common(qp, wr_id, payload.len() as u64)?;
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
        let frame = Frame {
            frame_type: FrameType::Write,
            wr_id,
            mr_id: remote_mr,
            offset: remote_offset,
            length: payload.len() as u32,
            payload: payload.to_vec(),
        };
        if write_frame(&writer, &frame).is_err() {
            self.abort_outstanding(qp, wr_id);
            return Err(TransportError::Io("write failed".into()));
        }
        Ok(())
    }

    fn post_send(&mut self, qp: QpId, payload: &[u8], wr_id: u64) -> Result<(), TransportError> {
        let writer = self.post_common(qp, wr_id, payload.len() as u64)?;
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
        let frame = Frame {
            frame_type: FrameType::Send,
            wr_id,
            mr_id: 0,
            offset: 0,
            length: payload.len() as u32,
            payload: payload.to_vec(),
        };
        if write_frame(&writer, &frame).is_err() {
            self.abort_outstanding(qp, wr_id);
            return Err(TransportError::Io("write failed".into()));
        }
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
        let mut core = self.core.lock().unwrap();
        let region = core.mrs.get(&mr.0).ok_or(TransportError::UnknownMr(mr.0))?;
        check_region_bounds(region.bytes.len() as u64, offset, max_len as u64)?;
        let qp_state = core.qps.get_mut(&qp.0).ok_or(TransportError::UnknownQp(qp))?;
        qp_state.posted_recvs.push_back(PostedRecv {
            wr_id,
            mr,
            offset,
            max_len,
        });
        // match a parked send, if any
        if let Some(parked) = qp_state.parked_sends.pop_front() {
            let writer = qp_state.writer.as_ref().map(Arc::clone);
            let reply = core.match_send(qp.0, parked.wr_id, parked.payload);
            drop(core);
            if let Some(writer) = writer {
                let _ = write_frame(&writer, &reply);
            }
        }
        Ok(())
    }

    fn poll_cq(&mut self, max: usize) -> Vec<WorkCompletion> {
        let mut core = self.core.lock().unwrap();
        let n = max.min(core.cq.len());
        core.cq.drain(..n).collect()
    }

    fn responder_callbacks(&self) -> u64 {
        self.core.lock().unwrap().responder_callbacks
    }
}

impl Drop for SocketEndpoint {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::Role;

    fn wait_for<T>(mut f: impl FnMut() -> Option<T>, what: &str) -> T {
        let deadline = Instant::now() + Duration::from_secs(5);
        loop {
            if let Some(v) = f() {
                return v;
            }
            if Instant::now() > deadline {
                panic!("timed out waiting for {what}");
            }
            thread::sleep(Duration::from_millis(2));
        }
    }

    fn connected_pair() -> (SocketEndpoint, SocketEndpoint, QpId, QpId) {
        let any: SocketAddr = "127.0.0.1:0".parse().unwrap();
        let mut a = SocketEndpoint::bind(any, EndpointIdentity::new(Role::Decode, 1, 0)).unwrap();
        let mut b = SocketEndpoint::bind(any, EndpointIdentity::new(Role::Prefill, 2, 0)).unwrap();
        let qp_a = a.begin_connect(&b.addr()).unwrap();
        let got_a = wait_for(
            || {
                a.poll_conn_events()
                    .into_iter()
                    .find(|e| matches!(e, ConnEvent::Connected { .. }))
            },
            "connect",
        );
        let ConnEvent::Connected { qp, peer } = got_a else {
            unreachable!()
        };
        assert_eq!(qp, qp_a);
        assert_eq!(peer.worker_id, 2);
        let got_b = wait_for(
            || {
                b.poll_conn_events()
                    .into_iter()
                    .find(|e| matches!(e, ConnEvent::Accepted { .. }))
            },
            "accept",
        );
        let ConnEvent::Accepted { qp: qp_b, peer } = got_b else {
            unreachable!()
        };
        assert_eq!(peer.worker_id, 1);
        (a, b, qp_a, qp_b)
    }

    fn pattern(len: usize, salt: u8) -> Vec<u8> {
        (0..len)
            .map(|i| (i as u8).wrapping_mul(31).wrapping_add(salt))
            .collect()
    }

    #[test]
    fn read_write_over_tcp() {
        let (mut a, mut b, qp_a, _qp_b) = connected_pair();
        let mr_b = b.register_mr(MrKind::GpuPayload, 16384).unwrap();
        let data = pattern(8192, 3);
        b.mr_write(mr_b, 4096, &data).unwrap();
        let mr_a = a.register_mr(MrKind::GpuPayload, 8192).unwrap();

        a.post_read(qp_a, mr_b.0, 4096, mr_a, 0, 8192, 11).unwrap();
        let wc = wait_for(|| a.poll_cq(1).pop(), "read completion");
        assert!(wc.status.is_success());
        assert_eq!(wc.byte_count, 8192);
        assert_eq!(a.mr_read(mr_a, 0, 8192).unwrap(), data);
        assert_eq!(b.poll_cq(16).len(), 0, "read is one-sided");
        assert_eq!(b.responder_callbacks(), 0);

        let back = pattern(512, 9);
        a.post_write(qp_a, &back, mr_b.0, 0, 12).unwrap();
        let wc = wait_for(|| a.poll_cq(1).pop(), "write completion");
        assert!(wc.status.is_success());
        assert_eq!(b.mr_read(mr_b, 0, 512).unwrap(), back);

        // bounds error surfaces as an error completion
        a.post_read(qp_a, mr_b.0, 16383, mr_a, 0, 2, 13).unwrap();
        let wc = wait_for(|| a.poll_cq(1).pop(), "error completion");
        assert_eq!(wc.status, CompletionStatus::Error(VerbError::OutOfBounds));
    }

    #[test]
    fn send_recv_and_rendezvous_over_tcp() {
        let (mut a, mut b, qp_a, qp_b) = connected_pair();
        let mr_b = b.register_mr(MrKind::CpuControl, 4096).unwrap();
        let payload = pattern(100, 1);

        // send parks until the receive is posted
        a.post_send(qp_a, &payload, 31).unwrap();
        thread::sleep(Duration::from_millis(50));
        assert!(a.poll_cq(16).is_empty());
        b.post_recv(qp_b, mr_b, 64, 512, 41).unwrap();
        let wc_b = wait_for(|| b.poll_cq(1).pop(), "recv completion");
        assert_eq!(wc_b.byte_count, 100);
        assert_eq!(b.mr_read(mr_b, 64, 100).unwrap(), payload);
        let wc_a = wait_for(|| a.poll_cq(1).pop(), "send completion");
        assert!(wc_a.status.is_success());
    }

    #[test]
    fn send_rendezvous_timeout_over_tcp() {
        let (mut a, b, qp_a, _qp_b) = connected_pair();
        b.set_send_timeout(Duration::from_millis(50));
        a.post_send(qp_a, &[1, 2, 3], 61).unwrap();
        let wc = wait_for(|| a.poll_cq(1).pop(), "timeout completion");
        assert_eq!(wc.status, CompletionStatus::Error(VerbError::Timeout));
    }

    #[test]
    fn connect_to_closed_port_fails() {
        let any: SocketAddr = "127.0.0.1:0".parse().unwrap();
        let mut a = SocketEndpoint::bind(any, EndpointIdentity::new(Role::Tool, 9, 0)).unwrap();
        // bind-then-drop to find a port that is very likely closed
        let dead = {
            let tmp = TcpListener::bind(any).unwrap();
            tmp.local_addr().unwrap()
        };
        a.begin_connect(&EndpointAddr::Net(dead)).unwrap();
        let ev = wait_for(
            || {
                a.poll_conn_events()
                    .into_iter()
                    .find(|e| matches!(e, ConnEvent::ConnectFailed { .. }))
            },
            "connect failure",
        );
        assert!(matches!(ev, ConnEvent::ConnectFailed { .. }));
    }

    #[test]
    fn peer_shutdown_fails_operations() {
        let (mut a, mut b, qp_a, _qp_b) = connected_pair();
        let mr_b = b.register_mr(MrKind::GpuPayload, 4096).unwrap();
        let mr_a = a.register_mr(MrKind::GpuPayload, 4096).unwrap();
        a.post_read(qp_a, mr_b.0, 0, mr_a, 0, 64, 71).unwrap();
        let _ = wait_for(|| a.poll_cq(1).pop(), "first read");
        b.shutdown();
        // next op either fails at post (writer already gone) or by completion
        match a.post_read(qp_a, mr_b.0, 0, mr_a, 0, 64, 72) {
            Ok(()) => {
                let wc = wait_for(|| a.poll_cq(1).pop(), "disconnect completion");
                assert!(!wc.status.is_success());
            }
            Err(_) => {}
        }
    }
}
