//! Emulated one-sided RDMA over reliable ordered byte streams.
//!
//! The transport exposes verbs (read, write, send/receive), registered
//! memory regions, queue pairs, and completion queues. Read and write are
//! one-sided: the responding side's transport services them below the
//! application, which is never called back. Two interchangeable backends
//! implement the same [`Endpoint`] interface: a deterministic in-process
//! loopback with virtual time and seeded frame latency
//! ([`loopback::LoopbackFabric`]) and a TCP socket backend
//! ([`socket::SocketEndpoint`]).

pub mod frame;
pub mod loopback;
pub mod socket;

use std::fmt;
use std::net::SocketAddr;
use thiserror::Error;

/// Largest payload a single frame may carry. Posts above this are rejected;
/// the transfer engine splits coalesced runs at this boundary.
pub const MAX_FRAME_PAYLOAD: u32 = 1 << 20;

/// Registered memory region handle, unique per endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MrId(pub u32);

/// Queue pair handle, unique per endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QpId(pub u64);

/// What a region backs: KV-cache payload (the emulated GPU memory) or
/// control metadata (the emulated CPU-side staging memory).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrKind {
    GpuPayload,
    CpuControl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verb {
    Read,
    Write,
    Send,
    Recv,
}

/// Completion-time failure, mirrored on the wire as a status code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerbError {
    OutOfBounds,
    UnknownMr,
    RecvTooSmall,
    Timeout,
    Disconnected,
}

impl VerbError {
    pub fn code(self) -> u32 {
        match self {
            VerbError::OutOfBounds => 1,
            VerbError::UnknownMr => 2,
            VerbError::RecvTooSmall => 3,
            VerbError::Timeout => 4,
            VerbError::Disconnected => 5,
        }
    }

    pub fn from_code(code: u32) -> Option<VerbError> {
        Some(match code {
            1 => VerbError::OutOfBounds,
            2 => VerbError::UnknownMr,
            3 => VerbError::RecvTooSmall,
            4 => VerbError::Timeout,
            5 => VerbError::Disconnected,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompletionStatus {
    Success,
    Error(VerbError),
}

impl CompletionStatus {
    pub fn is_success(self) -> bool {
        matches!(self, CompletionStatus::Success)
    }
}

/// One drained completion-queue entry. `byte_count` equals the requested
/// length on success.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkCompletion {
    pub qp: QpId,
    pub wr_id: u64,
    pub verb: Verb,
    pub status: CompletionStatus,
    pub byte_count: u32,
}

/// Worker role carried in connection handshakes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Prefill,
    Decode,
    Scheduler,
    Tool,
}

impl Role {
    pub fn code(self) -> u32 {
        match self {
            Role::Prefill => 0,
            Role::Decode => 1,
            Role::Scheduler => 2,
            Role::Tool => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Role> {
        Some(match code {
            0 => Role::Prefill,
            1 => Role::Decode,
            2 => Role::Scheduler,
            3 => Role::Tool,
            _ => return None,
        })
    }
}

/// Identity exchanged in HELLO/HELLO_ACK: role, worker id, rail index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EndpointIdentity {
    pub role: Role,
    pub worker_id: u64,
    pub rail: u32,
}

impl EndpointIdentity {
    pub fn new(role: Role, worker_id: u64, rail: u32) -> Self {
        EndpointIdentity {
            role,
            worker_id,
            rail,
        }
    }
}

/// Address of an endpoint: a fabric-local id on the loopback, a socket
/// address on TCP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EndpointAddr {
    Sim(u64),
    Net(SocketAddr),
}

impl fmt::Display for EndpointAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EndpointAddr::Sim(id) => write!(f, "sim:{id}"),
            EndpointAddr::Net(addr) => write!(f, "net:{addr}"),
        }
    }
}

impl EndpointAddr {
    pub fn parse(s: &str) -> Option<EndpointAddr> {
        if let Some(id) = s.strip_prefix("sim:") {
            return id.parse().ok().map(EndpointAddr::Sim);
        }
        let raw = s.strip_prefix("net:").unwrap_or(s);
        raw.parse().ok().map(EndpointAddr::Net)
    }
}

/// Connection lifecycle notifications, separate from verb completions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConnEvent {
    /// An outbound `begin_connect` finished its handshake.
    Connected { qp: QpId, peer: EndpointIdentity },
    /// A peer connected to this endpoint.
    Accepted { qp: QpId, peer: EndpointIdentity },
    /// An outbound connection attempt failed.
    ConnectFailed { qp: QpId, reason: String },
    /// An established queue pair lost its peer.
    Disconnected { qp: QpId },
}

/// Errors detected synchronously at call time. Failures that can only be
/// discovered later surface as error [`WorkCompletion`]s instead.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("unknown memory region {0}")]
    UnknownMr(u32),
    #[error("region access out of bounds: offset {offset} + len {len} > region {region_len}")]
    OutOfBounds {
        offset: u64,
        len: u64,
        region_len: u64,
    },
    #[error("unknown queue pair {0:?}")]
    UnknownQp(QpId),
    #[error("queue pair {0:?} is not ready")]
    QpNotReady(QpId),
    #[error("zero-length verbs are rejected at post time")]
    ZeroLength,
    #[error("payload of {len} bytes exceeds the {cap} byte frame cap")]
    PayloadTooLarge { len: u64, cap: u32 },
    #[error("wr_id {0} is already outstanding on this queue pair")]
    DuplicateWrId(u64),
    #[error("region of {0} bytes cannot be allocated")]
    ResourceExhausted(u64),
    #[error("endpoint is shut down")]
    Shutdown,
    #[error("i/o: {0}")]
    Io(String),
}

/// Uniform interface over the loopback and socket backends.
///
/// One endpoint models one NIC: it owns its regions, queue pairs, and one
/// completion queue, and is driven by a single logical owner.
pub trait Endpoint {
    fn addr(&self) -> EndpointAddr;
    fn identity(&self) -> EndpointIdentity;

    fn register_mr(&mut self, kind: MrKind, len: u64) -> Result<MrId, TransportError>;
    fn mr_len(&self, mr: MrId) -> Result<u64, TransportError>;
    fn mr_write(&mut self, mr: MrId, offset: u64, data: &[u8]) -> Result<(), TransportError>;
    fn mr_read(&self, mr: MrId, offset: u64, len: u64) -> Result<Vec<u8>, TransportError>;

    /// Start a handshake towards `peer`. The returned queue pair becomes
    /// usable once a `ConnEvent::Connected` is observed.
    fn begin_connect(&mut self, peer: &EndpointAddr) -> Result<QpId, TransportError>;
    fn poll_conn_events(&mut self) -> Vec<ConnEvent>;
    fn qp_peer(&self, qp: QpId) -> Option<EndpointIdentity>;
    fn close_qp(&mut self, qp: QpId);

    /// One-sided read of `[remote_offset, remote_offset+len)` from the
    /// peer's region `remote_mr` into the local region.
    #[allow(clippy::too_many_arguments)]
    fn post_read(
        &mut self,
        qp: QpId,
        remote_mr: u32,
        remote_offset: u64,
        local_mr: MrId,
        local_offset: u64,
        len: u32,
        wr_id: u64,
    ) -> Result<(), TransportError>;

    /// One-sided write of `payload` into the peer's region.
    fn post_write(
        &mut self,
        qp: QpId,
        payload: &[u8],
        remote_mr: u32,
        remote_offset: u64,
        wr_id: u64,
    ) -> Result<(), TransportError>;

    /// Two-sided message send; completes only once matched with a posted
    /// receive on the peer (rendezvous, bounded by the backend's timeout).
    fn post_send(&mut self, qp: QpId, payload: &[u8], wr_id: u64) -> Result<(), TransportError>;

    /// Post a receive buffer inside a local region.
    fn post_recv(
        &mut self,
        qp: QpId,
        mr: MrId,
        offset: u64,
        max_len: u32,
        wr_id: u64,
    ) -> Result<(), TransportError>;

    /// Drain up to `max` completions, in completion order. Non-blocking.
    fn poll_cq(&mut self, max: usize) -> Vec<WorkCompletion>;

    /// Number of times serving a one-sided verb invoked anything
    /// application-visible on this endpoint. Stays zero by construction;
    /// exists so tests can assert one-sidedness.
    fn responder_callbacks(&self) -> u64;
}

pub(crate) fn check_region_bounds(
    region_len: u64,
    offset: u64,
    len: u64,
) -> Result<(), TransportError> {
    if offset.checked_add(len).is_none() || offset + len > region_len {
        return Err(TransportError::OutOfBounds {
            offset,
            len,
            region_len,
        });
    }
    Ok(())
}
