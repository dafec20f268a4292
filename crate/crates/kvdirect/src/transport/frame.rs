//! Wire framing for the emulated verbs.
//!
//! Every frame starts with a fixed 25-byte little-endian header:
//! `u8 frame_type; u64 wr_id; u32 mr_id; u64 offset; u32 length`,
//! followed by `length` payload bytes for READ_RESP, WRITE, and SEND.
//!
//! Response frames (READ_RESP, WRITE_ACK, RECV_READY) reuse the `mr_id`
//! field as a status code (0 = success). HELLO and HELLO_ACK carry the
//! endpoint identity in header fields: `wr_id` = worker id, `mr_id` = role,
//! `offset` = rail index.

use super::{EndpointIdentity, Role, MAX_FRAME_PAYLOAD};
use thiserror::Error;

pub const HEADER_LEN: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameType {
    ReadReq = 0,
    ReadResp = 1,
    Write = 2,
    WriteAck = 3,
    Send = 4,
    RecvReady = 5,
    Hello = 6,
    HelloAck = 7,
}

impl FrameType {
    pub fn from_byte(b: u8) -> Option<FrameType> {
        Some(match b {
            0 => FrameType::ReadReq,
            1 => FrameType::ReadResp,
            2 => FrameType::Write,
            3 => FrameType::WriteAck,
            4 => FrameType::Send,
            5 => FrameType::RecvReady,
            6 => FrameType::Hello,
            7 => FrameType::HelloAck,
            _ => return None,
        })
    }

    /// Frame types whose `length` field is followed by payload bytes.
    pub fn carries_payload(self) -> bool {
        matches!(self, FrameType::ReadResp | FrameType::Write | FrameType::Send)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame truncated: needed {needed} bytes, had {had}")]
    Truncated { needed: usize, had: usize },
    #[error("unknown frame type {0}")]
    UnknownType(u8),
    #[error("frame length {0} exceeds the payload cap")]
    TooLarge(u32),
    #[error("frame has {0} trailing bytes")]
    TrailingBytes(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub frame_type: FrameType,
    pub wr_id: u64,
    pub mr_id: u32,
    pub offset: u64,
    pub length: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn hello(identity: EndpointIdentity) -> Frame {
        Frame {
            frame_type: FrameType::Hello,
            wr_id: identity.worker_id,
            mr_id: identity.role.code(),
            offset: identity.rail as u64,
            length: 0,
            payload: Vec::new(),
        }
    }

    pub fn hello_ack(identity: EndpointIdentity) -> Frame {
        Frame {
            frame_type: FrameType::HelloAck,
            ..Frame::hello(identity)
        }
    }

    pub fn identity(&self) -> Option<EndpointIdentity> {
        Some(EndpointIdentity {
            role: Role::from_code(self.mr_id)?,
            worker_id: self.wr_id,
            rail: u32::try_from(self.offset).ok()?,
        })
    }

    /// Total encoded size in bytes.
    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.push(self.frame_type as u8);
        out.extend_from_slice(&self.wr_id.to_le_bytes());
        out.extend_from_slice(&self.mr_id.to_le_bytes());
        out.extend_from_slice(&self.offset.to_le_bytes());
        out.extend_from_slice(&self.length.to_le_bytes());
        if self.frame_type.carries_payload() {
            debug_assert_eq!(self.payload.len(), self.length as usize);
            out.extend_from_slice(&self.payload);
        }
        out
    }

    pub fn decode_header(bytes: &[u8; HEADER_LEN]) -> Result<Frame, FrameError> {
        let frame_type =
            FrameType::from_byte(bytes[0]).ok_or(FrameError::UnknownType(bytes[0]))?;
        let wr_id = u64::from_le_bytes(bytes[1..9].try_into().unwrap());
        let mr_id = u32::from_le_bytes(bytes[9..13].try_into().unwrap());
        let offset = u64::from_le_bytes(bytes[13..21].try_into().unwrap());
        let length = u32::from_le_bytes(bytes[21..25].try_into().unwrap());
        if length > MAX_FRAME_PAYLOAD {
            return Err(FrameError::TooLarge(length));
        }
        Ok(Frame {
            frame_type,
            wr_id,
            mr_id,
            offset,
            length,
            payload: Vec::new(),
        })
    }

    /// Decode one frame from a complete buffer.
    pub fn decode(bytes: &[u8]) -> Result<Frame, FrameError> {
        if bytes.len() < HEADER_LEN {
            return Err(FrameError::Truncated {
                needed: HEADER_LEN,
                had: bytes.len(),
            });
        }
        let mut frame = Frame::decode_header(bytes[..HEADER_LEN].try_into().unwrap())?;
        let want = if frame.frame_type.carries_payload() {
            frame.length as usize
        } else {
            0
        };
        if bytes.len() < HEADER_LEN + want {
            return Err(FrameError::Truncated {
                needed: HEADER_LEN + want,
                had: bytes.len(),
            });
        }
        if bytes.len() > HEADER_LEN + want {
            return Err(FrameError::TrailingBytes(bytes.len() - HEADER_LEN - want));
        }
        frame.payload = bytes[HEADER_LEN..HEADER_LEN + want].to_vec();
        Ok(frame)
    }
}
