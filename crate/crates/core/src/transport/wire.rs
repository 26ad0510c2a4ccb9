//! Byte layout of every message on the remote channel.
//!
//! A frame is a fixed 30-byte header followed by `token_count × width`
//! little-endian `f32` values. All integers are little-endian.
//!
//! ```text
//! offset size field
//!  0     4    magic "SSWF"
//!  4     2    version (1)
//!  6     4    client_id
//! 10     8    request_id
//! 18     2    layer block
//! 20     1    layer role   (q=0 k=1 v=2 o=3 ff_up=4 ff_down=5 lm_head=6)
//! 21     1    kind
//! 22     4    token_count
//! 26     4    width
//! 30     ..   payload
//! ```
//!
//! `kind` values:
//!
//! | kind          | meaning                                                  |
//! |---------------|----------------------------------------------------------|
//! | `0x00`–`0x02` | request; low bits are the pass (forward, backward, noise effect) |
//! | `0x80`–`0x82` | successful reply for that pass, payload = output rows    |
//! | `0xC0`–`0xC2` | failed reply for that pass; `width` holds the error code, no payload |
//! | `0x10`        | register `client_id`                                     |
//! | `0x11`        | deregister `client_id`                                   |
//!
//! Register and deregister frames carry zeros in every other field. A frame
//! with the wrong magic or version is not resynchronized: the receiver drops
//! the connection.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::model::{LayerAddress, Role};
use crate::protocol::{ClientId, ExecError, Pass, Payload, Reply, ReplyPayload, RequestEnvelope};

pub const MAGIC: [u8; 4] = *b"SSWF";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 30;
/// Upper bound on floats per frame; protects receivers from absurd headers.
pub const MAX_PAYLOAD_FLOATS: usize = 1 << 28;

const KIND_REPLY_OK: u8 = 0x80;
const KIND_REPLY_ERR: u8 = 0xC0;
const KIND_REGISTER: u8 = 0x10;
const KIND_DEREGISTER: u8 = 0x11;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u16),
    #[error("unknown frame kind {0:#04x}")]
    UnknownKind(u8),
    #[error("unknown layer role code {0}")]
    UnknownRole(u8),
    #[error("payload of {0} floats exceeds frame limit")]
    TooLarge(usize),
    #[error("{0} trailing bytes after frame")]
    Trailing(usize),
    #[error("reply payload lives in a shared buffer and cannot be framed")]
    SharedReply,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Request(RequestEnvelope),
    Reply(Reply),
    Register(ClientId),
    Deregister(ClientId),
}

struct Header {
    client_id: u32,
    request_id: u64,
    block: u16,
    role: u8,
    kind: u8,
    token_count: u32,
    width: u32,
}

fn put_header(out: &mut Vec<u8>, h: &Header) {
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&h.client_id.to_le_bytes());
    out.extend_from_slice(&h.request_id.to_le_bytes());
    out.extend_from_slice(&h.block.to_le_bytes());
    out.push(h.role);
    out.push(h.kind);
    out.extend_from_slice(&h.token_count.to_le_bytes());
    out.extend_from_slice(&h.width.to_le_bytes());
}

fn put_floats(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Appends the encoding of `frame` to `out`.
pub fn encode_into(frame: &Frame, out: &mut Vec<u8>) -> Result<(), WireError> {
    match frame {
        Frame::Request(e) => {
            put_header(
                out,
                &Header {
                    client_id: e.client_id,
                    request_id: e.request_id,
                    block: e.layer.block,
                    role: e.layer.role.code(),
                    kind: e.pass.code(),
                    token_count: e.token_count as u32,
                    width: e.width as u32,
                },
            );
            let len = e.payload_len();
            match &e.payload {
                Payload::Inline(v) => put_floats(out, &v[..len.min(v.len())]),
                Payload::Shared(b) => b.with_slice(|s| put_floats(out, &s[..len])),
            }
        }
        Frame::Reply(r) => {
            let mut h = Header {
                client_id: r.client_id,
                request_id: r.request_id,
                block: r.layer.block,
                role: r.layer.role.code(),
                kind: 0,
                token_count: 0,
                width: 0,
            };
            match &r.result {
                Ok(p) => {
                    let data = p.data.as_ref().ok_or(WireError::SharedReply)?;
                    h.kind = KIND_REPLY_OK | r.pass.code();
                    h.token_count = p.token_count as u32;
                    h.width = p.width as u32;
                    put_header(out, &h);
                    put_floats(out, data);
                }
                Err(e) => {
                    h.kind = KIND_REPLY_ERR | r.pass.code();
                    h.width = e.code();
                    put_header(out, &h);
                }
            }
        }
        Frame::Register(id) | Frame::Deregister(id) => put_header(
            out,
            &Header {
                client_id: *id,
                request_id: 0,
                block: 0,
                role: 0,
                kind: if matches!(frame, Frame::Register(_)) {
                    KIND_REGISTER
                } else {
                    KIND_DEREGISTER
                },
                token_count: 0,
                width: 0,
            },
        ),
    }
    Ok(())
}

pub fn encode(frame: &Frame) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::new();
    encode_into(frame, &mut out)?;
    Ok(out)
}

/// Encodes a request straight from the caller's rows, without building an
/// envelope (and so without an intermediate payload copy).
pub fn encode_request_rows(
    client_id: ClientId,
    request_id: u64,
    layer: LayerAddress,
    pass: Pass,
    rows: &crate::tensor::Tensor,
    out: &mut Vec<u8>,
) {
    put_header(
        out,
        &Header {
            client_id,
            request_id,
            block: layer.block,
            role: layer.role.code(),
            kind: pass.code(),
            token_count: rows.rows() as u32,
            width: rows.cols() as u32,
        },
    );
    put_floats(out, rows.data());
}

pub fn encode_envelope(envelope: &RequestEnvelope) -> Vec<u8> {
    encode(&Frame::Request(envelope.clone())).expect("requests always encode")
}

fn parse_header(b: &[u8; HEADER_LEN]) -> Result<Header, WireError> {
    let magic = [b[0], b[1], b[2], b[3]];
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([b[4], b[5]]);
    if version != VERSION {
        return Err(WireError::BadVersion(version));
    }
    let u32_at = |i: usize| u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]]);
    let mut rid = [0u8; 8];
    rid.copy_from_slice(&b[10..18]);
    Ok(Header {
        client_id: u32_at(6),
        request_id: u64::from_le_bytes(rid),
        block: u16::from_le_bytes([b[18], b[19]]),
        role: b[20],
        kind: b[21],
        token_count: u32_at(22),
        width: u32_at(26),
    })
}

/// Number of payload floats a header announces.
fn payload_floats(h: &Header) -> Result<usize, WireError> {
    let carries_payload = h.kind <= 0x02 || (KIND_REPLY_OK..=KIND_REPLY_OK | 0x02).contains(&h.kind);
    if !carries_payload {
        return Ok(0);
    }
    let n = (h.token_count as usize)
        .checked_mul(h.width as usize)
        .ok_or(WireError::TooLarge(usize::MAX))?;
    if n > MAX_PAYLOAD_FLOATS {
        return Err(WireError::TooLarge(n));
    }
    Ok(n)
}

fn layer(h: &Header) -> Result<LayerAddress, WireError> {
    let role = Role::from_code(h.role).ok_or(WireError::UnknownRole(h.role))?;
    Ok(LayerAddress::new(h.block, role))
}

fn pass(code: u8, kind: u8) -> Result<Pass, WireError> {
    Pass::from_code(code).ok_or(WireError::UnknownKind(kind))
}

fn build(h: Header, payload: Vec<f32>) -> Result<Frame, WireError> {
    Ok(match h.kind {
        KIND_REGISTER => Frame::Register(h.client_id),
        KIND_DEREGISTER => Frame::Deregister(h.client_id),
        k if k <= 0x02 => Frame::Request(RequestEnvelope {
            client_id: h.client_id,
            request_id: h.request_id,
            layer: layer(&h)?,
            pass: pass(k, k)?,
            token_count: h.token_count as usize,
            width: h.width as usize,
            payload: Payload::Inline(payload),
        }),
        k if k & 0xC0 == KIND_REPLY_OK || k & 0xC0 == KIND_REPLY_ERR => {
            let result = if k & 0xC0 == KIND_REPLY_OK {
                Ok(ReplyPayload {
                    token_count: h.token_count as usize,
                    width: h.width as usize,
                    data: Some(payload),
                })
            } else {
                Err(ExecError::from_code(h.width))
            };
            Frame::Reply(Reply {
                client_id: h.client_id,
                request_id: h.request_id,
                layer: layer(&h)?,
                pass: pass(k & 0x3F, k)?,
                result,
            })
        }
        k => return Err(WireError::UnknownKind(k)),
    })
}

fn floats_from(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Decodes one frame from the front of `bytes`, returning it with the number
/// of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Frame, usize), WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let mut hb = [0u8; HEADER_LEN];
    hb.copy_from_slice(&bytes[..HEADER_LEN]);
    let h = parse_header(&hb)?;
    let n = payload_floats(&h)?;
    let total = HEADER_LEN + 4 * n;
    if bytes.len() < total {
        return Err(WireError::Truncated {
            needed: total,
            available: bytes.len(),
        });
    }
    let payload = floats_from(&bytes[HEADER_LEN..total]);
    Ok((build(h, payload)?, total))
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<Frame, WireError> {
    let (frame, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(WireError::Trailing(bytes.len() - used));
    }
    Ok(frame)
}

pub fn decode_envelope(bytes: &[u8]) -> Result<RequestEnvelope, WireError> {
    match decode(bytes)? {
        Frame::Request(e) => Ok(e),
        _ => Err(WireError::UnknownKind(bytes[21])),
    }
}

/// Reads one frame from a stream. Returns `Ok(None)` on a clean end of
/// stream at a frame boundary.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>, WireError> {
    let mut hb = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut hb[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(WireError::Truncated {
                    needed: HEADER_LEN,
                    available: got,
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let h = parse_header(&hb)?;
    let n = payload_floats(&h)?;
    let mut body = vec![0u8; 4 * n];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::Truncated {
            needed: HEADER_LEN + 4 * n,
            available: HEADER_LEN,
        },
        _ => e.into(),
    })?;
    Ok(Some(build(h, floats_from(&body))?))
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<usize, WireError> {
    let bytes = encode(frame)?;
    w.write_all(&bytes)?;
    Ok(bytes.len())
}
