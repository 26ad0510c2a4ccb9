//! Messages exchanged between clients and the base executor.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::LayerAddress;
use crate::tensor::Tensor;
use crate::transport::SharedBuffer;

pub type ClientId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Forward,
    Backward,
    /// Forward with the bias forced to zero, used to precompute noise effects.
    NoiseEffect,
}

impl Pass {
    pub fn code(self) -> u8 {
        match self {
            Pass::Forward => 0,
            Pass::Backward => 1,
            Pass::NoiseEffect => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Pass> {
        match code {
            0 => Some(Pass::Forward),
            1 => Some(Pass::Backward),
            2 => Some(Pass::NoiseEffect),
            _ => None,
        }
    }
}

impl fmt::Display for Pass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pass::Forward => "forward",
            Pass::Backward => "backward",
            Pass::NoiseEffect => "noise_effect",
        })
    }
}

/// Activation rows carried by a request.
#[derive(Clone)]
pub enum Payload {
    Inline(Vec<f32>),
    /// Rows already written into the client's shared buffer.
    Shared(SharedBuffer),
}

impl fmt::Debug for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payload::Inline(v) => write!(f, "Inline({} floats)", v.len()),
            Payload::Shared(b) => write!(f, "Shared(client {}, capacity {})", b.owner(), b.capacity()),
        }
    }
}

impl Payload {
    /// Appends the first `len` floats of the payload to `out`.
    pub fn append_to(&self, len: usize, out: &mut Vec<f32>) -> Result<(), ExecError> {
        match self {
            Payload::Inline(v) => {
                if v.len() != len {
                    return Err(ExecError::PayloadLength { expected: len, got: v.len() });
                }
                out.extend_from_slice(v);
            }
            Payload::Shared(buf) => buf.with_slice(|s| {
                if s.len() < len {
                    return Err(ExecError::PayloadLength { expected: len, got: s.len() });
                }
                out.extend_from_slice(&s[..len]);
                Ok(())
            })?,
        }
        Ok(())
    }
}

/// One client → executor request for one layer.
#[derive(Debug, Clone)]
pub struct RequestEnvelope {
    pub client_id: ClientId,
    pub request_id: u64,
    pub layer: LayerAddress,
    pub pass: Pass,
    pub token_count: usize,
    /// Row width: `d_in` for forward and noise-effect passes, `d_out` for backward.
    pub width: usize,
    pub payload: Payload,
}

impl PartialEq for RequestEnvelope {
    /// Payloads compare bit-for-bit; shared payloads compare by buffer identity.
    fn eq(&self, other: &Self) -> bool {
        let payload_eq = match (&self.payload, &other.payload) {
            (Payload::Inline(a), Payload::Inline(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Payload::Shared(a), Payload::Shared(b)) => a.same_buffer(b),
            _ => false,
        };
        self.client_id == other.client_id
            && self.request_id == other.request_id
            && self.layer == other.layer
            && self.pass == other.pass
            && self.token_count == other.token_count
            && self.width == other.width
            && payload_eq
    }
}

impl RequestEnvelope {
    pub fn inline(
        client_id: ClientId,
        request_id: u64,
        layer: LayerAddress,
        pass: Pass,
        input: &Tensor,
    ) -> Self {
        Self {
            client_id,
            request_id,
            layer,
            pass,
            token_count: input.rows(),
            width: input.cols(),
            payload: Payload::Inline(input.data().to_vec()),
        }
    }

    pub fn payload_len(&self) -> usize {
        self.token_count * self.width
    }
}

/// Per-request failures. Each has a stable numeric code for the wire.
#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecError {
    #[error("row width {got} does not match expected {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("payload holds {got} floats, expected {expected}")]
    PayloadLength { expected: usize, got: usize },
    #[error("layer not hosted by this executor")]
    UnknownLayer,
    #[error("executor shutting down")]
    Shutdown,
    #[error("client deregistered with requests in flight")]
    Cancelled,
    #[error("executor error code {0}")]
    Other(u32),
}

impl ExecError {
    pub fn code(&self) -> u32 {
        match self {
            ExecError::WidthMismatch { .. } => 1,
            ExecError::PayloadLength { .. } => 2,
            ExecError::UnknownLayer => 3,
            ExecError::Shutdown => 4,
            ExecError::Cancelled => 5,
            ExecError::Other(c) => *c,
        }
    }

    /// Inverse of [`ExecError::code`]; details that the code does not carry
    /// are reported as zero.
    pub fn from_code(code: u32) -> ExecError {
        match code {
            1 => ExecError::WidthMismatch { expected: 0, got: 0 },
            2 => ExecError::PayloadLength { expected: 0, got: 0 },
            3 => ExecError::UnknownLayer,
            4 => ExecError::Shutdown,
            5 => ExecError::Cancelled,
            c => ExecError::Other(c),
        }
    }
}

/// Output rows; `data` is `None` when they were written into the client's
/// shared buffer instead.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplyPayload {
    pub token_count: usize,
    pub width: usize,
    pub data: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub client_id: ClientId,
    pub request_id: u64,
    pub layer: LayerAddress,
    pub pass: Pass,
    pub result: Result<ReplyPayload, ExecError>,
}
