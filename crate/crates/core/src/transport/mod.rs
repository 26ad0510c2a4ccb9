//! Client ↔ executor channels.
//!
//! Both channels expose the same [`LayerTransport`] contract to a client: one
//! blocking call per layer request, replies in request order. The local
//! channel hands the executor a shared buffer and never serializes the
//! payload; the remote channel frames everything over a byte stream using
//! the codec in [`wire`].

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::LayerAddress;
use crate::protocol::{ExecError, Pass};
use crate::tensor::Tensor;

mod local;
mod remote;
mod shared_buffer;
pub mod wire;

pub use local::LocalChannel;
pub use remote::{RemoteChannel, TcpServer};
pub use shared_buffer::SharedBuffer;
pub use wire::WireError;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("{layer} {pass}: executor rejected request: {error}")]
    Exec {
        layer: LayerAddress,
        pass: Pass,
        error: ExecError,
    },
    #[error("{layer} {pass}: connection to executor lost")]
    Disconnected { layer: LayerAddress, pass: Pass },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Counters a channel keeps about its own traffic.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub requests: u64,
    /// Payload bytes pushed through a byte stream (0 for the local channel).
    pub bytes_sent: u64,
    pub bytes_received: u64,
    /// Times the channel duplicated a payload into an intermediate buffer
    /// (serialization, decoding, inline vectors). Writing the client's own
    /// rows into its shared buffer is not counted.
    pub payload_copies: u64,
    pub buffer_resizes: u64,
}

/// A client's view of the executor: one blocking request per layer call.
pub trait LayerTransport: Send {
    fn client_id(&self) -> u32;

    /// Sends `input` rows for `layer` and waits for the executor's rows.
    fn call(&mut self, layer: LayerAddress, pass: Pass, input: &Tensor) -> Result<Tensor, TransportError>;

    fn stats(&self) -> ChannelStats;

    /// Bytes of exchange buffer the channel holds on the client side.
    fn buffer_bytes(&self) -> u64;

    /// Time since the channel was opened. Simulated channels report virtual
    /// time so that client metrics stay consistent with the simulation.
    fn clock(&self) -> Duration;
}

/// Wall-clock origin shared by the real channels.
#[derive(Debug, Clone, Copy)]
pub(crate) struct WallClock(Instant);

impl WallClock {
    pub(crate) fn start() -> Self {
        WallClock(Instant::now())
    }

    pub(crate) fn elapsed(&self) -> Duration {
        self.0.elapsed()
    }
}

/// Row width of the executor's reply for a layer with `(d_in, d_out)`.
pub(crate) fn output_width(pass: Pass, dims: (usize, usize)) -> usize {
    match pass {
        Pass::Forward | Pass::NoiseEffect => dims.1,
        Pass::Backward => dims.0,
    }
}
