use std::sync::mpsc::{self, Receiver, Sender};
use std::time::Duration;

use super::{output_width, ChannelStats, LayerTransport, SharedBuffer, TransportError, WallClock};
use crate::executor::ExecutorHandle;
use crate::model::{LayerAddress, ModelConfig};
use crate::protocol::{ClientId, Pass, Payload, Reply, RequestEnvelope};
use crate::tensor::Tensor;

/// In-process channel. Request rows are written once into the client's
/// [`SharedBuffer`]; the executor reads them from there and writes its output
/// back in place, so only metadata travels through the queue.
pub struct LocalChannel {
    client_id: ClientId,
    config: ModelConfig,
    handle: ExecutorHandle,
    buffer: SharedBuffer,
    tx: Sender<Reply>,
    rx: Receiver<Reply>,
    next_request: u64,
    stats: ChannelStats,
    clock: WallClock,
}

impl LocalChannel {
    /// Registers `client_id` and preallocates `batch × seq × max width` floats.
    pub fn connect(handle: ExecutorHandle, client_id: ClientId, config: &ModelConfig, batch: usize, seq: usize) -> Self {
        handle.register(client_id);
        let (tx, rx) = mpsc::channel();
        Self {
            client_id,
            config: *config,
            buffer: SharedBuffer::new(client_id, batch * seq * config.max_width()),
            handle,
            tx,
            rx,
            next_request: 0,
            stats: ChannelStats::default(),
            clock: WallClock::start(),
        }
    }

    pub fn buffer(&self) -> &SharedBuffer {
        &self.buffer
    }
}

impl LayerTransport for LocalChannel {
    fn client_id(&self) -> u32 {
        self.client_id
    }

    fn call(&mut self, layer: LayerAddress, pass: Pass, input: &Tensor) -> Result<Tensor, TransportError> {
        let tokens = input.rows();
        let out_w = output_width(pass, self.config.dims(layer.role));
        if self.buffer.ensure(tokens * self.config.max_width()) {
            self.stats.buffer_resizes += 1;
        }
        self.buffer.write(input.data());
        let request_id = self.next_request;
        self.next_request += 1;
        self.stats.requests += 1;
        // The buffer write above happens-before the executor sees this
        // envelope: the queue hand-off synchronizes through a mutex.
        self.handle.submit(
            RequestEnvelope {
                client_id: self.client_id,
                request_id,
                layer,
                pass,
                token_count: tokens,
                width: input.cols(),
                payload: Payload::Shared(self.buffer.clone()),
            },
            self.tx.clone(),
        );
        let reply = self.rx.recv().map_err(|_| TransportError::Disconnected { layer, pass })?;
        if reply.request_id != request_id || reply.layer != layer {
            return Err(TransportError::Protocol(format!(
                "reply for {} #{} while waiting for {layer} #{request_id}",
                reply.layer, reply.request_id
            )));
        }
        let p = reply.result.map_err(|error| TransportError::Exec { layer, pass, error })?;
        if p.token_count != tokens || p.width != out_w {
            return Err(TransportError::Protocol(format!(
                "{layer}: reply shape [{}, {}], expected [{tokens}, {out_w}]",
                p.token_count, p.width
            )));
        }
        let data = match p.data {
            Some(v) => {
                self.stats.payload_copies += 1;
                v
            }
            None => self.buffer.read(tokens * out_w),
        };
        Ok(Tensor::new(vec![tokens, out_w], data).expect("reply shape checked"))
    }

    fn stats(&self) -> ChannelStats {
        self.stats
    }

    fn buffer_bytes(&self) -> u64 {
        self.buffer.nbytes()
    }

    fn clock(&self) -> Duration {
        self.clock.elapsed()
    }
}

impl Drop for LocalChannel {
    fn drop(&mut self) {
        self.handle.deregister(self.client_id);
    }
}
