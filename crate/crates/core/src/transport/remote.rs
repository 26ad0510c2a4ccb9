use std::collections::BTreeSet;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, warn};

use super::wire::{self, Frame};
use super::{output_width, ChannelStats, LayerTransport, TransportError, WallClock};
use crate::executor::ExecutorHandle;
use crate::model::{LayerAddress, ModelConfig};
use crate::protocol::{ClientId, Pass, Reply};
use crate::tensor::Tensor;

/// Client side of the byte-stream channel: every request and reply is a
/// [`wire`] frame on one TCP connection.
pub struct RemoteChannel {
    client_id: ClientId,
    config: ModelConfig,
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    scratch: Vec<u8>,
    next_request: u64,
    stats: ChannelStats,
    clock: WallClock,
}

impl RemoteChannel {
    pub fn connect(addr: impl ToSocketAddrs, client_id: ClientId, config: &ModelConfig) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut writer = stream.try_clone()?;
        wire::write_frame(&mut writer, &Frame::Register(client_id)).map_err(io::Error::other)?;
        Ok(Self {
            client_id,
            config: *config,
            reader: BufReader::new(stream),
            writer,
            scratch: Vec::new(),
            next_request: 0,
            stats: ChannelStats::default(),
            clock: WallClock::start(),
        })
    }
}

impl LayerTransport for RemoteChannel {
    fn client_id(&self) -> u32 {
        self.client_id
    }

    fn call(&mut self, layer: LayerAddress, pass: Pass, input: &Tensor) -> Result<Tensor, TransportError> {
        let request_id = self.next_request;
        self.next_request += 1;
        self.scratch.clear();
        wire::encode_request_rows(self.client_id, request_id, layer, pass, input, &mut self.scratch);
        self.stats.requests += 1;
        self.stats.payload_copies += 1;
        self.stats.bytes_sent += self.scratch.len() as u64;
        let lost = |_| TransportError::Disconnected { layer, pass };
        self.writer.write_all(&self.scratch).map_err(lost)?;

        let frame = match wire::read_frame(&mut self.reader) {
            Ok(Some(f)) => f,
            Ok(None) | Err(wire::WireError::Io(_)) | Err(wire::WireError::Truncated { .. }) => {
                return Err(TransportError::Disconnected { layer, pass })
            }
            Err(e) => return Err(e.into()),
        };
        let Frame::Reply(reply) = frame else {
            return Err(TransportError::Protocol("expected a reply frame".into()));
        };
        if reply.request_id != request_id || reply.layer != layer || reply.client_id != self.client_id {
            return Err(TransportError::Protocol(format!(
                "reply for {} #{} while waiting for {layer} #{request_id}",
                reply.layer, reply.request_id
            )));
        }
        let p = reply.result.map_err(|error| TransportError::Exec { layer, pass, error })?;
        let out_w = output_width(pass, self.config.dims(layer.role));
        let data = p.data.unwrap_or_default();
        self.stats.payload_copies += 1;
        self.stats.bytes_received += (wire::HEADER_LEN + data.len() * 4) as u64;
        if p.token_count != input.rows() || p.width != out_w || data.len() != p.token_count * out_w {
            return Err(TransportError::Protocol(format!(
                "{layer}: reply shape [{}, {}], expected [{}, {out_w}]",
                p.token_count,
                p.width,
                input.rows()
            )));
        }
        Ok(Tensor::new(vec![p.token_count, out_w], data).expect("reply shape checked"))
    }

    fn stats(&self) -> ChannelStats {
        self.stats
    }

    fn buffer_bytes(&self) -> u64 {
        self.scratch.capacity() as u64
    }

    fn clock(&self) -> Duration {
        self.clock.elapsed()
    }
}

impl Drop for RemoteChannel {
    fn drop(&mut self) {
        let _ = wire::write_frame(&mut self.writer, &Frame::Deregister(self.client_id));
        let _ = self.writer.shutdown(Shutdown::Both);
    }
}

/// Executor side of the byte-stream channel. Each connection gets a reader
/// thread that decodes frames into the executor queue and a writer thread
/// that frames replies back.
pub struct TcpServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
}

impl TcpServer {
    pub fn bind(addr: impl ToSocketAddrs, handle: ExecutorHandle) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let connections = Arc::new(Mutex::new(Vec::new()));
        let accept = {
            let stop = Arc::clone(&stop);
            let connections = Arc::clone(&connections);
            thread::Builder::new()
                .name("accept".into())
                .spawn(move || accept_loop(listener, handle, &stop, &connections))?
        };
        Ok(Self {
            addr,
            stop,
            accept: Some(accept),
            connections,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
        for s in self.connections.lock().unwrap_or_else(|e| e.into_inner()).drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for TcpServer {
    fn drop(&mut self) {
        self.stop_now();
    }
}

fn accept_loop(listener: TcpListener, handle: ExecutorHandle, stop: &AtomicBool, connections: &Mutex<Vec<TcpStream>>) {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                debug!("connection from {peer}");
                if let Err(e) = start_connection(stream, handle.clone(), connections) {
                    warn!("dropping connection from {peer}: {e}");
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(10));
            }
        }
    }
}

fn start_connection(stream: TcpStream, handle: ExecutorHandle, connections: &Mutex<Vec<TcpStream>>) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    connections
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .push(stream.try_clone()?);
    let (tx, rx) = mpsc::channel::<Reply>();
    let write_half = stream.try_clone()?;
    thread::Builder::new()
        .name("conn-writer".into())
        .spawn(move || write_replies(write_half, rx))?;
    thread::Builder::new().name("conn-reader".into()).spawn(move || {
        let mut ids = BTreeSet::new();
        let mut reader = BufReader::new(stream.try_clone().expect("clone stream"));
        loop {
            match wire::read_frame(&mut reader) {
                Ok(Some(Frame::Register(id))) => {
                    handle.register(id);
                    ids.insert(id);
                }
                Ok(Some(Frame::Deregister(id))) => {
                    handle.deregister(id);
                    ids.remove(&id);
                }
                Ok(Some(Frame::Request(e))) => handle.submit(e, tx.clone()),
                Ok(Some(Frame::Reply(_))) => {
                    warn!("client sent a reply frame; closing connection");
                    break;
                }
                Ok(None) => break,
                Err(e) => {
                    debug!("closing connection: {e}");
                    break;
                }
            }
        }
        // Whatever these clients still had queued fails; other clients are
        // unaffected.
        for id in ids {
            handle.deregister(id);
        }
        let _ = stream.shutdown(Shutdown::Both);
    })?;
    Ok(())
}

fn write_replies(stream: TcpStream, rx: Receiver<Reply>) {
    let mut w = BufWriter::new(stream);
    let mut buf = Vec::new();
    for reply in rx {
        buf.clear();
        if wire::encode_into(&Frame::Reply(reply), &mut buf).is_err() {
            continue;
        }
        if w.write_all(&buf).and_then(|_| w.flush()).is_err() {
            break;
        }
    }
}
