//! Threaded executor: a single scheduler loop on a wall clock.

use std::sync::mpsc::Sender;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::debug;

use super::{BaseExecutor, BatchPolicy, BatchRecord, ExecutorMetrics, Pending, Poll, Scheduler};
use crate::ledger::LedgerSnapshot;
use crate::protocol::{ClientId, ExecError, Reply, RequestEnvelope};

/// Where the executor sends a request's reply.
pub type ReplySink = Sender<Reply>;

struct QueueState {
    scheduler: Scheduler<ReplySink>,
    shutdown: bool,
}

struct Shared {
    queue: Mutex<QueueState>,
    wake: Condvar,
    executor: Mutex<BaseExecutor>,
    metrics: Mutex<ExecutorMetrics>,
    epoch: Instant,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn fail(p: Pending<ReplySink>, error: ExecError) {
    let e = &p.envelope;
    let _ = p.sink.send(Reply {
        client_id: e.client_id,
        request_id: e.request_id,
        layer: e.layer,
        pass: e.pass,
        result: Err(error),
    });
}

/// Cheap, cloneable access to a running executor.
#[derive(Clone)]
pub struct ExecutorHandle {
    shared: Arc<Shared>,
}

impl ExecutorHandle {
    pub fn register(&self, client: ClientId) -> bool {
        let added = lock(&self.shared.queue).scheduler.register(client);
        self.shared.wake.notify_all();
        added
    }

    /// Removes the client; anything it still had queued fails with
    /// [`ExecError::Cancelled`].
    pub fn deregister(&self, client: ClientId) {
        let dropped = lock(&self.shared.queue).scheduler.deregister(client);
        self.shared.wake.notify_all();
        for p in dropped {
            fail(p, ExecError::Cancelled);
        }
    }

    pub fn submit(&self, envelope: RequestEnvelope, sink: ReplySink) {
        let mut q = lock(&self.shared.queue);
        if q.shutdown {
            drop(q);
            let now = self.shared.epoch.elapsed();
            let p = Pending::new(envelope, now, sink);
            fail(p, ExecError::Shutdown);
            return;
        }
        let now = self.shared.epoch.elapsed();
        q.scheduler.enqueue(envelope, sink, now);
        drop(q);
        self.shared.wake.notify_all();
    }

    pub fn metrics(&self) -> ExecutorMetrics {
        lock(&self.shared.metrics).clone()
    }

    pub fn ledger(&self) -> LedgerSnapshot {
        lock(&self.shared.executor).ledger().snapshot()
    }

    /// `(d_in, d_out)` of a hosted layer.
    pub fn layer_dims(&self, layer: crate::model::LayerAddress) -> Option<(usize, usize)> {
        lock(&self.shared.executor)
            .layers()
            .get(layer)
            .map(|p| (p.d_in(), p.d_out()))
    }

    /// Checksum of the weights the executor is serving right now.
    pub fn base_checksum(&self) -> u64 {
        lock(&self.shared.executor).layers().checksum()
    }
}

/// Owns the scheduler thread; dropping it shuts the executor down and fails
/// anything still queued with [`ExecError::Shutdown`].
pub struct ExecutorService {
    handle: ExecutorHandle,
    worker: Option<JoinHandle<()>>,
}

impl ExecutorService {
    pub fn start(executor: BaseExecutor, policy: BatchPolicy) -> Self {
        let shared = Arc::new(Shared {
            queue: Mutex::new(QueueState {
                scheduler: Scheduler::new(policy),
                shutdown: false,
            }),
            wake: Condvar::new(),
            executor: Mutex::new(executor),
            metrics: Mutex::new(ExecutorMetrics::default()),
            epoch: Instant::now(),
        });
        let worker_shared = Arc::clone(&shared);
        let worker = thread::Builder::new()
            .name("executor".into())
            .spawn(move || run(&worker_shared))
            .expect("spawn executor thread");
        Self {
            handle: ExecutorHandle { shared },
            worker: Some(worker),
        }
    }

    pub fn handle(&self) -> ExecutorHandle {
        self.handle.clone()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        lock(&self.handle.shared.queue).shutdown = true;
        self.handle.shared.wake.notify_all();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

impl Drop for ExecutorService {
    fn drop(&mut self) {
        self.stop();
    }
}

fn run(shared: &Shared) {
    loop {
        let mut q = lock(&shared.queue);
        let batch = loop {
            if q.shutdown {
                let left = q.scheduler.drain_all();
                drop(q);
                for p in left {
                    fail(p, ExecError::Shutdown);
                }
                return;
            }
            let now = shared.epoch.elapsed();
            match q.scheduler.poll(now) {
                Poll::Dispatch(b) => break b,
                Poll::WaitUntil(t) => {
                    let wait = t.saturating_sub(now).max(Duration::from_micros(1));
                    q = shared.wake.wait_timeout(q, wait).unwrap_or_else(|e| e.into_inner()).0;
                }
                Poll::Idle => q = shared.wake.wait(q).unwrap_or_else(|e| e.into_inner()),
            }
        };
        drop(q);

        let envelopes: Vec<&RequestEnvelope> = batch.members.iter().map(|m| &m.envelope).collect();
        let replies = lock(&shared.executor).execute(batch.layer, batch.pass, &envelopes);
        let rejected = replies.iter().filter(|r| r.result.is_err()).count();
        let waits: Vec<Duration> = batch.members.iter().map(|m| batch.dispatched_at - m.arrival).collect();
        let record = BatchRecord {
            layer: batch.layer,
            pass: batch.pass,
            requests: batch.members.len(),
            tokens: batch.tokens(),
            dispatched_at: batch.dispatched_at,
            max_wait: waits.iter().copied().max().unwrap_or_default(),
        };
        debug!("dispatch {} {} x{} ({} tokens)", record.layer, record.pass, record.requests, record.tokens);
        lock(&shared.metrics).record(&record, waits, rejected);
        for (m, r) in batch.members.into_iter().zip(replies) {
            let _ = m.sink.send(r);
        }
    }
}
