//! Discrete-event cluster on a virtual clock.
//!
//! Clients run real jobs on their own threads against a real
//! [`BaseExecutor`], but time is simulated: a client's layer call arrives
//! at the executor after a modeled client-side cost, and a dispatched batch
//! completes after a modeled service time. The conductor only advances the
//! clock once every live client is blocked on a reply or finished, so the
//! outcome — batch composition, latencies, outputs — does not depend on how
//! the OS schedules threads.

use std::collections::BTreeMap;
use std::sync::mpsc::{self, Sender};
use std::thread;
use std::time::Duration;

use thiserror::Error;

use crate::client::ClientProfile;
use crate::executor::{BaseExecutor, BatchPolicy, BatchRecord, ExecutorMetrics, Poll, Scheduler};
use crate::ledger::LedgerSnapshot;
use crate::model::{LayerAddress, ModelConfig};
use crate::protocol::{ClientId, Pass, Reply, RequestEnvelope};
use crate::tensor::Tensor;
use crate::transport::{output_width, ChannelStats, LayerTransport, TransportError};

/// Modeled executor service time for one batch:
/// `per_batch_us + per_token_us × tokens × d_in·d_out / d_model²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecutorCost {
    pub per_batch_us: f64,
    pub per_token_us: f64,
}

impl Default for ExecutorCost {
    fn default() -> Self {
        Self {
            per_batch_us: 200.0,
            per_token_us: 0.5,
        }
    }
}

impl ExecutorCost {
    pub fn service_time(&self, config: &ModelConfig, layer: LayerAddress, tokens: usize) -> Duration {
        let (d_in, d_out) = config.dims(layer.role);
        let factor = (d_in * d_out) as f64 / (config.d_model * config.d_model) as f64;
        micros(self.per_batch_us + self.per_token_us * tokens as f64 * factor)
    }
}

fn micros(us: f64) -> Duration {
    Duration::from_nanos((us * 1000.0).round().max(0.0) as u64)
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulation stalled at {now:?} with {pending} queued requests")]
    Stalled { now: Duration, pending: usize },
    #[error("client thread could not be started: {0}")]
    Spawn(String),
}

struct Delivery {
    reply: Reply,
    at: Duration,
}

enum Msg {
    Submit {
        envelope: RequestEnvelope,
        arrival: Duration,
        sink: Sender<Delivery>,
    },
    Done(ClientId),
}

/// Transport whose clock is the simulation's.
pub struct SimChannel {
    client_id: ClientId,
    config: ModelConfig,
    profile: ClientProfile,
    conductor: Sender<Msg>,
    now: Duration,
    next_request: u64,
    stats: ChannelStats,
}

impl LayerTransport for SimChannel {
    fn client_id(&self) -> u32 {
        self.client_id
    }

    fn call(&mut self, layer: LayerAddress, pass: Pass, input: &Tensor) -> Result<Tensor, TransportError> {
        let tokens = input.rows();
        let cost = micros(self.profile.per_call_us + self.profile.per_token_us * tokens as f64);
        let envelope = RequestEnvelope::inline(self.client_id, self.next_request, layer, pass, input);
        self.next_request += 1;
        self.stats.requests += 1;
        self.stats.payload_copies += 1;
        let (sink, rx) = mpsc::channel();
        let lost = TransportError::Disconnected { layer, pass };
        self.conductor
            .send(Msg::Submit {
                envelope,
                arrival: self.now + cost,
                sink,
            })
            .map_err(|_| lost)?;
        let Delivery { reply, at } = rx.recv().map_err(|_| TransportError::Disconnected { layer, pass })?;
        self.now = at;
        let p = reply.result.map_err(|error| TransportError::Exec { layer, pass, error })?;
        let out_w = output_width(pass, self.config.dims(layer.role));
        let data = p.data.unwrap_or_default();
        if p.token_count != tokens || p.width != out_w || data.len() != tokens * out_w {
            return Err(TransportError::Protocol(format!("{layer}: reply shape [{}, {}]", p.token_count, p.width)));
        }
        Ok(Tensor::new(vec![tokens, out_w], data).expect("reply shape checked"))
    }

    fn stats(&self) -> ChannelStats {
        self.stats
    }

    fn buffer_bytes(&self) -> u64 {
        0
    }

    fn clock(&self) -> Duration {
        self.now
    }
}

impl Drop for SimChannel {
    fn drop(&mut self) {
        let _ = self.conductor.send(Msg::Done(self.client_id));
    }
}

/// One simulated client: its id, cost profile and workload.
pub struct SimClient<R> {
    pub id: ClientId,
    pub profile: ClientProfile,
    pub work: Box<dyn FnOnce(SimChannel) -> R + Send>,
}

pub struct SimOutcome<R> {
    /// Per client, in input order. `Err` holds a panic message.
    pub results: Vec<Result<R, String>>,
    pub metrics: ExecutorMetrics,
    pub batches: Vec<BatchRecord>,
    pub executor_ledger: LedgerSnapshot,
    pub executor_peak_total: u64,
    pub end: Duration,
}

pub struct VirtualCluster {
    pub config: ModelConfig,
    pub policy: BatchPolicy,
    pub cost: ExecutorCost,
}

impl VirtualCluster {
    pub fn new(config: ModelConfig, policy: BatchPolicy, cost: ExecutorCost) -> Self {
        Self { config, policy, cost }
    }

    pub fn run<R: Send + 'static>(&self, mut executor: BaseExecutor, clients: Vec<SimClient<R>>) -> Result<SimOutcome<R>, SimError> {
        let (tx, rx) = mpsc::channel::<Msg>();
        let mut scheduler: Scheduler<Sender<Delivery>> = Scheduler::new(self.policy);
        let mut handles = Vec::with_capacity(clients.len());
        for c in clients {
            scheduler.register(c.id);
            let chan = SimChannel {
                client_id: c.id,
                config: self.config,
                profile: c.profile,
                conductor: tx.clone(),
                now: Duration::ZERO,
                next_request: 0,
                stats: ChannelStats::default(),
            };
            let work = c.work;
            let h = thread::Builder::new()
                .name(format!("sim-client-{}", c.id))
                .spawn(move || work(chan))
                .map_err(|e| SimError::Spawn(e.to_string()))?;
            handles.push(h);
        }
        drop(tx);

        let mut running = handles.len();
        let mut live = handles.len();
        let mut arrivals: BTreeMap<(Duration, ClientId, u64), (RequestEnvelope, Sender<Delivery>)> = BTreeMap::new();
        let mut in_flight: Option<(Duration, Vec<(Sender<Delivery>, Reply)>)> = None;
        let mut metrics = ExecutorMetrics::default();
        let mut batches = Vec::new();
        let mut now = Duration::ZERO;
        let mut stalled = None;

        loop {
            while running > 0 {
                match rx.recv() {
                    Ok(Msg::Submit { envelope, arrival, sink }) => {
                        running -= 1;
                        arrivals.insert((arrival, envelope.client_id, envelope.request_id), (envelope, sink));
                    }
                    Ok(Msg::Done(id)) => {
                        running -= 1;
                        live -= 1;
                        // Anything it left queued is dropped, failing its sink.
                        drop(scheduler.deregister(id));
                    }
                    Err(_) => {
                        running = 0;
                        live = 0;
                    }
                }
            }
            if live == 0 && arrivals.is_empty() && in_flight.is_none() {
                break;
            }

            while let Some(entry) = arrivals.first_entry() {
                if entry.key().0 > now {
                    break;
                }
                let ((arrival, _, _), (envelope, sink)) = entry.remove_entry();
                scheduler.enqueue(envelope, sink, arrival);
            }

            if let Some((done_at, _)) = &in_flight {
                if *done_at <= now {
                    let (at, replies) = in_flight.take().expect("in flight");
                    for (sink, reply) in replies {
                        if sink.send(Delivery { reply, at }).is_ok() {
                            running += 1;
                        }
                    }
                    continue;
                }
            }

            let mut wake = None;
            if in_flight.is_none() {
                match scheduler.poll(now) {
                    Poll::Dispatch(batch) => {
                        let envelopes: Vec<&RequestEnvelope> = batch.members.iter().map(|m| &m.envelope).collect();
                        let replies = executor.execute(batch.layer, batch.pass, &envelopes);
                        let rejected = replies.iter().filter(|r| r.result.is_err()).count();
                        let waits: Vec<Duration> = batch.members.iter().map(|m| now - m.arrival).collect();
                        let record = BatchRecord {
                            layer: batch.layer,
                            pass: batch.pass,
                            requests: batch.members.len(),
                            tokens: batch.tokens(),
                            dispatched_at: now,
                            max_wait: waits.iter().copied().max().unwrap_or_default(),
                        };
                        metrics.record(&record, waits, rejected);
                        batches.push(record);
                        let done_at = now + self.cost.service_time(&self.config, batch.layer, record.tokens);
                        let routed = batch.members.into_iter().map(|m| m.sink).zip(replies).collect();
                        in_flight = Some((done_at, routed));
                        continue;
                    }
                    Poll::WaitUntil(t) => wake = Some(t),
                    Poll::Idle => {}
                }
            }

            let next = [
                arrivals.first_key_value().map(|(k, _)| k.0),
                in_flight.as_ref().map(|f| f.0),
                wake,
            ]
            .into_iter()
            .flatten()
            .min();
            match next {
                Some(t) if t > now => now = t,
                Some(_) => now += Duration::from_nanos(1),
                None => {
                    stalled = Some(SimError::Stalled {
                        now,
                        pending: scheduler.pending(),
                    });
                    break;
                }
            }
        }

        // Unblock anyone still waiting so the threads can be joined.
        drop(scheduler);
        drop(arrivals);
        drop(in_flight);
        let results = handles
            .into_iter()
            .map(|h| {
                h.join().map_err(|p| {
                    p.downcast_ref::<String>()
                        .cloned()
                        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_else(|| "client panicked".into())
                })
            })
            .collect();
        if let Some(e) = stalled {
            return Err(e);
        }
        Ok(SimOutcome {
            results,
            metrics,
            batches,
            executor_ledger: executor.ledger().snapshot(),
            executor_peak_total: executor.ledger().peak_total(),
            end: now,
        })
    }
}
