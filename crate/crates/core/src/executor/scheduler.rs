//! Batch formation. Pure and clock-agnostic: callers pass the current time as
//! an offset from their own epoch, so the same scheduler drives both the
//! threaded service (wall clock) and the discrete-event simulator.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::model::LayerAddress;
use crate::protocol::{ClientId, Pass, RequestEnvelope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// Every request runs alone as soon as the executor is free.
    NoLockstep,
    /// A layer runs only once every registered client has a request for it.
    Lockstep,
    /// Bounded, size-proportional wait per request; batches re-form at every layer.
    Opportunistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchPolicy {
    pub mode: PolicyMode,
    pub wait_per_token: Duration,
    pub wait_cap: Duration,
    pub max_batch_tokens: usize,
}

impl Default for BatchPolicy {
    fn default() -> Self {
        Self {
            mode: PolicyMode::Opportunistic,
            wait_per_token: Duration::from_micros(100),
            wait_cap: Duration::from_millis(50),
            max_batch_tokens: 65_536,
        }
    }
}

impl BatchPolicy {
    pub fn with_mode(mode: PolicyMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    /// How long a request of `token_count` tokens may wait for company.
    pub fn wait_budget(&self, token_count: usize) -> Duration {
        let scaled = self.wait_per_token.saturating_mul(token_count.min(u32::MAX as usize) as u32);
        scaled.min(self.wait_cap)
    }
}

#[derive(Debug)]
pub struct Pending<T> {
    pub envelope: RequestEnvelope,
    pub arrival: Duration,
    pub sink: T,
    seq: u64,
}

impl<T> Pending<T> {
    /// A request that never entered a queue (e.g. rejected on arrival).
    pub fn new(envelope: RequestEnvelope, arrival: Duration, sink: T) -> Self {
        Self {
            envelope,
            arrival,
            sink,
            seq: 0,
        }
    }
}

#[derive(Debug)]
pub struct Batch<T> {
    pub layer: LayerAddress,
    pub pass: Pass,
    pub members: Vec<Pending<T>>,
    pub dispatched_at: Duration,
}

impl<T> Batch<T> {
    pub fn tokens(&self) -> usize {
        self.members.iter().map(|m| m.envelope.token_count).sum()
    }
}

#[derive(Debug)]
pub enum Poll<T> {
    Dispatch(Batch<T>),
    /// Nothing is ready; poll again no later than this time.
    WaitUntil(Duration),
    /// Nothing is ready and only a new arrival or (de)registration can change that.
    Idle,
}

type QueueKey = (LayerAddress, Pass);

/// Per-(layer, pass) FIFO queues plus the registered-client set.
#[derive(Debug)]
pub struct Scheduler<T> {
    policy: BatchPolicy,
    queues: BTreeMap<QueueKey, VecDeque<Pending<T>>>,
    registered: BTreeSet<ClientId>,
    next_seq: u64,
}

impl<T> Scheduler<T> {
    pub fn new(policy: BatchPolicy) -> Self {
        Self {
            policy,
            queues: BTreeMap::new(),
            registered: BTreeSet::new(),
            next_seq: 0,
        }
    }

    pub fn policy(&self) -> &BatchPolicy {
        &self.policy
    }

    /// Returns false if the client was already registered.
    pub fn register(&mut self, client: ClientId) -> bool {
        self.registered.insert(client)
    }

    /// Removes the client and hands back anything it still had queued.
    pub fn deregister(&mut self, client: ClientId) -> Vec<Pending<T>> {
        self.registered.remove(&client);
        let mut dropped = Vec::new();
        for q in self.queues.values_mut() {
            let mut keep = VecDeque::with_capacity(q.len());
            for p in q.drain(..) {
                if p.envelope.client_id == client {
                    dropped.push(p);
                } else {
                    keep.push_back(p);
                }
            }
            *q = keep;
        }
        self.queues.retain(|_, q| !q.is_empty());
        dropped
    }

    pub fn registered(&self) -> &BTreeSet<ClientId> {
        &self.registered
    }

    pub fn enqueue(&mut self, envelope: RequestEnvelope, sink: T, now: Duration) {
        let key = (envelope.layer, envelope.pass);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queues.entry(key).or_default().push_back(Pending {
            envelope,
            arrival: now,
            sink,
            seq,
        });
    }

    pub fn pending(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    /// Drains every queue, e.g. on shutdown.
    pub fn drain_all(&mut self) -> Vec<Pending<T>> {
        let queues = std::mem::take(&mut self.queues);
        queues.into_values().flatten().collect()
    }

    /// True when no registered client can send anything new: each one
    /// already has a request waiting here.
    fn all_registered_waiting(&self) -> bool {
        if self.registered.is_empty() {
            return true;
        }
        let waiting: BTreeSet<ClientId> = self
            .queues
            .values()
            .flatten()
            .map(|p| p.envelope.client_id)
            .collect();
        self.registered.is_subset(&waiting)
    }

    fn take_queue(&mut self, key: QueueKey, limit_tokens: Option<usize>, now: Duration) -> Batch<T> {
        let q = self.queues.get_mut(&key).expect("queue exists");
        let mut members = Vec::new();
        let mut tokens = 0usize;
        while let Some(front) = q.front() {
            let t = front.envelope.token_count;
            if let Some(limit) = limit_tokens {
                if !members.is_empty() && tokens + t > limit {
                    break;
                }
            }
            tokens += t;
            members.push(q.pop_front().expect("front exists"));
        }
        if q.is_empty() {
            self.queues.remove(&key);
        }
        Batch {
            layer: key.0,
            pass: key.1,
            members,
            dispatched_at: now,
        }
    }

    fn take_single(&mut self, key: QueueKey, now: Duration) -> Batch<T> {
        let q = self.queues.get_mut(&key).expect("queue exists");
        let member = q.pop_front().expect("non-empty queue");
        if q.is_empty() {
            self.queues.remove(&key);
        }
        Batch {
            layer: key.0,
            pass: key.1,
            members: vec![member],
            dispatched_at: now,
        }
    }

    fn oldest_queue(&self, filter: impl Fn(&QueueKey) -> bool) -> Option<QueueKey> {
        self.queues
            .iter()
            .filter(|(k, q)| !q.is_empty() && filter(k))
            .min_by_key(|(_, q)| q.front().map(|p| (p.arrival, p.seq)))
            .map(|(k, _)| *k)
    }

    pub fn poll(&mut self, now: Duration) -> Poll<T> {
        // Noise-effect requests never share a batch with regular traffic.
        if let Some(key) = self.oldest_queue(|k| k.1 == Pass::NoiseEffect) {
            return Poll::Dispatch(self.take_single(key, now));
        }
        if self.queues.is_empty() {
            return Poll::Idle;
        }
        match self.policy.mode {
            PolicyMode::NoLockstep => {
                let key = self.oldest_queue(|_| true).expect("non-empty");
                Poll::Dispatch(self.take_single(key, now))
            }
            PolicyMode::Lockstep => self.poll_lockstep(now),
            PolicyMode::Opportunistic => self.poll_opportunistic(now),
        }
    }

    fn poll_lockstep(&mut self, now: Duration) -> Poll<T> {
        let complete = |q: &VecDeque<Pending<T>>| {
            let present: BTreeSet<ClientId> = q.iter().map(|p| p.envelope.client_id).collect();
            self.registered.is_subset(&present)
        };
        let ready = self
            .queues
            .iter()
            .filter(|(_, q)| complete(q))
            .min_by_key(|(_, q)| q.front().map(|p| (p.arrival, p.seq)))
            .map(|(k, _)| *k);
        if let Some(key) = ready {
            return Poll::Dispatch(self.take_queue(key, None, now));
        }
        // Clients split across layers can never complete a queue; run the
        // oldest one rather than deadlock.
        if self.all_registered_waiting() {
            let key = self.oldest_queue(|_| true).expect("non-empty");
            return Poll::Dispatch(self.take_queue(key, None, now));
        }
        Poll::Idle
    }

    fn deadline(&self, q: &VecDeque<Pending<T>>) -> Duration {
        q.iter()
            .map(|p| p.arrival + self.policy.wait_budget(p.envelope.token_count))
            .min()
            .unwrap_or(Duration::MAX)
    }

    fn poll_opportunistic(&mut self, now: Duration) -> Poll<T> {
        let nobody_else = self.all_registered_waiting();
        let max_tokens = self.policy.max_batch_tokens;
        let mut best: Option<(Duration, QueueKey)> = None;
        let mut next_deadline = Duration::MAX;
        for (key, q) in &self.queues {
            let deadline = self.deadline(q);
            let tokens: usize = q.iter().map(|p| p.envelope.token_count).sum();
            let ready = now >= deadline || tokens >= max_tokens || nobody_else;
            if ready {
                if best.is_none_or(|(d, _)| deadline < d) {
                    best = Some((deadline, *key));
                }
            } else {
                next_deadline = next_deadline.min(deadline);
            }
        }
        match best {
            Some((_, key)) => Poll::Dispatch(self.take_queue(key, Some(max_tokens), now)),
            None => Poll::WaitUntil(next_deadline),
        }
    }
}
