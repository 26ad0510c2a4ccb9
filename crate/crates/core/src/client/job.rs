use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ClientError, ClientModel, JobConfig, JobKind, Result, Tape};
use crate::kv::{KVCache, Placement, TransferRecord};
use crate::ledger::{Category, MemoryLedger, Owner};
use crate::model::{AdapterGrads, AdapterState, TokenBatch};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::privacy::{precompute_noise, PrivacyConfig};
use crate::tensor::{cross_entropy, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    Train,
    Prefill,
    Decode,
}

/// One unit of client work, timed on the transport's clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub tokens: usize,
    #[serde(with = "micros")]
    pub started: Duration,
    #[serde(with = "micros")]
    pub latency: Duration,
    pub loss: Option<f32>,
    /// Hash of the logits' bit patterns.
    pub output_hash: u64,
}

mod micros {
    use std::time::Duration;

    pub fn serialize<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_micros() as u64)
    }

    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let us: u64 = serde::Deserialize::deserialize(d)?;
        Ok(Duration::from_micros(us))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Prompt followed by the generated tokens, per sequence.
    pub sequences: Vec<Vec<u32>>,
    /// `[batch, vocab]` logits of every decode step.
    pub step_logits: Vec<Tensor>,
    pub transfers: Vec<TransferRecord>,
}

pub fn logits_hash(t: &Tensor) -> u64 {
    let mut h = DefaultHasher::new();
    t.shape().hash(&mut h);
    for v in t.data() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// A fine-tuning or inference job: a client model, its adapter, optimizer
/// and byte ledger.
pub struct ClientJob {
    name: String,
    kind: JobKind,
    model: ClientModel,
    adapter: AdapterState,
    optimizer: Optimizer,
    placement: Placement,
    ledger: MemoryLedger,
    tape: Option<Tape>,
    records: Vec<JobRecord>,
    iteration: usize,
}

impl ClientJob {
    pub fn new(
        name: impl Into<String>,
        kind: JobKind,
        model: ClientModel,
        adapter: AdapterState,
        optimizer: OptimizerConfig,
        placement: Placement,
    ) -> Self {
        let mut ledger = MemoryLedger::new(Owner::Client(model.transport().client_id()));
        ledger.set(Category::Weights, model.weight_bytes());
        ledger.set(Category::Adapter, adapter.nbytes());
        ledger.set(Category::TransientBuffer, model.transport().buffer_bytes());
        Self {
            name: name.into(),
            kind,
            model,
            adapter,
            optimizer: Optimizer::new(optimizer),
            placement,
            ledger,
            tape: None,
            records: Vec::new(),
            iteration: 0,
        }
    }

    /// Builds the job `cfg` describes, including its noise set when privacy
    /// is enabled.
    pub fn from_config(cfg: &JobConfig, model: ClientModel) -> Result<Self> {
        cfg.validate(model.config())?;
        let adapter = AdapterState::new(model.config(), cfg.adapter.clone(), cfg.seed)?;
        let mut job = Self::new(cfg.name.clone(), cfg.kind, model, adapter, cfg.optimizer, cfg.placement);
        if cfg.privacy.enabled {
            let t = match cfg.kind {
                JobKind::Finetune => cfg.seq,
                JobKind::Inference => cfg.seq + cfg.gen_tokens,
            };
            let t_max = cfg.batch * t.min(job.model.config().max_seq);
            job.enable_privacy(&cfg.privacy, t_max)?;
        }
        Ok(job)
    }

    /// Precomputes noise for every proxied layer, covering requests of up to
    /// `t_max` tokens, and blinds all later forward requests.
    pub fn enable_privacy(&mut self, params: &PrivacyConfig, t_max: usize) -> Result<()> {
        let layers = self.model.virtual_layers();
        let cfg = *self.model.config();
        let noise = precompute_noise(self.model.transport_mut(), &cfg, &layers, t_max, params)?;
        self.ledger.set(Category::PrivacyNoise, noise.nbytes());
        self.model.set_noise(noise);
        self.refresh_buffer();
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn id(&self) -> u32 {
        self.model.transport().client_id()
    }

    pub fn kind(&self) -> JobKind {
        self.kind
    }

    pub fn adapter(&self) -> &AdapterState {
        &self.adapter
    }

    pub fn adapter_mut(&mut self) -> &mut AdapterState {
        &mut self.adapter
    }

    pub fn model(&self) -> &ClientModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut ClientModel {
        &mut self.model
    }

    pub fn ledger(&self) -> &MemoryLedger {
        &self.ledger
    }

    pub fn records(&self) -> &[JobRecord] {
        &self.records
    }

    fn refresh_buffer(&mut self) {
        self.ledger
            .set(Category::TransientBuffer, self.model.transport().buffer_bytes());
    }

    fn record(&mut self, phase: Phase, tokens: usize, started: Duration, loss: Option<f32>, out: &Tensor) {
        let latency = self.model.transport().clock().saturating_sub(started);
        self.records.push(JobRecord {
            iteration: self.iteration,
            phase,
            tokens,
            started,
            latency,
            loss,
            output_hash: logits_hash(out),
        });
    }

    /// Plain forward with the adapter applied and nothing saved.
    pub fn forward(&mut self, tokens: &TokenBatch) -> Result<Tensor> {
        let started = self.model.transport().clock();
        let logits = self.model.forward(Some(&self.adapter), tokens, None, None)?;
        self.refresh_buffer();
        self.record(Phase::Forward, tokens.tokens(), started, None, &logits);
        Ok(logits)
    }

    /// Forward that keeps what the next [`backward`](Self::backward) needs.
    pub fn forward_train(&mut self, tokens: &TokenBatch) -> Result<Tensor> {
        if self.kind != JobKind::Finetune {
            return Err(ClientError::State("inference jobs do not train"));
        }
        let mut tape = Tape::default();
        let logits = self.model.forward(Some(&self.adapter), tokens, None, Some(&mut tape))?;
        self.refresh_buffer();
        self.ledger.set(Category::SavedActivations, tape.nbytes());
        self.tape = Some(tape);
        Ok(logits)
    }

    /// Adapter gradients for the last training forward. Releases its saved
    /// activations.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<AdapterGrads> {
        if self.kind != JobKind::Finetune {
            return Err(ClientError::State("inference jobs do not train"));
        }
        let tape = self.tape.take().ok_or(ClientError::State("backward without a training forward"))?;
        let grads = self.model.backward(&self.adapter, &tape, grad_logits);
        drop(tape);
        self.ledger.set(Category::SavedActivations, 0);
        self.refresh_buffer();
        grads
    }

    /// One optimizer step on the copy task; returns the loss before the
    /// update.
    pub fn train_step(&mut self, tokens: &TokenBatch, targets: &[u32]) -> Result<f32> {
        let started = self.model.transport().clock();
        let logits = self.forward_train(tokens)?;
        let (loss, grad) = cross_entropy(&logits, targets)?;
        let grads = self.backward(&grad)?;
        self.optimizer.step(&mut self.adapter, &grads);
        self.ledger.set(Category::Optimizer, self.optimizer.state_bytes());
        self.ledger.set(Category::Adapter, self.adapter.nbytes());
        self.record(Phase::Train, tokens.tokens(), started, Some(loss), &logits);
        self.iteration += 1;
        Ok(loss)
    }

    /// Greedy decoding of `n` tokens per sequence.
    ///
    /// All prompt tokens but the last go through one prefill forward; each
    /// decode forward then feeds the newest token of every sequence and
    /// yields the next one.
    pub fn generate(&mut self, prompt: &TokenBatch, n: usize) -> Result<Generation> {
        let batch = prompt.batch;
        let mut sequences: Vec<Vec<u32>> = (0..batch).map(|b| prompt.sequence(b).to_vec()).collect();
        if n == 0 {
            return Ok(Generation {
                sequences,
                step_logits: Vec::new(),
                transfers: Vec::new(),
            });
        }
        prompt.validate(self.model.config(), 0)?;
        if prompt.seq + n > self.model.config().max_seq + 1 {
            return Err(crate::model::ModelError::SeqOverflow {
                len: prompt.seq + n - 1,
                max: self.model.config().max_seq,
            }
            .into());
        }
        let mut cache = KVCache::new(self.model.config(), batch, self.placement);
        let s = prompt.seq;
        if s > 1 {
            let ids = (0..batch).flat_map(|b| prompt.sequence(b)[..s - 1].to_vec()).collect();
            let pre = TokenBatch::new(batch, s - 1, ids)?;
            let started = self.model.transport().clock();
            let logits = self.model.forward(Some(&self.adapter), &pre, Some(&mut cache), None)?;
            self.refresh_buffer();
            self.ledger.set(Category::KvCache, cache.nbytes());
            self.record(Phase::Prefill, pre.tokens(), started, None, &logits);
        }
        let mut step_logits = Vec::with_capacity(n);
        for _ in 0..n {
            let last: Vec<u32> = sequences.iter().map(|q| *q.last().expect("non-empty")).collect();
            let step = TokenBatch::new(batch, 1, last)?;
            let started = self.model.transport().clock();
            let logits = self.model.forward(Some(&self.adapter), &step, Some(&mut cache), None)?;
            cache.record_decode_step();
            self.refresh_buffer();
            self.ledger.set(Category::KvCache, cache.nbytes());
            for (b, q) in sequences.iter_mut().enumerate() {
                q.push(argmax(logits.row(b)));
            }
            self.record(Phase::Decode, batch, started, None, &logits);
            step_logits.push(logits);
        }
        let transfers = cache.transfers().to_vec();
        drop(cache);
        self.ledger.set(Category::KvCache, 0);
        self.iteration += 1;
        Ok(Generation {
            sequences,
            step_logits,
            transfers,
        })
    }

    /// Runs the workload `cfg` describes: `steps` optimizer steps on the
    /// copy task, or `steps` generate rounds of `gen_tokens` each.
    pub fn run(&mut self, cfg: &JobConfig) -> Result<RunOutcome> {
        let model_cfg = *self.model.config();
        let mut out = RunOutcome::default();
        match cfg.kind {
            JobKind::Finetune => {
                let data = cfg.copy_dataset(&model_cfg);
                for step in 0..cfg.steps {
                    let (tokens, targets) = cfg.training_batch(&data, step);
                    out.losses.push(self.train_step(&tokens, &targets)?);
                }
            }
            JobKind::Inference => {
                for round in 0..cfg.steps {
                    let g = self.generate(&cfg.prompt(&model_cfg, round), cfg.gen_tokens)?;
                    out.generated.push(g.sequences);
                    out.transfers.extend(g.transfers);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutcome {
    pub losses: Vec<f32>,
    /// Per round, per sequence.
    pub generated: Vec<Vec<Vec<u32>>>,
    pub transfers: Vec<TransferRecord>,
}
