//! Per-sequence key/value cache with residency accounting.
//!
//! Placement does not change any numbers; it only decides which transfer
//! counters a decode step charges. With an offloaded cache, a decode step
//! either pulls the whole cache to the fast device to attend there
//! (`compute_on_fast`) or ships the new token's activations to the host and
//! attends there (`compute_on_offloaded`).

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, ModelError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Fast,
    Offloaded,
}

/// Bytes a single decode step moves across the fast/offloaded boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub context_len: usize,
    pub compute_on_fast: u64,
    pub compute_on_offloaded: u64,
}

#[derive(Debug, Clone)]
pub struct KVCache {
    n_layers: usize,
    d_model: usize,
    max_seq: usize,
    batch: usize,
    // Indexed by `seq * n_layers + block`.
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    placement: Placement,
    transfers: Vec<TransferRecord>,
}

impl KVCache {
    pub fn new(config: &ModelConfig, batch: usize, placement: Placement) -> Self {
        let slots = batch * config.n_layers;
        Self {
            n_layers: config.n_layers,
            d_model: config.d_model,
            max_seq: config.max_seq,
            batch,
            keys: vec![Vec::new(); slots],
            values: vec![Vec::new(); slots],
            placement,
            transfers: Vec::new(),
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn placement(&self) -> Placement {
        self.placement
    }

    /// Committed positions: the shortest entry, so a half-finished forward
    /// never advertises positions some blocks do not hold yet.
    pub fn len(&self) -> usize {
        self.keys.iter().map(|k| k.len() / self.d_model).min().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn slot(&self, seq: usize, block: usize) -> usize {
        seq * self.n_layers + block
    }

    pub fn append(&mut self, seq: usize, block: usize, k: &Tensor, v: &Tensor) -> Result<()> {
        let slot = self.slot(seq, block);
        let have = self.keys[slot].len() / self.d_model;
        let new_len = have + k.rows();
        if new_len > self.max_seq {
            return Err(ModelError::SeqOverflow {
                len: new_len,
                max: self.max_seq,
            });
        }
        if k.cols() != self.d_model || v.shape() != k.shape() {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "kv append",
                lhs: k.shape().to_vec(),
                rhs: v.shape().to_vec(),
            }
            .into());
        }
        self.keys[slot].extend_from_slice(k.data());
        self.values[slot].extend_from_slice(v.data());
        Ok(())
    }

    pub fn keys(&self, seq: usize, block: usize) -> Tensor {
        let data = self.keys[self.slot(seq, block)].clone();
        let rows = data.len() / self.d_model;
        Tensor::new(vec![rows, self.d_model], data).expect("cache rows")
    }

    pub fn values(&self, seq: usize, block: usize) -> Tensor {
        let data = self.values[self.slot(seq, block)].clone();
        let rows = data.len() / self.d_model;
        Tensor::new(vec![rows, self.d_model], data).expect("cache rows")
    }

    pub fn nbytes(&self) -> u64 {
        let floats: usize = self.keys.iter().chain(&self.values).map(Vec::len).sum();
        (floats * 4) as u64
    }

    /// Charges one decode step at the current context length.
    pub fn record_decode_step(&mut self) -> TransferRecord {
        let context_len = self.len();
        let rec = match self.placement {
            Placement::Fast => TransferRecord {
                context_len,
                compute_on_fast: 0,
                compute_on_offloaded: 0,
            },
            Placement::Offloaded => TransferRecord {
                context_len,
                compute_on_fast: self.nbytes(),
                compute_on_offloaded: decode_activation_bytes(self.n_layers, self.d_model, self.batch),
            },
        };
        self.transfers.push(rec);
        rec
    }

    pub fn transfers(&self) -> &[TransferRecord] {
        &self.transfers
    }
}

/// Per decode step when attending on the host: the new token's q, k, v go
/// down and the attention output comes back, for every block.
pub fn decode_activation_bytes(n_layers: usize, d_model: usize, batch: usize) -> u64 {
    (n_layers * batch * 4 * d_model * 4) as u64
}

/// A simple link/compute model for locating the point where attending on the
/// host beats pulling the cache to the fast device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferCostModel {
    pub link_bytes_per_sec: f64,
    pub fast_flops: f64,
    pub offloaded_flops: f64,
}

impl Default for TransferCostModel {
    fn default() -> Self {
        // PCIe-class link, accelerator vs. host attention throughput.
        Self {
            link_bytes_per_sec: 16e9,
            fast_flops: 20e12,
            offloaded_flops: 0.5e12,
        }
    }
}

impl TransferCostModel {
    fn attention_flops(n_layers: usize, d_model: usize, batch: usize, context: usize) -> f64 {
        // q·k and p·v, a multiply-add each, per cached position.
        (4 * n_layers * d_model * batch * context) as f64
    }

    pub fn step_seconds_compute_on_fast(&self, n_layers: usize, d_model: usize, batch: usize, context: usize) -> f64 {
        let bytes = (n_layers * 2 * context * d_model * 4 * batch) as f64;
        bytes / self.link_bytes_per_sec + Self::attention_flops(n_layers, d_model, batch, context) / self.fast_flops
    }

    pub fn step_seconds_compute_on_offloaded(
        &self,
        n_layers: usize,
        d_model: usize,
        batch: usize,
        context: usize,
    ) -> f64 {
        let bytes = decode_activation_bytes(n_layers, d_model, batch) as f64;
        bytes / self.link_bytes_per_sec + Self::attention_flops(n_layers, d_model, batch, context) / self.offloaded_flops
    }

    /// Smallest context length at which attending on the host is no slower
    /// than pulling the cache over. `None` when the host never wins.
    pub fn crossover_context(&self, n_layers: usize, d_model: usize, batch: usize) -> Option<usize> {
        let per_pos_fast = self.step_seconds_compute_on_fast(n_layers, d_model, batch, 1);
        let per_pos_host = Self::attention_flops(n_layers, d_model, batch, 1) / self.offloaded_flops;
        let fixed_host = decode_activation_bytes(n_layers, d_model, batch) as f64 / self.link_bytes_per_sec;
        if per_pos_fast <= per_pos_host {
            return None;
        }
        let mut ctx = (fixed_host / (per_pos_fast - per_pos_host)).ceil().max(1.0) as usize;
        // Settle floating-point rounding at the boundary.
        while ctx > 1
            && self.step_seconds_compute_on_offloaded(n_layers, d_model, batch, ctx - 1)
                <= self.step_seconds_compute_on_fast(n_layers, d_model, batch, ctx - 1)
        {
            ctx -= 1;
        }
        while self.step_seconds_compute_on_offloaded(n_layers, d_model, batch, ctx)
            > self.step_seconds_compute_on_fast(n_layers, d_model, batch, ctx)
        {
            ctx += 1;
        }
        Some(ctx)
    }
}
