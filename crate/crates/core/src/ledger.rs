//! Exact byte accounting per component and category.

use std::collections::BTreeMap;
use std::fmt;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::model::{AdapterMethod, AdapterSpec, ModelConfig, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Weights,
    Adapter,
    KvCache,
    Optimizer,
    SavedActivations,
    TransientBuffer,
    PrivacyNoise,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Weights,
        Category::Adapter,
        Category::KvCache,
        Category::Optimizer,
        Category::SavedActivations,
        Category::TransientBuffer,
        Category::PrivacyNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Weights => "weights",
            Category::Adapter => "adapter",
            Category::KvCache => "kv_cache",
            Category::Optimizer => "optimizer",
            Category::SavedActivations => "saved_activations",
            Category::TransientBuffer => "transient_buffer",
            Category::PrivacyNoise => "privacy_noise",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Owner {
    Executor,
    Client(u32),
}

impl fmt::Display for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Owner::Executor => f.write_str("executor"),
            Owner::Client(id) => write!(f, "client-{id}"),
        }
    }
}

/// Running byte counts for one component.
///
/// Every allocation or release touches exactly one category. Per-category
/// and total high-water marks are tracked alongside the live values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryLedger {
    owner: Owner,
    current: BTreeMap<Category, u64>,
    peak: BTreeMap<Category, u64>,
    peak_total: u64,
}

impl MemoryLedger {
    pub fn new(owner: Owner) -> Self {
        Self {
            owner,
            current: BTreeMap::new(),
            peak: BTreeMap::new(),
            peak_total: 0,
        }
    }

    pub fn owner(&self) -> Owner {
        self.owner
    }

    pub fn alloc(&mut self, category: Category, bytes: u64) {
        let v = self.current.entry(category).or_insert(0);
        *v += bytes;
        let now = *v;
        let p = self.peak.entry(category).or_insert(0);
        *p = (*p).max(now);
        self.peak_total = self.peak_total.max(self.total());
    }

    pub fn release(&mut self, category: Category, bytes: u64) {
        let v = self.current.entry(category).or_insert(0);
        debug_assert!(*v >= bytes, "{} releasing {bytes} from {category} holding {v}", self.owner);
        *v = v.saturating_sub(bytes);
    }

    /// Adjusts a category to an absolute value.
    pub fn set(&mut self, category: Category, bytes: u64) {
        let have = self.get(category);
        if bytes >= have {
            self.alloc(category, bytes - have);
        } else {
            self.release(category, have - bytes);
        }
    }

    pub fn get(&self, category: Category) -> u64 {
        self.current.get(&category).copied().unwrap_or(0)
    }

    pub fn peak(&self, category: Category) -> u64 {
        self.peak.get(&category).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.current.values().sum()
    }

    pub fn peak_total(&self) -> u64 {
        self.peak_total
    }

    /// Live total minus the live transient buffer.
    pub fn total_excluding_transient(&self) -> u64 {
        self.total() - self.get(Category::TransientBuffer)
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            owner: self.owner,
            categories: Category::ALL.iter().map(|&c| (c, self.get(c))).collect(),
            peaks: Category::ALL.iter().map(|&c| (c, self.peak(c))).collect(),
            timestamp_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
        }
    }
}

/// Point-in-time copy of a ledger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub owner: Owner,
    pub categories: BTreeMap<Category, u64>,
    pub peaks: BTreeMap<Category, u64>,
    pub timestamp_ms: u64,
}

impl LedgerSnapshot {
    pub fn get(&self, c: Category) -> u64 {
        self.categories.get(&c).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.categories.values().sum()
    }

    pub fn total_excluding_transient(&self) -> u64 {
        self.total() - self.get(Category::TransientBuffer)
    }

    /// `component,category,bytes,timestamp` rows.
    pub fn csv_rows(&self) -> Vec<[String; 4]> {
        self.categories
            .iter()
            .map(|(c, b)| {
                [
                    self.owner.to_string(),
                    c.to_string(),
                    b.to_string(),
                    self.timestamp_ms.to_string(),
                ]
            })
            .collect()
    }
}

/// Whether the live totals of `ledgers` fit in `budget_bytes`.
pub fn capacity_check(budget_bytes: u64, ledgers: &[LedgerSnapshot]) -> bool {
    ledgers.iter().map(LedgerSnapshot::total).sum::<u64>() <= budget_bytes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackingReport {
    pub replicated_jobs: u64,
    pub shared_jobs: u64,
}

impl PackingReport {
    pub fn ratio(&self) -> f64 {
        if self.replicated_jobs == 0 {
            return f64::INFINITY;
        }
        self.shared_jobs as f64 / self.replicated_jobs as f64
    }
}

/// Jobs that fit in one pooled budget: every replicated job carries its own
/// model copy, while shared-base jobs share a single copy.
pub fn packing_report(model_bytes: u64, per_job_bytes: u64, budget: u64) -> PackingReport {
    assert!(per_job_bytes > 0, "per-job bytes must be positive");
    PackingReport {
        replicated_jobs: budget / (model_bytes + per_job_bytes),
        shared_jobs: budget.checked_sub(model_bytes).map_or(0, |free| free / per_job_bytes),
    }
}

/// Per-device packing: a replicated job cannot span devices; the shared base
/// sits on the first device and clients fill whatever space remains anywhere.
pub fn packing_report_per_device(model_bytes: u64, per_job_bytes: u64, devices: &[u64]) -> PackingReport {
    assert!(per_job_bytes > 0, "per-job bytes must be positive");
    let replicated_jobs = devices.iter().map(|d| d / (model_bytes + per_job_bytes)).sum();
    let shared_jobs = match devices.split_first() {
        Some((first, rest)) if *first >= model_bytes => {
            (first - model_bytes) / per_job_bytes + rest.iter().map(|d| d / per_job_bytes).sum::<u64>()
        }
        _ => 0,
    };
    PackingReport {
        replicated_jobs,
        shared_jobs,
    }
}

/// Closed-form byte counts, parameterized by element width so the same
/// accounting can be projected onto reduced-precision deployments.
pub mod formulas {
    use super::*;

    /// Frozen weights and biases hosted by the executor.
    pub fn base_weight_bytes(config: &ModelConfig, elem: u64) -> u64 {
        config.base_param_count() * elem
    }

    /// Embedding and norm gains held by each client.
    pub fn client_weight_bytes(config: &ModelConfig, elem: u64) -> u64 {
        config.client_param_count() * elem
    }

    pub fn kv_cache_bytes(config: &ModelConfig, batch: usize, len: usize, elem: u64) -> u64 {
        (config.n_layers * 2 * len * config.d_model * batch) as u64 * elem
    }

    pub fn adapter_bytes(config: &ModelConfig, spec: &AdapterSpec, elem: u64) -> u64 {
        let mut floats = 0u64;
        for addr in config.layer_addresses() {
            if !spec.targets.contains(&addr.role) {
                continue;
            }
            let (d_in, d_out) = config.dims(addr.role);
            floats += match spec.method {
                AdapterMethod::Lora { rank, .. } => (d_in * rank + rank * d_out) as u64,
                AdapterMethod::Ia3 => d_out as u64,
            };
        }
        floats * elem
    }

    /// Adam keeps two moments per trainable value.
    pub fn adam_state_bytes(config: &ModelConfig, spec: &AdapterSpec, elem: u64) -> u64 {
        2 * adapter_bytes(config, spec, elem)
    }

    fn is_lora(spec: &AdapterSpec, role: Role) -> bool {
        matches!(spec.method, AdapterMethod::Lora { .. }) && spec.targets.contains(&role)
    }

    fn is_ia3(spec: &AdapterSpec, role: Role) -> bool {
        matches!(spec.method, AdapterMethod::Ia3) && spec.targets.contains(&role)
    }

    /// Values the client keeps between forward and backward of one
    /// training step over `batch × seq` tokens.
    pub fn saved_activation_bytes(config: &ModelConfig, spec: &AdapterSpec, batch: usize, seq: usize, elem: u64) -> u64 {
        let t = (batch * seq) as u64;
        let d = config.d_model as u64;
        let f = config.d_ff as u64;
        let mut per_block = 0u64;
        // Norm inputs, q, k, v and FF_UP output.
        per_block += 2 * t * d + 3 * t * d + t * f;
        // Attention probabilities, one [seq, seq] per head per sequence.
        per_block += (batch * config.n_heads * seq * seq) as u64;
        if [Role::Q, Role::K, Role::V].iter().any(|&r| is_lora(spec, r)) {
            per_block += t * d;
        }
        if is_lora(spec, Role::O) {
            per_block += t * d;
        }
        if is_lora(spec, Role::FfUp) {
            per_block += t * d;
        }
        if is_lora(spec, Role::FfDown) {
            per_block += t * f;
        }
        for role in Role::BLOCK_ROLES {
            if is_ia3(spec, role) {
                per_block += t * config.dims(role).1 as u64;
            }
        }
        let mut total = per_block * config.n_layers as u64 + t * d;
        if is_lora(spec, Role::LmHead) {
            total += t * d;
        }
        if is_ia3(spec, Role::LmHead) {
            total += t * config.vocab_size as u64;
        }
        total * elem
    }

    /// Preallocated client/executor exchange buffer:
    /// `batch × seq × max(d_in, d_out)` over every base layer.
    pub fn shared_buffer_bytes(config: &ModelConfig, batch: usize, seq: usize, elem: u64) -> u64 {
        (batch * seq * config.max_width()) as u64 * elem
    }

    /// Peak client footprint during a fine-tuning step with Adam.
    pub fn finetune_job_peak_bytes(config: &ModelConfig, spec: &AdapterSpec, batch: usize, seq: usize, elem: u64) -> u64 {
        client_weight_bytes(config, elem)
            + adapter_bytes(config, spec, elem)
            + adam_state_bytes(config, spec, elem)
            + saved_activation_bytes(config, spec, batch, seq, elem)
            + shared_buffer_bytes(config, batch, seq, elem)
    }
}
