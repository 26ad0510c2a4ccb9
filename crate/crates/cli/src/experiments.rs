//! Measurements behind `bench`: memory packing, offloaded-decode transfer
//! volume, executor footprint versus client count, and policy sweeps.

use std::collections::BTreeMap;

use serde::Serialize;
use splitserve_core::client::{ClientJob, ClientModel, JobConfig, JobKind};
use splitserve_core::executor::{BaseExecutor, BatchPolicy, ExecutorService, PolicyMode};
use splitserve_core::kv::{TransferCostModel, TransferRecord};
use splitserve_core::ledger::{formulas, packing_report, packing_report_per_device, PackingReport};
use splitserve_core::model::{build_model, AdapterSpec};
use splitserve_core::optim::OptimizerConfig;
use splitserve_core::transport::LocalChannel;
use splitserve_core::{ModelConfig, Placement, Role, TokenBatch};

use crate::HarnessError;

pub const GB: u64 = 1_000_000_000;

/// Served model size of the 13B-parameter reference deployment.
pub const MODEL_BYTES_13B: u64 = 26 * GB;

/// Shape of a 13B-parameter decoder. The feed-forward here has two
/// matrices rather than a gated three, so its width is 1.5× the gated
/// model's 13824 to carry the same parameter count.
pub fn config_13b() -> ModelConfig {
    ModelConfig {
        n_layers: 40,
        d_model: 5120,
        n_heads: 40,
        d_ff: 20736,
        vocab_size: 32000,
        max_seq: 4096,
        seed: 0,
    }
}

fn finetune_job(name: &str, batch: usize, seq: usize, adapter: AdapterSpec) -> JobConfig {
    JobConfig {
        name: name.into(),
        kind: JobKind::Finetune,
        adapter,
        batch,
        seq,
        steps: 1,
        gen_tokens: 0,
        placement: Placement::Fast,
        privacy: Default::default(),
        optimizer: OptimizerConfig::adam(1e-2),
        seed: 0,
        samples: batch,
        profile: Default::default(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PackingStudy {
    pub batch: usize,
    pub seq: usize,
    /// Peak client ledger over two measured training steps on the toy model.
    pub measured_job_bytes: u64,
    /// Closed-form prediction for the same toy job.
    pub formula_job_bytes: u64,
    /// Toy job bytes next to a 26 GB served model.
    pub measured: PackingReport,
    /// The same accounting at 13B shape, 2-byte elements.
    pub projected_job_bytes: u64,
    pub projected_pooled: PackingReport,
    pub projected_per_device: PackingReport,
    pub devices: Vec<u64>,
}

/// Measures one fine-tuning job at `batch × seq` on `toy` and packs it,
/// and its 13B-shaped projection, onto `devices`.
pub fn packing_study(toy: &ModelConfig, batch: usize, seq: usize, devices: &[u64]) -> Result<PackingStudy, HarnessError> {
    let spec = AdapterSpec::lora(8, 16.0, &[Role::Q, Role::V]);
    // The second step is the first whose forward runs with optimizer state
    // already allocated: the steady-state peak.
    let mut job = finetune_job("pack", batch, seq, spec.clone());
    job.steps = 2;
    job.samples = 2 * batch;
    let m = build_model(toy)?;
    let svc = ExecutorService::start(BaseExecutor::new(m.base.clone()), BatchPolicy::with_mode(PolicyMode::NoLockstep));
    let ch = LocalChannel::connect(svc.handle(), 0, toy, batch, seq);
    let client = ClientModel::from_parts(*toy, m.client.clone(), BTreeMap::new(), Box::new(ch))?;
    let mut j = ClientJob::from_config(&job, client)?;
    j.run(&job)?;
    let measured_job_bytes = j.ledger().peak_total();
    let budget: u64 = devices.iter().sum();
    let projected_job_bytes = formulas::finetune_job_peak_bytes(&config_13b(), &spec, batch, seq, 2);
    Ok(PackingStudy {
        batch,
        seq,
        measured_job_bytes,
        formula_job_bytes: formulas::finetune_job_peak_bytes(toy, &spec, batch, seq, 4),
        measured: packing_report(MODEL_BYTES_13B, measured_job_bytes, budget),
        projected_job_bytes,
        projected_pooled: packing_report(MODEL_BYTES_13B, projected_job_bytes, budget),
        projected_per_device: packing_report_per_device(MODEL_BYTES_13B, projected_job_bytes, devices),
        devices: devices.to_vec(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossoverStudy {
    /// Per decode step, in order.
    pub transfers: Vec<TransferRecord>,
    /// Context length where attending on the host starts to win, for the
    /// measured model and for the 13B shape.
    pub crossover_toy: Option<usize>,
    pub crossover_13b: Option<usize>,
}

/// Greedy decoding with an offloaded cache, from a one-token prompt up to
/// `config.max_seq` positions.
pub fn crossover_study(config: &ModelConfig, batch: usize, cost: &TransferCostModel) -> Result<CrossoverStudy, HarnessError> {
    let m = build_model(config)?;
    let svc = ExecutorService::start(BaseExecutor::new(m.base.clone()), BatchPolicy::with_mode(PolicyMode::NoLockstep));
    let ch = LocalChannel::connect(svc.handle(), 0, config, batch, 1);
    let client = ClientModel::from_parts(*config, m.client.clone(), BTreeMap::new(), Box::new(ch))?;
    let adapter = splitserve_core::model::AdapterState::new(config, AdapterSpec::lora(8, 16.0, &[Role::Q, Role::V]), 0)?;
    let mut job = ClientJob::new(
        "decode",
        JobKind::Inference,
        client,
        adapter,
        OptimizerConfig::adam(1e-2),
        Placement::Offloaded,
    );
    let prompt = TokenBatch::new(batch, 1, (0..batch as u32).collect())?;
    let g = job.generate(&prompt, config.max_seq)?;
    let big = config_13b();
    Ok(CrossoverStudy {
        transfers: g.transfers,
        crossover_toy: cost.crossover_context(config.n_layers, config.d_model, batch),
        crossover_13b: cost.crossover_context(big.n_layers, big.d_model, batch),
    })
}

/// Whether `ys` is an exact affine function of `xs` with positive slope.
pub fn is_linear(xs: &[u64], ys: &[u64]) -> bool {
    if xs.len() < 2 || xs.len() != ys.len() || xs[1] == xs[0] {
        return false;
    }
    let slope = (ys[1] as f64 - ys[0] as f64) / (xs[1] as f64 - xs[0] as f64);
    slope > 0.0
        && xs
            .iter()
            .zip(ys)
            .all(|(&x, &y)| (y as f64 - (ys[0] as f64 + slope * (x as f64 - xs[0] as f64))).abs() < 1e-6 * y.max(1) as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingPoint {
    pub clients: usize,
    /// Executor bytes excluding the transient buffer, after the run.
    pub executor_bytes: u64,
    pub executor_saved_peak: u64,
    /// Sum of the clients' peak ledgers.
    pub client_bytes: u64,
}

/// Runs `n` identical fine-tuning clients concurrently for each `n`.
pub fn client_scaling(config: &ModelConfig, counts: &[usize], steps: usize) -> Result<Vec<ScalingPoint>, HarnessError> {
    let m = build_model(config)?;
    let mut out = Vec::new();
    for &n in counts {
        let svc = ExecutorService::start(BaseExecutor::new(m.base.clone()), BatchPolicy::default());
        let mut handles = Vec::new();
        for id in 0..n {
            let mut job = finetune_job(&format!("ft{id}"), 2, 8, AdapterSpec::lora(8, 16.0, &[Role::Q, Role::V]));
            job.steps = steps;
            job.samples = 8;
            job.seed = id as u64;
            let ch = LocalChannel::connect(svc.handle(), id as u32, config, job.batch, job.seq);
            let client = ClientModel::from_parts(*config, m.client.clone(), BTreeMap::new(), Box::new(ch))?;
            handles.push(std::thread::spawn(move || -> Result<u64, HarnessError> {
                let mut j = ClientJob::from_config(&job, client)?;
                j.run(&job)?;
                Ok(j.ledger().peak_total())
            }));
        }
        let mut client_bytes = 0;
        for h in handles {
            client_bytes += h.join().map_err(|_| HarnessError::Child("client thread panicked".into()))??;
        }
        let ledger = svc.handle().ledger();
        out.push(ScalingPoint {
            clients: n,
            executor_bytes: ledger.total_excluding_transient(),
            executor_saved_peak: ledger
                .peaks
                .get(&splitserve_core::Category::SavedActivations)
                .copied()
                .unwrap_or(0),
            client_bytes,
        });
        svc.shutdown();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linearity() {
        assert!(is_linear(&[1, 2, 4], &[10, 20, 40]));
        assert!(is_linear(&[1, 2, 4], &[15, 25, 45]));
        assert!(!is_linear(&[1, 2, 4], &[10, 20, 41]));
        assert!(!is_linear(&[1, 2, 4], &[10, 10, 10]));
        assert!(!is_linear(&[1], &[1]));
    }

    #[test]
    fn thirteen_b_shape_matches_its_served_size() {
        // Base weights at 2 bytes per element come to about 26 GB.
        let bytes = formulas::base_weight_bytes(&config_13b(), 2) as f64;
        assert!((bytes / MODEL_BYTES_13B as f64 - 1.0).abs() < 0.05, "{bytes}");
    }
}
