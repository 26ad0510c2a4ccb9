//! Oracle checks behind `verify`: split logits against the monolithic model,
//! split gradients against finite differences, ledgers against closed forms,
//! and every client of a shared run against its own solo run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use splitserve_core::client::{ClientModel, JobKind, Tape};
use splitserve_core::executor::{BaseExecutor, BatchPolicy, ExecutorService, PolicyMode};
use splitserve_core::ledger::{formulas, Category};
use splitserve_core::model::{build_model, reference_forward, AdapterGrads, AdapterState};
use splitserve_core::oracle::{relative_error, Oracle};
use splitserve_core::privacy::{precompute_noise, PrivacyConfig};
use splitserve_core::tensor::{cross_entropy, Tensor};
use splitserve_core::transport::{LayerTransport, LocalChannel, RemoteChannel, TcpServer};
use splitserve_core::{BaseModel, LayerAddress, TokenBatch};

use crate::harness::{self, policy_name, JobResult, RunReport, VariantResult};
use crate::scenario::{ChannelKind, ClientSpec, Clock, ProcessMode, Scenario};
use crate::HarnessError;

pub const LOGIT_TOLERANCE: f32 = 1e-5;
pub const BLIND_TOLERANCE: f32 = 1e-4;
pub const GRADIENT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
    /// Reported but not judged (wall-clock timing, for instance).
    Info,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub outcome: Outcome,
    pub detail: String,
}

impl Check {
    pub fn judge(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            outcome: if passed { Outcome::Pass } else { Outcome::Fail },
            detail: detail.into(),
        }
    }

    pub fn info(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            outcome: Outcome::Info,
            detail: detail.into(),
        }
    }

    pub fn failed(&self) -> bool {
        self.outcome == Outcome::Fail
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.outcome {
            Outcome::Pass => "PASS",
            Outcome::Fail => "FAIL",
            Outcome::Info => "INFO",
        };
        write!(f, "{tag}  {:<44} {}", self.name, self.detail)
    }
}

/// Fixed-width table of `checks`.
pub fn table(checks: &[Check]) -> String {
    let mut s = String::new();
    for c in checks {
        s.push_str(&c.to_string());
        s.push('\n');
    }
    let failed = checks.iter().filter(|c| c.failed()).count();
    s.push_str(&format!("{} checks, {failed} failed\n", checks.len()));
    s
}

/// A client model over a fresh executor serving `served`, through a local
/// or remote channel. The executor and server stay alive with the client.
pub struct Probe {
    pub client: ClientModel,
    _server: Option<TcpServer>,
    _svc: ExecutorService,
}

impl Probe {
    pub fn new(served: &BaseModel, channel: ChannelKind, batch: usize, seq: usize) -> Result<Self, HarnessError> {
        let svc = ExecutorService::start(BaseExecutor::new(served.base.clone()), BatchPolicy::with_mode(PolicyMode::NoLockstep));
        let (transport, server): (Box<dyn LayerTransport>, _) = match channel {
            ChannelKind::Local => (Box::new(LocalChannel::connect(svc.handle(), 0, &served.config, batch, seq)), None),
            ChannelKind::Remote => {
                let server = TcpServer::bind("127.0.0.1:0", svc.handle())?;
                let ch = RemoteChannel::connect(server.local_addr(), 0, &served.config)?;
                (Box::new(ch), Some(server))
            }
        };
        let client = ClientModel::from_parts(served.config, served.client.clone(), BTreeMap::new(), transport)?;
        Ok(Self {
            client,
            _server: server,
            _svc: svc,
        })
    }

    /// Blinds every later forward with a fresh noise set covering `tokens`.
    pub fn blind(&mut self, params: &PrivacyConfig, t_max: usize) -> Result<(), HarnessError> {
        let layers = self.client.virtual_layers();
        let cfg = *self.client.config();
        let noise = precompute_noise(self.client.transport_mut(), &cfg, &layers, t_max, params)
            .map_err(splitserve_core::client::ClientError::from)?;
        self.client.set_noise(noise);
        Ok(())
    }
}

/// Logits of the split path with the executor serving `served`.
pub fn split_logits(served: &BaseModel, adapter: &AdapterState, tokens: &TokenBatch, channel: ChannelKind) -> Result<Tensor, HarnessError> {
    let mut p = Probe::new(served, channel, tokens.batch, tokens.seq)?;
    Ok(p.client.forward(Some(adapter), tokens, None, None)?)
}

/// Adapter gradients of the mean cross-entropy through the split path.
pub fn split_gradients(served: &BaseModel, adapter: &AdapterState, tokens: &TokenBatch, targets: &[u32]) -> Result<AdapterGrads, HarnessError> {
    let mut p = Probe::new(served, ChannelKind::Local, tokens.batch, tokens.seq)?;
    let mut tape = Tape::default();
    let logits = p.client.forward(Some(adapter), tokens, None, Some(&mut tape))?;
    let (_, grad) = cross_entropy(&logits, targets)?;
    Ok(p.client.backward(adapter, &tape, &grad)?)
}

/// Norm-wise relative error between `grads` and central differences of the
/// double-precision reference at `per_tensor` sampled coordinates per tensor.
pub fn sampled_gradient_error(
    reference: &BaseModel,
    adapter: &AdapterState,
    grads: &AdapterGrads,
    tokens: &TokenBatch,
    targets: &[u32],
    per_tensor: usize,
) -> f64 {
    let mut oracle = Oracle::new(reference, adapter);
    let fd = oracle.finite_difference_sampled(tokens, targets, 1e-4, per_tensor, 0x9E37_79B9);
    let (mut want, mut got) = (Vec::new(), Vec::new());
    for (key, i, g) in fd {
        want.push(g);
        got.push(grads.get(&key).map_or(0.0, |t: &Tensor| f64::from(t.data()[i])));
    }
    relative_error(&got, &want)
}

fn eval_batch(spec: &ClientSpec, s: &Scenario) -> TokenBatch {
    match spec.job.kind {
        JobKind::Finetune => spec.job.training_batch(&spec.job.copy_dataset(&s.model), 0).0,
        JobKind::Inference => spec.job.prompt(&s.model, 0),
    }
}

fn label(vi: usize, v: &VariantResult) -> String {
    format!("v{vi}/{}/{}c", policy_name(v.policy), v.jobs.len())
}

/// Every check for a finished run.
pub fn verify(report: &RunReport, exe: Option<&std::path::Path>) -> Vec<Check> {
    let s = &report.scenario;
    let mut checks = Vec::new();
    let reference = match build_model(&s.model) {
        Ok(m) => m,
        Err(e) => return vec![Check::judge("reference model", false, e.to_string())],
    };
    let served = match harness::load_model(s) {
        Ok(m) => m,
        Err(e) => return vec![Check::judge("equivalence/weights", false, format!("served weights unreadable: {e}"))],
    };
    if report.variants.iter().all(|v| v.jobs.is_empty()) {
        checks.push(Check::judge("scenario", true, "no clients: nothing to check"));
    }
    let mut solo: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    let mut seen_jobs = BTreeSet::new();
    for (vi, v) in report.variants.iter().enumerate() {
        let tag = label(vi, v);
        checks.push(executor_check(&tag, v, &served));
        for (spec, job) in v.clients.iter().zip(&v.jobs) {
            let name = format!("{tag}/{}", job.name);
            if let Some(e) = &job.error {
                checks.push(Check::judge(format!("{name}/run"), false, e.clone()));
                continue;
            }
            checks.push(equivalence_check(&name, s, spec, job, &served, &reference));
            checks.extend(ledger_check(&name, s, spec, job));
            let first = seen_jobs.insert(job.name.clone());
            if first && spec.job.kind == JobKind::Finetune {
                checks.push(gradient_check(&name, s, spec, job, &served, &reference));
            }
            if first && spec.job.privacy.enabled {
                checks.push(privacy_check(&name, s, spec, job, &served));
            }
        }
        if v.jobs.len() > 1 && v.failures() == 0 {
            checks.push(solo_check(&tag, s, v, &served, exe, &mut solo));
        }
    }
    checks.extend(policy_checks(report));
    checks
}

fn executor_check(tag: &str, v: &VariantResult, served: &BaseModel) -> Check {
    let l = &v.executor.ledger;
    let saved = l.peaks.get(&Category::SavedActivations).copied().unwrap_or(0);
    let ok = saved == 0
        && l.get(Category::Weights) == served.base.nbytes()
        && l.get(Category::Adapter) == 0
        && l.get(Category::KvCache) == 0
        && l.get(Category::Optimizer) == 0;
    Check::judge(
        format!("{tag}/executor-stateless"),
        ok,
        format!(
            "weights {} B (base {} B), saved-activation peak {saved} B, non-transient {} B",
            l.get(Category::Weights),
            served.base.nbytes(),
            l.total_excluding_transient()
        ),
    )
}

fn equivalence_check(name: &str, s: &Scenario, spec: &ClientSpec, job: &JobResult, served: &BaseModel, reference: &BaseModel) -> Check {
    let Some(adapter) = &job.adapter else {
        return Check::judge(format!("{name}/equivalence"), false, "no adapter reported");
    };
    let tokens = eval_batch(spec, s);
    let result = split_logits(served, adapter, &tokens, job.channel).and_then(|split| {
        let want = reference_forward(reference, Some(adapter), &tokens, None)?;
        Ok(split.max_abs_diff(&want)?)
    });
    match result {
        Ok(err) => Check::judge(
            format!("{name}/equivalence"),
            err <= LOGIT_TOLERANCE,
            format!("max |split - monolithic| = {err:.2e} over {:?} channel", job.channel),
        ),
        Err(e) => Check::judge(format!("{name}/equivalence"), false, e.to_string()),
    }
}

fn gradient_check(name: &str, s: &Scenario, spec: &ClientSpec, job: &JobResult, served: &BaseModel, reference: &BaseModel) -> Check {
    let Some(adapter) = &job.adapter else {
        return Check::judge(format!("{name}/gradients"), false, "no adapter reported");
    };
    // One short sequence keeps the double-precision sweep cheap; the
    // perturbation makes every adapter tensor's gradient non-zero.
    let mut adapter = adapter.clone();
    adapter.perturb(spec.job.seed ^ 0xFD, 0.05);
    let seq = spec.job.seq.min(8);
    let ids = spec.job.copy_dataset(&s.model)[0][..seq].to_vec();
    let tokens = TokenBatch::new(1, seq, ids.clone()).expect("shape");
    let result = split_gradients(served, &adapter, &tokens, &ids)
        .map(|g| sampled_gradient_error(reference, &adapter, &g, &tokens, &ids, 8));
    match result {
        Ok(err) => Check::judge(
            format!("{name}/gradients"),
            err <= GRADIENT_TOLERANCE,
            format!("relative error vs finite differences {err:.2e}"),
        ),
        Err(e) => Check::judge(format!("{name}/gradients"), false, e.to_string()),
    }
}

fn ledger_check(name: &str, s: &Scenario, spec: &ClientSpec, job: &JobResult) -> Option<Check> {
    let ledger = job.ledger.as_ref()?;
    let c = &s.model;
    let j = &spec.job;
    let peak = |cat| ledger.peaks.get(&cat).copied().unwrap_or(0);
    if j.privacy.enabled {
        let t = match j.kind {
            JobKind::Finetune => j.seq,
            JobKind::Inference => j.seq + j.gen_tokens,
        };
        let t_max = (j.batch * t.min(c.max_seq)) as u64;
        let widths: u64 = c
            .layer_addresses()
            .iter()
            .map(|a: &LayerAddress| {
                let (i, o) = c.dims(a.role);
                (i + o) as u64
            })
            .sum();
        let want = j.privacy.k as u64 * t_max * widths * 4;
        return Some(Check::judge(
            format!("{name}/ledger"),
            peak(Category::PrivacyNoise) == want,
            format!("noise {} B, formula {want} B", peak(Category::PrivacyNoise)),
        ));
    }
    match (j.kind, job.channel) {
        (JobKind::Finetune, ChannelKind::Local) if j.steps > 0 => {
            let want = formulas::finetune_job_peak_bytes(c, &j.adapter, j.batch, j.seq, 4);
            Some(Check::judge(
                format!("{name}/ledger"),
                job.peak_total == want,
                format!("peak {} B, formula {want} B", job.peak_total),
            ))
        }
        (JobKind::Inference, _) if j.steps > 0 && j.gen_tokens > 0 => {
            let want = formulas::kv_cache_bytes(c, j.batch, j.seq - 1 + j.gen_tokens, 4);
            Some(Check::judge(
                format!("{name}/ledger"),
                peak(Category::KvCache) == want && ledger.get(Category::KvCache) == 0,
                format!("kv peak {} B, formula {want} B", peak(Category::KvCache)),
            ))
        }
        _ => None,
    }
}

fn privacy_check(name: &str, s: &Scenario, spec: &ClientSpec, job: &JobResult, served: &BaseModel) -> Check {
    let adapter = job.adapter.clone().expect("ok jobs report adapters");
    let tokens = eval_batch(spec, s);
    let result = (|| -> Result<f32, HarnessError> {
        let mut p = Probe::new(served, ChannelKind::Local, tokens.batch, tokens.seq)?;
        let plain = p.client.forward(Some(&adapter), &tokens, None, None)?;
        p.blind(&spec.job.privacy, tokens.tokens())?;
        let blinded = p.client.forward(Some(&adapter), &tokens, None, None)?;
        Ok(blinded.max_abs_diff(&plain)?)
    })();
    match result {
        Ok(err) => Check::judge(
            format!("{name}/privacy"),
            err <= BLIND_TOLERANCE,
            format!("max |blinded - plain| = {err:.2e}"),
        ),
        Err(e) => Check::judge(format!("{name}/privacy"), false, e.to_string()),
    }
}

/// Each client's outputs in the shared run against the same client alone.
fn solo_check(
    tag: &str,
    s: &Scenario,
    v: &VariantResult,
    served: &BaseModel,
    exe: Option<&std::path::Path>,
    cache: &mut BTreeMap<String, Vec<u64>>,
) -> Check {
    let mut solo_s = s.clone();
    if v.mode == ProcessMode::MultiProcess && exe.is_none() {
        solo_s.executor.mode = ProcessMode::InProcess;
    }
    let mut mismatched = Vec::new();
    for (spec, job) in v.clients.iter().zip(&v.jobs) {
        if !cache.contains_key(&job.name) {
            let mut one = spec.clone();
            one.id = 0;
            match harness::run_variant(&solo_s, served, PolicyMode::NoLockstep, vec![one], exe) {
                Ok(r) if r.failures() == 0 => {
                    cache.insert(job.name.clone(), r.jobs[0].output_hashes());
                }
                Ok(r) => return Check::judge(format!("{tag}/solo-equivalence"), false, format!("solo run failed: {:?}", r.jobs[0].error)),
                Err(e) => return Check::judge(format!("{tag}/solo-equivalence"), false, e.to_string()),
            }
        }
        if cache[&job.name] != job.output_hashes() {
            mismatched.push(job.name.clone());
        }
    }
    Check::judge(
        format!("{tag}/solo-equivalence"),
        mismatched.is_empty(),
        if mismatched.is_empty() {
            format!("{} clients bitwise equal to solo runs", v.jobs.len())
        } else {
            format!("differ from solo: {}", mismatched.join(", "))
        },
    )
}

/// Smallest client by tokens per request.
fn smallest(v: &VariantResult) -> Option<usize> {
    (0..v.clients.len()).min_by_key(|&i| v.clients[i].job.max_request_tokens())
}

/// Batch-size, latency and throughput ordering across policies for runs
/// over the same client set. Judged under the virtual clock only.
pub fn policy_checks(report: &RunReport) -> Vec<Check> {
    let mut out = Vec::new();
    let mut by_size: BTreeMap<usize, BTreeMap<&'static str, &VariantResult>> = BTreeMap::new();
    for v in &report.variants {
        by_size.entry(v.jobs.len()).or_default().insert(policy_name(v.policy), v);
    }
    for (n, runs) in by_size {
        let (Some(nl), Some(ls), Some(op)) = (runs.get("no_lockstep"), runs.get("lockstep"), runs.get("opportunistic")) else {
            continue;
        };
        if n < 2 {
            continue;
        }
        let Some(small) = smallest(op) else { continue };
        let batch = [nl, ls, op].map(|v| v.executor.metrics.mean_batch_size());
        let lat = [ls, op].map(|v| v.jobs[small].mean_latency_s());
        let tput = [nl, op].map(|v| v.throughput());
        let detail = format!(
            "batch nl/ls/op {:.2}/{:.2}/{:.2}; smallest-client latency ls/op {:.3e}/{:.3e} s; throughput nl/op {:.0}/{:.0} tok/s",
            batch[0], batch[1], batch[2], lat[0], lat[1], tput[0], tput[1]
        );
        let ok = batch[0] == 1.0 && batch[2] > 1.0 && lat[1] <= lat[0] && tput[1] >= tput[0];
        let name = format!("policy-ordering/{n}c");
        out.push(if op.clock == Clock::Virtual {
            Check::judge(name, ok, detail)
        } else {
            Check::info(name, format!("wall clock, not judged: {detail}"))
        });
    }
    out
}
