//! Runs scenarios: wall clock in one process, wall clock across processes,
//! or the virtual-clock simulator.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use splitserve_core::client::{ClientJob, ClientModel, JobKind, JobRecord};
use splitserve_core::executor::{BaseExecutor, BatchPolicy, ExecutorMetrics, ExecutorService, PolicyMode};
use splitserve_core::kv::TransferRecord;
use splitserve_core::ledger::LedgerSnapshot;
use splitserve_core::model::{build_client_weights, build_model, checkpoint, AdapterState, ClientWeights};
use splitserve_core::sim::{SimClient, VirtualCluster};
use splitserve_core::transport::{ChannelStats, LayerTransport, LocalChannel, RemoteChannel, TcpServer};
use splitserve_core::{BaseModel, ModelConfig};

use crate::scenario::{ChannelKind, ClientSpec, Clock, ProcessMode, Scenario};
use crate::HarnessError;

/// What one client produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub name: String,
    pub id: u32,
    pub kind: JobKind,
    pub channel: ChannelKind,
    pub records: Vec<JobRecord>,
    pub losses: Vec<f32>,
    pub generated: Vec<Vec<Vec<u32>>>,
    pub transfers: Vec<TransferRecord>,
    pub ledger: Option<LedgerSnapshot>,
    pub peak_total: u64,
    pub stats: ChannelStats,
    /// Adapter after the run.
    pub adapter: Option<AdapterState>,
    pub error: Option<String>,
}

impl JobResult {
    fn failed(spec: &ClientSpec, error: String) -> Self {
        Self {
            name: spec.job.name.clone(),
            id: spec.id,
            kind: spec.job.kind,
            channel: spec.channel,
            records: Vec::new(),
            losses: Vec::new(),
            generated: Vec::new(),
            transfers: Vec::new(),
            ledger: None,
            peak_total: 0,
            stats: ChannelStats::default(),
            adapter: None,
            error: Some(error),
        }
    }

    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn tokens(&self) -> usize {
        self.records.iter().map(|r| r.tokens).sum()
    }

    pub fn output_hashes(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.output_hash).collect()
    }

    pub fn mean_latency_s(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.latency.as_secs_f64()).sum::<f64>() / self.records.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutorReport {
    pub metrics: ExecutorMetrics,
    pub ledger: LedgerSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub policy: PolicyMode,
    pub clock: Clock,
    pub mode: ProcessMode,
    pub clients: Vec<ClientSpec>,
    pub jobs: Vec<JobResult>,
    pub executor: ExecutorReport,
    /// Wall or virtual time from the first client start to the last finish.
    pub elapsed_us: u64,
}

impl VariantResult {
    pub fn tokens(&self) -> usize {
        self.jobs.iter().map(JobResult::tokens).sum()
    }

    /// Client tokens per second over the whole run.
    pub fn throughput(&self) -> f64 {
        if self.elapsed_us == 0 {
            return 0.0;
        }
        self.tokens() as f64 / (self.elapsed_us as f64 * 1e-6)
    }

    pub fn failures(&self) -> usize {
        self.jobs.iter().filter(|j| !j.ok()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: Scenario,
    pub variants: Vec<VariantResult>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub mode: Option<ProcessMode>,
    pub clock: Option<Clock>,
    /// The `splitserve` binary, needed for multi-process runs.
    pub exe: Option<PathBuf>,
}

impl RunOptions {
    /// The scenario with every override applied.
    pub fn apply(&self, scenario: &Scenario) -> Scenario {
        let mut s = scenario.clone();
        if let Some(seed) = self.seed {
            s.reseed(seed);
        }
        if let Some(steps) = self.steps {
            s.set_steps(steps);
        }
        if let Some(mode) = self.mode {
            s.executor.mode = mode;
        }
        if let Some(clock) = self.clock {
            s.executor.clock = clock;
        }
        s
    }
}

/// The model the executor serves: the checkpoint when one is named,
/// otherwise built from the config's seed.
pub fn load_model(s: &Scenario) -> Result<BaseModel, HarnessError> {
    match &s.weights {
        Some(path) => {
            let m = checkpoint::load(path)?;
            if m.config != s.model {
                return Err(HarnessError::Config {
                    origin: path.display().to_string(),
                    message: format!("checkpoint holds {:?}, scenario declares {:?}", m.config, s.model),
                });
            }
            Ok(m)
        }
        None => Ok(build_model(&s.model)?),
    }
}

/// Builds the job `spec` describes on `transport`, runs it and reports.
/// Never panics on job errors; they land in [`JobResult::error`].
pub fn run_client(
    spec: &ClientSpec,
    config: ModelConfig,
    weights: ClientWeights,
    transport: Box<dyn LayerTransport>,
) -> JobResult {
    let attempt = || -> Result<JobResult, splitserve_core::client::ClientError> {
        let model = ClientModel::from_parts(config, weights, BTreeMap::new(), transport)?;
        let mut job = ClientJob::from_config(&spec.job, model)?;
        if spec.init_scale > 0.0 {
            job.adapter_mut().perturb(spec.job.seed ^ 0x5EED, spec.init_scale);
        }
        let out = job.run(&spec.job)?;
        Ok(JobResult {
            name: spec.job.name.clone(),
            id: spec.id,
            kind: spec.job.kind,
            channel: spec.channel,
            records: job.records().to_vec(),
            losses: out.losses,
            generated: out.generated,
            transfers: out.transfers,
            ledger: Some(job.ledger().snapshot()),
            peak_total: job.ledger().peak_total(),
            stats: job.model().transport().stats(),
            adapter: Some(job.adapter().clone()),
            error: None,
        })
    };
    attempt().unwrap_or_else(|e| JobResult::failed(spec, e.to_string()))
}

/// Runs every variant of `scenario` after applying `opts`.
pub fn run(scenario: &Scenario, opts: &RunOptions) -> Result<RunReport, HarnessError> {
    let s = opts.apply(scenario);
    let model = load_model(&s)?;
    let mut variants = Vec::new();
    for (policy, clients) in s.variants() {
        info!("{}: {:?} with {} clients", s.name, policy, clients.len());
        let v = run_variant(&s, &model, policy, clients, opts.exe.as_deref())?;
        variants.push(v);
    }
    Ok(RunReport { scenario: s, variants })
}

pub fn run_variant(
    s: &Scenario,
    model: &BaseModel,
    policy: PolicyMode,
    clients: Vec<ClientSpec>,
    exe: Option<&Path>,
) -> Result<VariantResult, HarnessError> {
    let batch_policy = s.executor.policy(policy);
    match (s.executor.clock, s.executor.mode) {
        (Clock::Virtual, _) => run_virtual(s, model, batch_policy, clients),
        (Clock::Wall, ProcessMode::InProcess) => run_threads(model, batch_policy, clients),
        (Clock::Wall, ProcessMode::MultiProcess) => {
            let exe = exe.ok_or_else(|| HarnessError::Child("multi-process mode needs the splitserve binary".into()))?;
            run_processes(s, exe, batch_policy, clients)
        }
    }
}

fn run_threads(model: &BaseModel, policy: BatchPolicy, clients: Vec<ClientSpec>) -> Result<VariantResult, HarnessError> {
    let svc = ExecutorService::start(BaseExecutor::new(model.base.clone()), policy);
    let server = if clients.iter().any(|c| c.channel == ChannelKind::Remote) {
        Some(TcpServer::bind("127.0.0.1:0", svc.handle())?)
    } else {
        None
    };
    let config = model.config;
    let start = Instant::now();
    // Channels open (and register) before any client starts so that
    // lockstep sees the whole group from the first layer on.
    let mut handles = Vec::with_capacity(clients.len());
    for spec in &clients {
        let transport: Box<dyn LayerTransport> = match (spec.channel, &server) {
            (ChannelKind::Remote, Some(server)) => Box::new(RemoteChannel::connect(server.local_addr(), spec.id, &config)?),
            _ => Box::new(LocalChannel::connect(
                svc.handle(),
                spec.id,
                &config,
                spec.job.batch,
                spec.job.max_request_tokens() / spec.job.batch,
            )),
        };
        let spec = spec.clone();
        let weights = model.client.clone();
        let h = thread::Builder::new()
            .name(format!("client-{}", spec.id))
            .spawn(move || run_client(&spec, config, weights, transport))?;
        handles.push(h);
    }
    let jobs = handles
        .into_iter()
        .zip(&clients)
        .map(|(h, spec)| h.join().unwrap_or_else(|_| JobResult::failed(spec, "client thread panicked".into())))
        .collect();
    let elapsed_us = start.elapsed().as_micros() as u64;
    let executor = ExecutorReport {
        metrics: svc.handle().metrics(),
        ledger: svc.handle().ledger(),
    };
    if let Some(server) = server {
        server.shutdown();
    }
    svc.shutdown();
    Ok(VariantResult {
        policy: policy.mode,
        clock: Clock::Wall,
        mode: ProcessMode::InProcess,
        clients,
        jobs,
        executor,
        elapsed_us,
    })
}

fn run_virtual(s: &Scenario, model: &BaseModel, policy: BatchPolicy, clients: Vec<ClientSpec>) -> Result<VariantResult, HarnessError> {
    let config = model.config;
    let cluster = VirtualCluster::new(config, policy, s.executor.cost());
    let sims = clients
        .iter()
        .map(|spec| {
            let spec = spec.clone();
            let weights = model.client.clone();
            SimClient {
                id: spec.id,
                profile: spec.job.profile,
                work: Box::new(move |ch| run_client(&spec, config, weights, Box::new(ch))) as Box<dyn FnOnce(_) -> _ + Send>,
            }
        })
        .collect();
    let out = cluster.run(BaseExecutor::new(model.base.clone()), sims)?;
    let jobs = out
        .results
        .into_iter()
        .zip(&clients)
        .map(|(r, spec)| r.unwrap_or_else(|msg| JobResult::failed(spec, msg)))
        .collect();
    Ok(VariantResult {
        policy: policy.mode,
        clock: Clock::Virtual,
        mode: ProcessMode::InProcess,
        clients,
        jobs,
        executor: ExecutorReport {
            metrics: out.metrics,
            ledger: out.executor_ledger,
        },
        elapsed_us: out.end.as_micros() as u64,
    })
}

/// A `serve` child process. Dropping it closes its stdin, which stops it.
pub struct ServeProcess {
    child: Child,
    stdout: BufReader<std::process::ChildStdout>,
    pub addr: String,
}

impl ServeProcess {
    pub fn spawn(exe: &Path, scenario_json: &Path, policy: PolicyMode) -> Result<Self, HarnessError> {
        let mut child = Command::new(exe)
            .arg("serve")
            .arg("--scenario")
            .arg(scenario_json)
            .arg("--policy")
            .arg(policy_name(policy))
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let mut stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut line = String::new();
        stdout.read_line(&mut line)?;
        let addr = line
            .trim()
            .strip_prefix("listening ")
            .ok_or_else(|| HarnessError::Child(format!("serve did not start: {line:?}")))?
            .to_string();
        Ok(Self { child, stdout, addr })
    }

    /// The executor's metrics and ledger so far.
    pub fn stats(&mut self) -> Result<ExecutorReport, HarnessError> {
        let stdin = self.child.stdin.as_mut().ok_or_else(|| HarnessError::Child("serve stdin closed".into()))?;
        stdin.write_all(b"stats\n")?;
        stdin.flush()?;
        let mut line = String::new();
        self.stdout.read_line(&mut line)?;
        Ok(serde_json::from_str(&line)?)
    }

    pub fn stop(mut self) -> Result<(), HarnessError> {
        drop(self.child.stdin.take());
        self.child.wait()?;
        Ok(())
    }
}

impl Drop for ServeProcess {
    fn drop(&mut self) {
        drop(self.child.stdin.take());
        if matches!(self.child.try_wait(), Ok(None)) {
            let _ = self.child.kill();
        }
        let _ = self.child.wait();
    }
}

pub fn policy_name(p: PolicyMode) -> &'static str {
    match p {
        PolicyMode::NoLockstep => "no_lockstep",
        PolicyMode::Lockstep => "lockstep",
        PolicyMode::Opportunistic => "opportunistic",
    }
}

/// Starts a `client` child process for `spec` against `addr`.
pub fn spawn_client(exe: &Path, scenario_json: &Path, spec: &ClientSpec, addr: &str) -> Result<Child, HarnessError> {
    Ok(Command::new(exe)
        .arg("client")
        .arg("--scenario")
        .arg(scenario_json)
        .arg("--endpoint")
        .arg(addr)
        .arg("--spec")
        .arg(serde_json::to_string(spec)?)
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()?)
}

/// Collects a client child's result; a crash becomes a failed result.
pub fn collect_client(child: Child, spec: &ClientSpec) -> JobResult {
    match child.wait_with_output() {
        Ok(out) => {
            let stdout = String::from_utf8_lossy(&out.stdout);
            match stdout.lines().last().map(serde_json::from_str::<JobResult>) {
                Some(Ok(r)) => r,
                _ => JobResult::failed(
                    spec,
                    format!("client exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr).trim()),
                ),
            }
        }
        Err(e) => JobResult::failed(spec, e.to_string()),
    }
}

/// Writes `s` where child processes can read it back.
pub fn write_scenario_json(s: &Scenario, dir: &Path) -> Result<PathBuf, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.scenario.json", s.name));
    std::fs::write(&path, serde_json::to_string(s)?)?;
    Ok(path)
}

fn run_processes(s: &Scenario, exe: &Path, policy: BatchPolicy, clients: Vec<ClientSpec>) -> Result<VariantResult, HarnessError> {
    let dir = std::env::temp_dir().join(format!("splitserve-{}", std::process::id()));
    let json = write_scenario_json(s, &dir)?;
    let mut serve = ServeProcess::spawn(exe, &json, policy.mode)?;
    let start = Instant::now();
    let children = clients
        .iter()
        .map(|spec| spawn_client(exe, &json, spec, &serve.addr))
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<JobResult> = children
        .into_iter()
        .zip(&clients)
        .map(|(c, spec)| collect_client(c, spec))
        .collect();
    let elapsed_us = start.elapsed().as_micros() as u64;
    let executor = serve.stats()?;
    serve.stop()?;
    if let Err(e) = std::fs::remove_dir_all(&dir) {
        warn!("could not remove {}: {e}", dir.display());
    }
    Ok(VariantResult {
        policy: policy.mode,
        clock: Clock::Wall,
        mode: ProcessMode::MultiProcess,
        clients: clients
            .into_iter()
            .map(|mut c| {
                c.channel = ChannelKind::Remote;
                c
            })
            .collect(),
        jobs,
        executor,
        elapsed_us,
    })
}

/// Body of the `serve` verb: executor plus TCP front end until stdin closes.
pub fn serve(s: &Scenario, policy: PolicyMode, listen: &str) -> Result<(), HarnessError> {
    let model = load_model(s)?;
    let svc = ExecutorService::start(BaseExecutor::new(model.base), s.executor.policy(policy));
    let server = TcpServer::bind(listen, svc.handle())?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "listening {}", server.local_addr())?;
    out.flush()?;
    for line in std::io::stdin().lock().lines() {
        if line?.trim() == "stats" {
            let report = ExecutorReport {
                metrics: svc.handle().metrics(),
                ledger: svc.handle().ledger(),
            };
            writeln!(out, "{}", serde_json::to_string(&report)?)?;
            out.flush()?;
        }
    }
    server.shutdown();
    svc.shutdown();
    Ok(())
}

/// Body of the `client` verb: one job over a remote channel.
pub fn client(s: &Scenario, spec: &ClientSpec, endpoint: &str) -> Result<JobResult, HarnessError> {
    let weights = match &s.weights {
        Some(path) => checkpoint::load_client(path)?.1,
        None => build_client_weights(&s.model)?,
    };
    let ch = RemoteChannel::connect(endpoint, spec.id, &s.model)?;
    let mut spec = spec.clone();
    spec.channel = ChannelKind::Remote;
    Ok(run_client(&spec, s.model, weights, Box::new(ch)))
}
