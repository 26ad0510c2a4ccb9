//! Scenario files: a model, an executor and a set of client jobs.
//!
//! ```toml
//! name = "mixed"
//!
//! [model]
//! n_layers = 2
//! d_model = 64
//! n_heads = 4
//! d_ff = 128
//! vocab_size = 64
//! max_seq = 32
//! seed = 7
//!
//! [executor]
//! policy = "opportunistic"   # "no_lockstep" | "lockstep" | "opportunistic"
//! clock = "wall"             # or "virtual"
//! mode = "in_process"        # or "multi_process"
//!
//! [sweep]
//! policies = ["no_lockstep", "lockstep", "opportunistic"]
//!
//! [[jobs]]
//! name = "chat"
//! kind = "inference"
//! replicas = 6
//! seq = 16
//! gen_tokens = 8
//! steps = 1
//! channel = "remote"
//! ```
//!
//! Every job table accepts the fields of a client job plus `channel`,
//! `replicas` and `init_scale`.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use splitserve_core::client::JobConfig;
use splitserve_core::executor::{BatchPolicy, PolicyMode};
use splitserve_core::sim::ExecutorCost;
use splitserve_core::ModelConfig;

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    #[default]
    Wall,
    Virtual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessMode {
    #[default]
    InProcess,
    MultiProcess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    /// Shared buffer inside the executor's process.
    #[default]
    Local,
    /// Framed byte stream over TCP.
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSection {
    pub per_batch_us: f64,
    pub per_token_us: f64,
}

impl Default for CostSection {
    fn default() -> Self {
        let c = ExecutorCost::default();
        Self {
            per_batch_us: c.per_batch_us,
            per_token_us: c.per_token_us,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutorSection {
    pub policy: PolicyMode,
    pub wait_per_token_us: u64,
    pub wait_cap_us: u64,
    pub max_batch_tokens: usize,
    pub clock: Clock,
    pub mode: ProcessMode,
    /// Virtual-clock service time model.
    pub cost: CostSection,
}

impl Default for ExecutorSection {
    fn default() -> Self {
        let p = BatchPolicy::default();
        Self {
            policy: p.mode,
            wait_per_token_us: p.wait_per_token.as_micros() as u64,
            wait_cap_us: p.wait_cap.as_micros() as u64,
            max_batch_tokens: p.max_batch_tokens,
            clock: Clock::Wall,
            mode: ProcessMode::InProcess,
            cost: CostSection::default(),
        }
    }
}

impl ExecutorSection {
    pub fn policy(&self, mode: PolicyMode) -> BatchPolicy {
        BatchPolicy {
            mode,
            wait_per_token: Duration::from_micros(self.wait_per_token_us),
            wait_cap: Duration::from_micros(self.wait_cap_us),
            max_batch_tokens: self.max_batch_tokens,
        }
    }

    pub fn cost(&self) -> ExecutorCost {
        ExecutorCost {
            per_batch_us: self.cost.per_batch_us,
            per_token_us: self.cost.per_token_us,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep {
    /// Run once per policy; empty means the executor's policy only.
    pub policies: Vec<PolicyMode>,
    /// Run once per client count, cycling through the expanded job list;
    /// empty means every job once.
    pub clients: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobEntry {
    pub channel: ChannelKind,
    pub replicas: usize,
    /// Uniform perturbation applied to the fresh adapter, so that untrained
    /// adapters still change the output.
    pub init_scale: f32,
    #[serde(flatten)]
    pub job: JobConfig,
}

// Hand-written because `flatten` would swallow unknown keys: the entry's own
// keys are split off and the rest must deserialize as a strict `JobConfig`.
impl<'de> Deserialize<'de> for JobEntry {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        fn take<T: serde::de::DeserializeOwned, E: Error>(t: &mut toml::Table, key: &str) -> Result<Option<T>, E> {
            t.remove(key)
                .map(|v| v.try_into().map_err(|e: toml::de::Error| E::custom(format!("{key}: {}", e.message()))))
                .transpose()
        }
        let mut table = toml::Table::deserialize(d)?;
        let channel = take(&mut table, "channel")?.unwrap_or_default();
        let replicas = take(&mut table, "replicas")?.unwrap_or_else(one);
        let init_scale = take(&mut table, "init_scale")?.unwrap_or(0.0);
        let job = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| D::Error::custom(e.message()))?;
        Ok(Self {
            channel,
            replicas,
            init_scale,
            job,
        })
    }
}

fn one() -> usize {
    1
}

/// One concrete client of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSpec {
    pub id: u32,
    pub channel: ChannelKind,
    pub init_scale: f32,
    pub job: JobConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub model: ModelConfig,
    /// Checkpoint the executor and clients load instead of building the
    /// model from its seed. Relative paths resolve against the scenario file.
    #[serde(default)]
    pub weights: Option<PathBuf>,
    #[serde(default)]
    pub executor: ExecutorSection,
    #[serde(default)]
    pub sweep: Sweep,
    #[serde(default)]
    pub jobs: Vec<JobEntry>,
}

impl Scenario {
    pub fn parse(text: &str, origin: &str) -> Result<Self, HarnessError> {
        let s: Scenario = toml::from_str(text).map_err(|e| HarnessError::Config {
            origin: origin.to_string(),
            message: e.to_string(),
        })?;
        s.validate().map_err(|message| HarnessError::Config {
            origin: origin.to_string(),
            message,
        })?;
        Ok(s)
    }

    /// Reads a `.toml` scenario, or the `.json` form the harness hands to
    /// child processes.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config {
            origin: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut s = if path.extension().is_some_and(|e| e == "json") {
            let s: Scenario = serde_json::from_str(&text).map_err(|e| HarnessError::Config {
                origin: path.display().to_string(),
                message: e.to_string(),
            })?;
            s.validate().map_err(|message| HarnessError::Config {
                origin: path.display().to_string(),
                message,
            })?;
            s
        } else {
            Self::parse(&text, &path.display().to_string())?
        };
        if let Some(w) = &s.weights {
            if w.is_relative() {
                let dir = path.parent().unwrap_or(Path::new("."));
                s.weights = Some(dir.join(w));
            }
        }
        Ok(s)
    }

    fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        let mut names = std::collections::BTreeSet::new();
        for entry in &self.jobs {
            if entry.replicas == 0 {
                return Err(format!("job {}: replicas must be positive", entry.job.name));
            }
            if !names.insert(entry.job.name.as_str()) {
                return Err(format!("duplicate job name {}", entry.job.name));
            }
            entry.job.validate(&self.model).map_err(|e| e.to_string())?;
        }
        if self.sweep.clients.contains(&0) {
            return Err("sweep.clients entries must be positive".into());
        }
        if !self.sweep.clients.is_empty() && self.jobs.is_empty() {
            return Err("sweep.clients needs at least one job".into());
        }
        if self.executor.clock == Clock::Virtual && self.executor.mode == ProcessMode::MultiProcess {
            return Err("the virtual clock runs in-process only".into());
        }
        Ok(())
    }

    /// Replaces the model seed and shifts every job seed by `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.model.seed = seed;
        for e in &mut self.jobs {
            e.job.seed = e.job.seed.wrapping_add(seed);
        }
    }

    /// Jobs with replicas unrolled: replica `i` of `name` becomes `name-i`
    /// with its seed shifted by `i`.
    pub fn expanded(&self) -> Vec<ClientSpec> {
        let mut out = Vec::new();
        for e in &self.jobs {
            for i in 0..e.replicas {
                let mut job = e.job.clone();
                if e.replicas > 1 {
                    job.name = format!("{}-{i}", e.job.name);
                    job.seed = job.seed.wrapping_add(i as u64);
                }
                out.push(ClientSpec {
                    id: out.len() as u32,
                    channel: e.channel,
                    init_scale: e.init_scale,
                    job,
                });
            }
        }
        out
    }

    /// `(policy, clients)` for every run the sweep asks for.
    pub fn variants(&self) -> Vec<(PolicyMode, Vec<ClientSpec>)> {
        let policies = if self.sweep.policies.is_empty() {
            vec![self.executor.policy]
        } else {
            self.sweep.policies.clone()
        };
        let all = self.expanded();
        let sets: Vec<Vec<ClientSpec>> = if self.sweep.clients.is_empty() {
            vec![all]
        } else {
            self.sweep
                .clients
                .iter()
                .map(|&n| {
                    (0..n)
                        .map(|i| {
                            let mut c = all[i % all.len()].clone();
                            if i >= all.len() {
                                c.job.name = format!("{}-r{}", c.job.name, i / all.len());
                                c.job.seed = c.job.seed.wrapping_add(i as u64);
                            }
                            c.id = i as u32;
                            c
                        })
                        .collect()
                })
                .collect()
        };
        policies
            .iter()
            .flat_map(|&p| sets.iter().map(move |s| (p, s.clone())))
            .collect()
    }

    /// Forces every job to `steps` iterations.
    pub fn set_steps(&mut self, steps: usize) {
        for e in &mut self.jobs {
            e.job.steps = steps;
        }
    }
}
