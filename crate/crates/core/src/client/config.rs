use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kv::Placement;
use crate::model::{AdapterSpec, ModelConfig, ModelError, Role, TokenBatch};
use crate::optim::OptimizerConfig;
use crate::privacy::PrivacyConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Inference,
    Finetune,
}

/// Client-side cost charged per layer call when a job runs inside the
/// simulator: `per_call_us + per_token_us × tokens` of virtual time before
/// each request. Ignored by real channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientProfile {
    pub per_call_us: f64,
    pub per_token_us: f64,
}

impl Default for ClientProfile {
    fn default() -> Self {
        Self {
            per_call_us: 50.0,
            per_token_us: 1.0,
        }
    }
}

/// One client job.
///
/// ```toml
/// name = "ft-0"
/// kind = "finetune"          # or "inference"
/// batch = 2
/// seq = 16                   # training length, or prompt length
/// steps = 20                 # train steps, or generate rounds
/// gen_tokens = 8             # inference only
/// placement = "offloaded"    # KV cache residency: "fast" | "offloaded"
/// seed = 1
/// samples = 32               # size of the copy-task dataset
///
/// [adapter]
/// method = "lora"            # or "ia3"
/// rank = 8
/// alpha = 16.0
/// targets = ["q", "v"]
///
/// [optimizer]
/// kind = "adam"              # or "sgd"
/// lr = 0.01
///
/// [privacy]
/// enabled = true
/// k = 2
/// scale = 1.0
/// seed = 7
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    pub name: String,
    pub kind: JobKind,
    #[serde(default = "default_adapter")]
    pub adapter: AdapterSpec,
    #[serde(default = "one")]
    pub batch: usize,
    pub seq: usize,
    #[serde(default)]
    pub steps: usize,
    #[serde(default)]
    pub gen_tokens: usize,
    #[serde(default = "default_placement")]
    pub placement: Placement,
    #[serde(default)]
    pub privacy: PrivacyConfig,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub profile: ClientProfile,
}

fn default_adapter() -> AdapterSpec {
    AdapterSpec::lora(8, 16.0, &[Role::Q, Role::V])
}

fn one() -> usize {
    1
}

fn default_placement() -> Placement {
    Placement::Fast
}

fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig::adam(1e-2)
}

fn default_samples() -> usize {
    32
}

fn random_ids(n: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

impl JobConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(format!("job {}: {m}", self.name)));
        if self.batch == 0 || self.seq == 0 {
            return bad("batch and seq must be positive".into());
        }
        let need = match self.kind {
            JobKind::Finetune => self.seq,
            JobKind::Inference => self.seq + self.gen_tokens,
        };
        if need > model.max_seq {
            return bad(format!("needs {need} positions, model has {}", model.max_seq));
        }
        if self.kind == JobKind::Finetune && self.samples == 0 {
            return bad("samples must be positive".into());
        }
        Ok(())
    }

    /// Most tokens this job puts in one request.
    pub fn max_request_tokens(&self) -> usize {
        match self.kind {
            JobKind::Finetune => self.batch * self.seq,
            JobKind::Inference => self.batch * self.seq.saturating_sub(1).max(1),
        }
    }

    /// The fixed copy-task dataset: `samples` random sequences whose target
    /// at every position is the token at that position.
    pub fn copy_dataset(&self, model: &ModelConfig) -> Vec<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xC0FF_EE00);
        (0..self.samples)
            .map(|_| random_ids(self.seq, model.vocab_size, &mut rng))
            .collect()
    }

    /// Batch `step` of the copy task: consecutive samples, wrapping around.
    pub fn training_batch(&self, dataset: &[Vec<u32>], step: usize) -> (TokenBatch, Vec<u32>) {
        let mut ids = Vec::with_capacity(self.batch * self.seq);
        for i in 0..self.batch {
            ids.extend_from_slice(&dataset[(step * self.batch + i) % dataset.len()]);
        }
        let targets = ids.clone();
        (TokenBatch::new(self.batch, self.seq, ids).expect("shape"), targets)
    }

    /// Prompt for generate round `round`.
    pub fn prompt(&self, model: &ModelConfig, round: usize) -> TokenBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(round as u64 + 1);
        TokenBatch::new(self.batch, self.seq, random_ids(self.batch * self.seq, model.vocab_size, &mut rng))
            .expect("shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AdapterMethod;

    #[test]
    fn parses_documented_example() {
        let text = r#"
            name = "ft-0"
            kind = "finetune"
            batch = 2
            seq = 16
            steps = 20
            placement = "offloaded"
            seed = 1

            [adapter]
            method = "lora"
            rank = 8
            alpha = 16.0
            targets = ["q", "v"]

            [optimizer]
            kind = "sgd"
            lr = 0.5

            [privacy]
            enabled = true
            k = 3
        "#;
        let j: JobConfig = toml_like(text);
        assert_eq!(j.kind, JobKind::Finetune);
        assert_eq!(j.adapter.method, AdapterMethod::Lora { rank: 8, alpha: 16.0 });
        assert!(j.adapter.targets.contains(&Role::V));
        assert_eq!(j.placement, Placement::Offloaded);
        assert_eq!(j.optimizer, OptimizerConfig::Sgd { lr: 0.5 });
        assert!(j.privacy.enabled);
        assert_eq!(j.privacy.k, 3);
        assert_eq!(j.privacy.scale, 1.0);
        assert_eq!(j.samples, 32);
    }

    // The core crate carries no TOML dependency; round-trip through JSON
    // after a tiny hand conversion of this flat example instead.
    fn toml_like(text: &str) -> JobConfig {
        let mut root = serde_json::Map::new();
        let mut section: Option<String> = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.to_string());
                root.insert(name.to_string(), serde_json::Value::Object(Default::default()));
                continue;
            }
            let (k, v) = line.split_once('=').unwrap();
            let v = v.trim().replace('\'', "\"");
            let value: serde_json::Value = serde_json::from_str(&v).unwrap();
            let target = match &section {
                Some(s) => root.get_mut(s).unwrap().as_object_mut().unwrap(),
                None => &mut root,
            };
            target.insert(k.trim().to_string(), value);
        }
        serde_json::from_value(serde_json::Value::Object(root)).unwrap()
    }

    #[test]
    fn data_is_deterministic() {
        let m = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 64,
            max_seq: 16,
            seed: 0,
        };
        let j: JobConfig = serde_json::from_value(serde_json::json!({
            "name": "x", "kind": "inference", "batch": 2, "seq": 4, "gen_tokens": 3
        }))
        .unwrap();
        assert_eq!(j.prompt(&m, 0), j.prompt(&m, 0));
        assert_ne!(j.prompt(&m, 0), j.prompt(&m, 1));
        assert!(j.validate(&m).is_ok());
        let mut long = j.clone();
        long.gen_tokens = 13;
        assert!(long.validate(&m).is_err());
    }
}
