//! The toy decoder transformer and its split into frozen base layers and
//! client-side state.
//!
//! Only the seven affine roles ([`Role`]) are base layers. Embeddings, norms,
//! attention, activations and residual adds are client-side.

pub mod adapter;
pub mod attention;
pub mod checkpoint;
pub mod reference;

use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{AffineParams, Tensor, TensorError};

pub use adapter::{AdapterGrads, AdapterMethod, AdapterParams, AdapterSpec, AdapterState, ParamSlot};
pub use reference::reference_forward;

/// Epsilon used by every RMSNorm in the model.
pub const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence length {len} exceeds max_seq {max}")]
    SeqOverflow { len: usize, max: usize },
    #[error("unknown layer {0}")]
    UnknownLayer(LayerAddress),
    #[error("adapter: {0}")]
    Adapter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers > u16::MAX as usize - 1 {
            return Err(ModelError::Config("too many layers".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `(d_in, d_out)` of the affine layer playing `role`.
    pub fn dims(&self, role: Role) -> (usize, usize) {
        match role {
            Role::Q | Role::K | Role::V | Role::O => (self.d_model, self.d_model),
            Role::FfUp => (self.d_model, self.d_ff),
            Role::FfDown => (self.d_ff, self.d_model),
            Role::LmHead => (self.d_model, self.vocab_size),
        }
    }

    /// Every base-layer address, in execution order.
    pub fn layer_addresses(&self) -> Vec<LayerAddress> {
        let mut out = Vec::with_capacity(self.n_layers * 6 + 1);
        for block in 0..self.n_layers {
            for role in Role::BLOCK_ROLES {
                out.push(LayerAddress::new(block as u16, role));
            }
        }
        out.push(LayerAddress::lm_head(self));
        out
    }

    pub fn contains(&self, addr: LayerAddress) -> bool {
        match addr.role {
            Role::LmHead => addr.block as usize == self.n_layers,
            _ => (addr.block as usize) < self.n_layers,
        }
    }

    /// Largest activation width any base layer consumes or produces.
    pub fn max_width(&self) -> usize {
        self.d_model.max(self.d_ff).max(self.vocab_size)
    }

    /// Number of f32 parameters held by base layers (weights and biases).
    pub fn base_param_count(&self) -> u64 {
        self.layer_addresses()
            .iter()
            .map(|a| {
                let (i, o) = self.dims(a.role);
                (i * o + o) as u64
            })
            .sum()
    }

    /// Number of f32 parameters held client-side: embedding and norm gains.
    pub fn client_param_count(&self) -> u64 {
        (self.vocab_size * self.d_model + (2 * self.n_layers + 1) * self.d_model) as u64
    }
}

/// The affine roles inside the model. `LmHead` lives in a sentinel block
/// numbered `n_layers`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Q,
    K,
    V,
    O,
    FfUp,
    FfDown,
    LmHead,
}

impl Role {
    pub const BLOCK_ROLES: [Role; 6] = [Role::Q, Role::K, Role::V, Role::O, Role::FfUp, Role::FfDown];
    pub const ALL: [Role; 7] = [
        Role::Q,
        Role::K,
        Role::V,
        Role::O,
        Role::FfUp,
        Role::FfDown,
        Role::LmHead,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Role> {
        Role::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Q => "q",
            Role::K => "k",
            Role::V => "v",
            Role::O => "o",
            Role::FfUp => "ff_up",
            Role::FfDown => "ff_down",
            Role::LmHead => "lm_head",
        }
    }

    pub fn from_name(name: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.name() == name)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerAddress {
    pub block: u16,
    pub role: Role,
}

impl LayerAddress {
    pub fn new(block: u16, role: Role) -> Self {
        Self { block, role }
    }

    pub fn lm_head(config: &ModelConfig) -> Self {
        Self::new(config.n_layers as u16, Role::LmHead)
    }
}

impl fmt::Display for LayerAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.block, self.role)
    }
}

/// A batch of equal-length token sequences, row-major `[batch, seq]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<u32>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != batch * seq {
            return Err(ModelError::Config(format!(
                "token batch [{batch}, {seq}] needs {} ids, got {}",
                batch * seq,
                ids.len()
            )));
        }
        Ok(Self { batch, seq, ids })
    }

    pub fn sequence(&self, b: usize) -> &[u32] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }

    pub fn tokens(&self) -> usize {
        self.ids.len()
    }

    pub fn validate(&self, config: &ModelConfig, offset: usize) -> Result<()> {
        if let Some(&token) = self.ids.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                token,
                vocab: config.vocab_size,
            });
        }
        if offset + self.seq > config.max_seq {
            return Err(ModelError::SeqOverflow {
                len: offset + self.seq,
                max: config.max_seq,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockNorms {
    pub attn: Tensor,
    pub ff: Tensor,
}

/// Frozen parameters that live with the client: embedding table and norm gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientWeights {
    pub embedding: Tensor,
    pub norms: Vec<BlockNorms>,
    pub final_norm: Tensor,
}

impl ClientWeights {
    pub fn nbytes(&self) -> u64 {
        self.embedding.nbytes()
            + self.final_norm.nbytes()
            + self
                .norms
                .iter()
                .map(|n| n.attn.nbytes() + n.ff.nbytes())
                .sum::<u64>()
    }

    /// Embedding lookup, `[tokens, d_model]`.
    pub fn embed(&self, ids: &[u32]) -> Result<Tensor> {
        let vocab = self.embedding.rows();
        let d = self.embedding.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= vocab {
                return Err(ModelError::TokenOutOfRange { token: id, vocab });
            }
            data.extend_from_slice(self.embedding.row(id as usize));
        }
        Ok(Tensor::new(vec![ids.len(), d], data)?)
    }
}

/// The frozen affine layers served by the executor. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseLayers {
    layers: Arc<BTreeMap<LayerAddress, AffineParams>>,
}

impl BaseLayers {
    pub fn new(layers: BTreeMap<LayerAddress, AffineParams>) -> Self {
        Self {
            layers: Arc::new(layers),
        }
    }

    pub fn get(&self, addr: LayerAddress) -> Option<&AffineParams> {
        self.layers.get(&addr)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LayerAddress, &AffineParams)> {
        self.layers.iter()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn nbytes(&self) -> u64 {
        self.layers.values().map(AffineParams::nbytes).sum()
    }

    /// Stable checksum over every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (addr, p) in self.layers.iter() {
            addr.hash(&mut h);
            for v in p.weight().data() {
                v.to_bits().hash(&mut h);
            }
            if let Some(b) = p.bias() {
                for v in b.data() {
                    v.to_bits().hash(&mut h);
                }
            }
        }
        h.finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    pub config: ModelConfig,
    pub base: BaseLayers,
    pub client: ClientWeights,
}

// Each tensor gets its own ChaCha stream so either half of the model can be
// rebuilt without generating the other.
fn tensor_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform(shape: &[usize], bound: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

const STREAM_CLIENT: u64 = 1 << 32;

/// Deterministically builds the client-side half of the model.
pub fn build_client_weights(config: &ModelConfig) -> Result<ClientWeights> {
    config.validate()?;
    let d = config.d_model;
    let embedding = uniform(
        &[config.vocab_size, d],
        1.0,
        &mut tensor_rng(config.seed, STREAM_CLIENT),
    );
    let gain = |stream: u64| {
        let mut rng = tensor_rng(config.seed, STREAM_CLIENT + stream);
        let t = uniform(&[d], 0.1, &mut rng);
        t.map(|v| 1.0 + v)
    };
    let norms = (0..config.n_layers as u64)
        .map(|b| BlockNorms {
            attn: gain(1 + 2 * b),
            ff: gain(2 + 2 * b),
        })
        .collect();
    let final_norm = gain(1 + 2 * config.n_layers as u64);
    Ok(ClientWeights {
        embedding,
        norms,
        final_norm,
    })
}

/// Deterministically builds the frozen affine layers.
pub fn build_base_layers(config: &ModelConfig) -> Result<BaseLayers> {
    config.validate()?;
    let mut layers = BTreeMap::new();
    for (i, addr) in config.layer_addresses().into_iter().enumerate() {
        let (d_in, d_out) = config.dims(addr.role);
        let mut rng = tensor_rng(config.seed, i as u64);
        let bound = 1.0 / (d_in as f32).sqrt();
        let weight = uniform(&[d_in, d_out], bound, &mut rng);
        let bias = uniform(&[d_out], 0.1, &mut rng);
        layers.insert(addr, AffineParams::new(weight, Some(bias))?);
    }
    Ok(BaseLayers::new(layers))
}

pub fn build_model(config: &ModelConfig) -> Result<BaseModel> {
    Ok(BaseModel {
        config: *config,
        base: build_base_layers(config)?,
        client: build_client_weights(config)?,
    })
}
