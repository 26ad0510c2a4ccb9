//! Client runtime: a model whose frozen layers are replaced by proxies that
//! call the executor, plus inference and fine-tuning jobs built on it.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::kv::KVCache;
use crate::model::adapter::lora_backward;
use crate::model::attention::{attention_backward, attention_forward};
use crate::model::{
    AdapterGrads, AdapterParams, AdapterState, BaseModel, ClientWeights, LayerAddress, ModelConfig, ModelError,
    ParamSlot, Role, TokenBatch, NORM_EPS,
};
use crate::privacy::{blind_forward, NoiseSet, PrivacyError};
use crate::protocol::Pass;
use crate::tensor::{
    affine_backward_input, affine_forward, concat_rows, rmsnorm, rmsnorm_backward, silu, silu_backward,
    AffineParams, Tensor, TensorError,
};
use crate::transport::{LayerTransport, TransportError};

mod config;
mod job;

pub use config::{ClientProfile, JobConfig, JobKind};
pub use job::{logits_hash, ClientJob, Generation, JobRecord, Phase, RunOutcome};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error("invalid job state: {0}")]
    State(&'static str),
    #[error("{0} is not a layer of this model")]
    UnknownLayer(LayerAddress),
}

pub type Result<T> = std::result::Result<T, ClientError>;

/// Stand-in for a frozen layer: everything needed to address the executor,
/// and no weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VirtLayer {
    pub address: LayerAddress,
    pub client_id: u32,
    pub d_in: usize,
    pub d_out: usize,
    /// Forward inputs are blinded with the client's noise set.
    pub private: bool,
}

#[derive(Debug, Clone)]
pub enum LayerImpl {
    Local(AffineParams),
    Virtual(VirtLayer),
}

/// Values a fine-tuning forward keeps for its backward. The executor keeps
/// nothing; this is the whole of the saved state.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    batch: usize,
    seq: usize,
    blocks: Vec<BlockTape>,
    h_final: Option<Tensor>,
    /// Inputs of LoRA-adapted layers. Q, K and V share one entry, keyed by Q.
    lora_in: BTreeMap<LayerAddress, Tensor>,
    /// Frozen-layer outputs under IA3 scaling.
    ia3_base: BTreeMap<LayerAddress, Tensor>,
}

#[derive(Debug, Clone)]
struct BlockTape {
    h_attn: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Per sequence, per head.
    probs: Vec<Vec<Tensor>>,
    h_ff: Tensor,
    u: Tensor,
}

impl Tape {
    pub fn nbytes(&self) -> u64 {
        let blocks: u64 = self
            .blocks
            .iter()
            .map(|b| {
                let probs: u64 = b.probs.iter().flatten().map(Tensor::nbytes).sum();
                b.h_attn.nbytes() + b.q.nbytes() + b.k.nbytes() + b.v.nbytes() + probs + b.h_ff.nbytes() + b.u.nbytes()
            })
            .sum();
        blocks
            + self.h_final.as_ref().map_or(0, Tensor::nbytes)
            + self.lora_in.values().map(Tensor::nbytes).sum::<u64>()
            + self.ia3_base.values().map(Tensor::nbytes).sum::<u64>()
    }
}

fn lora_input_key(addr: LayerAddress) -> LayerAddress {
    match addr.role {
        Role::K | Role::V => LayerAddress::new(addr.block, Role::Q),
        _ => addr,
    }
}

fn row_range(t: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    Ok(t.slice_rows(start, start + len)?)
}

/// The client-side model. Layers in the base set are [`VirtLayer`]s; the
/// rest (if any) are held locally.
pub struct ClientModel {
    config: ModelConfig,
    weights: ClientWeights,
    layers: BTreeMap<LayerAddress, LayerImpl>,
    transport: Box<dyn LayerTransport>,
    noise: Option<NoiseSet>,
    forward_count: u64,
}

/// Builds a client model from a full model definition, replacing every
/// address in `base_set` with a proxy. Frozen weights of proxied layers are
/// not retained.
pub fn virtualize(
    model: &BaseModel,
    base_set: &BTreeSet<LayerAddress>,
    transport: Box<dyn LayerTransport>,
) -> Result<ClientModel> {
    if let Some(&bad) = base_set.iter().find(|a| !model.config.contains(**a)) {
        return Err(ClientError::UnknownLayer(bad));
    }
    let local = model
        .base
        .iter()
        .filter(|(a, _)| !base_set.contains(a))
        .map(|(a, p)| (*a, p.clone()))
        .collect();
    ClientModel::from_parts(model.config, model.client.clone(), local, transport)
}

impl ClientModel {
    /// Every layer address missing from `local` becomes a proxy. A client
    /// that loaded only the client half of a checkpoint passes an empty map.
    pub fn from_parts(
        config: ModelConfig,
        weights: ClientWeights,
        local: BTreeMap<LayerAddress, AffineParams>,
        transport: Box<dyn LayerTransport>,
    ) -> Result<Self> {
        config.validate()?;
        let client_id = transport.client_id();
        let mut layers = BTreeMap::new();
        for addr in config.layer_addresses() {
            let (d_in, d_out) = config.dims(addr.role);
            let l = match local.get(&addr) {
                Some(p) => LayerImpl::Local(p.clone()),
                None => LayerImpl::Virtual(VirtLayer {
                    address: addr,
                    client_id,
                    d_in,
                    d_out,
                    private: false,
                }),
            };
            layers.insert(addr, l);
        }
        if let Some(bad) = local.keys().find(|a| !config.contains(**a)) {
            return Err(ClientError::UnknownLayer(*bad));
        }
        Ok(Self {
            config,
            weights,
            layers,
            transport,
            noise: None,
            forward_count: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layer(&self, addr: LayerAddress) -> Option<&LayerImpl> {
        self.layers.get(&addr)
    }

    pub fn virtual_count(&self) -> usize {
        self.layers.values().filter(|l| matches!(l, LayerImpl::Virtual(_))).count()
    }

    pub fn local_count(&self) -> usize {
        self.layers.len() - self.virtual_count()
    }

    /// Bytes of frozen affine weights held by the client (0 when every base
    /// layer is virtualized).
    pub fn local_affine_bytes(&self) -> u64 {
        self.layers
            .values()
            .map(|l| match l {
                LayerImpl::Local(p) => p.nbytes(),
                LayerImpl::Virtual(_) => 0,
            })
            .sum()
    }

    /// Embedding, norms and any local affine layers.
    pub fn weight_bytes(&self) -> u64 {
        self.weights.nbytes() + self.local_affine_bytes()
    }

    pub fn transport(&self) -> &dyn LayerTransport {
        self.transport.as_ref()
    }

    pub fn transport_mut(&mut self) -> &mut dyn LayerTransport {
        self.transport.as_mut()
    }

    /// Enables blinding on every proxied layer the noise set covers.
    pub fn set_noise(&mut self, noise: NoiseSet) {
        for l in self.layers.values_mut() {
            if let LayerImpl::Virtual(v) = l {
                v.private = noise.covers(v.address);
            }
        }
        self.noise = Some(noise);
    }

    pub fn noise(&self) -> Option<&NoiseSet> {
        self.noise.as_ref()
    }

    /// Proxied layer addresses.
    pub fn virtual_layers(&self) -> Vec<LayerAddress> {
        self.layers
            .iter()
            .filter(|(_, l)| matches!(l, LayerImpl::Virtual(_)))
            .map(|(a, _)| *a)
            .collect()
    }

    fn frozen_forward(&mut self, addr: LayerAddress, x: &Tensor) -> Result<Tensor> {
        match self.layers.get(&addr).ok_or(ClientError::UnknownLayer(addr))? {
            LayerImpl::Local(p) => Ok(affine_forward(x, p)?),
            LayerImpl::Virtual(v) => {
                let y = match (&self.noise, v.private) {
                    (Some(noise), true) => blind_forward(self.transport.as_mut(), addr, x, noise, self.forward_count)?,
                    _ => self.transport.call(addr, Pass::Forward, x)?,
                };
                if y.shape() != [x.rows(), v.d_out] {
                    return Err(TransportError::Protocol(format!("{addr}: forward reply shape {:?}", y.shape())).into());
                }
                Ok(y)
            }
        }
    }

    fn frozen_backward(&mut self, addr: LayerAddress, grad_y: &Tensor) -> Result<Tensor> {
        match self.layers.get(&addr).ok_or(ClientError::UnknownLayer(addr))? {
            LayerImpl::Local(p) => Ok(affine_backward_input(grad_y, p)?),
            LayerImpl::Virtual(v) => {
                let d_in = v.d_in;
                let g = self.transport.call(addr, Pass::Backward, grad_y)?;
                if g.shape() != [grad_y.rows(), d_in] {
                    return Err(TransportError::Protocol(format!("{addr}: backward reply shape {:?}", g.shape())).into());
                }
                Ok(g)
            }
        }
    }

    /// Frozen layer plus adapter, saving what the backward will need.
    fn adapted(
        &mut self,
        adapter: Option<&AdapterState>,
        addr: LayerAddress,
        x: &Tensor,
        tape: &mut Option<&mut Tape>,
    ) -> Result<Tensor> {
        let base = self.frozen_forward(addr, x)?;
        let Some(a) = adapter else { return Ok(base) };
        if let Some(t) = tape.as_deref_mut() {
            match a.get(addr) {
                Some(AdapterParams::Lora { .. }) => {
                    t.lora_in.entry(lora_input_key(addr)).or_insert_with(|| x.clone());
                }
                Some(AdapterParams::Ia3 { .. }) => {
                    t.ia3_base.insert(addr, base.clone());
                }
                None => {}
            }
        }
        Ok(a.apply(addr, x, base)?)
    }

    /// Logits `[batch × seq, vocab]`, rows ordered sequence by sequence.
    ///
    /// All sequences of the batch are flattened into one request per layer.
    /// With a cache, `tokens` continue each cached sequence. With a tape,
    /// the values the backward needs are recorded (no cache allowed).
    pub fn forward(
        &mut self,
        adapter: Option<&AdapterState>,
        tokens: &TokenBatch,
        mut kv: Option<&mut KVCache>,
        mut tape: Option<&mut Tape>,
    ) -> Result<Tensor> {
        let cfg = self.config;
        let offset = kv.as_ref().map_or(0, |c| c.len());
        tokens.validate(&cfg, offset)?;
        if let Some(c) = kv.as_ref() {
            if c.batch() != tokens.batch {
                return Err(ModelError::Config(format!(
                    "cache holds {} sequences, batch has {}",
                    c.batch(),
                    tokens.batch
                ))
                .into());
            }
        }
        if tape.is_some() && kv.is_some() {
            return Err(ClientError::State("a training forward cannot use a KV cache"));
        }
        if let Some(t) = tape.as_deref_mut() {
            *t = Tape {
                batch: tokens.batch,
                seq: tokens.seq,
                ..Tape::default()
            };
        }
        self.forward_count += 1;
        let s = tokens.seq;

        let mut h = self.weights.embed(&tokens.ids)?;
        for block in 0..cfg.n_layers {
            let at = |role| LayerAddress::new(block as u16, role);
            let a = rmsnorm(&h, &self.weights.norms[block].attn, NORM_EPS)?;
            let q = self.adapted(adapter, at(Role::Q), &a, &mut tape)?;
            let k = self.adapted(adapter, at(Role::K), &a, &mut tape)?;
            let v = self.adapted(adapter, at(Role::V), &a, &mut tape)?;

            let mut outs = Vec::with_capacity(tokens.batch);
            let mut probs = Vec::new();
            for b in 0..tokens.batch {
                let (qb, kb, vb) = (row_range(&q, b * s, s)?, row_range(&k, b * s, s)?, row_range(&v, b * s, s)?);
                let (k_all, v_all) = match kv.as_deref_mut() {
                    Some(cache) => {
                        cache.append(b, block, &kb, &vb)?;
                        (cache.keys(b, block), cache.values(b, block))
                    }
                    None => (kb, vb),
                };
                let att = attention_forward(&qb, &k_all, &v_all, cfg.n_heads, offset)?;
                outs.push(att.out);
                if tape.is_some() {
                    probs.push(att.probs);
                }
            }
            let attn_out = concat_rows(&outs.iter().collect::<Vec<_>>())?;
            let o = self.adapted(adapter, at(Role::O), &attn_out, &mut tape)?;
            let h_attn = std::mem::replace(&mut h, Tensor::zeros(&[0, 0]));
            h = h_attn.add(&o)?;

            let m = rmsnorm(&h, &self.weights.norms[block].ff, NORM_EPS)?;
            let u = self.adapted(adapter, at(Role::FfUp), &m, &mut tape)?;
            let d = self.adapted(adapter, at(Role::FfDown), &silu(&u), &mut tape)?;
            let h_ff = std::mem::replace(&mut h, Tensor::zeros(&[0, 0]));
            h = h_ff.add(&d)?;

            if let Some(t) = tape.as_deref_mut() {
                t.blocks.push(BlockTape {
                    h_attn,
                    q,
                    k,
                    v,
                    probs,
                    h_ff,
                    u,
                });
            }
        }
        let f = rmsnorm(&h, &self.weights.final_norm, NORM_EPS)?;
        let logits = self.adapted(adapter, LayerAddress::lm_head(&cfg), &f, &mut tape)?;
        if let Some(t) = tape.as_deref_mut() {
            t.h_final = Some(h);
        }
        Ok(logits)
    }

    /// Gradient through one layer. Adapter gradients go into `grads`; the
    /// input gradient is computed only when `need_input`.
    fn layer_backward(
        &mut self,
        adapter: &AdapterState,
        tape: &Tape,
        addr: LayerAddress,
        grad_y: &Tensor,
        need_input: bool,
        grads: &mut AdapterGrads,
    ) -> Result<Option<Tensor>> {
        let missing = ClientError::State("tape lacks a value saved for an adapted layer");
        match adapter.get(addr) {
            None => Ok(if need_input {
                Some(self.frozen_backward(addr, grad_y)?)
            } else {
                None
            }),
            Some(AdapterParams::Lora { a, b }) => {
                let x = tape.lora_in.get(&lora_input_key(addr)).ok_or(missing)?;
                let g = lora_backward(x, grad_y, a, b, adapter.lora_scale())?;
                grads.insert((addr, ParamSlot::LoraA), g.a);
                grads.insert((addr, ParamSlot::LoraB), g.b);
                if !need_input {
                    return Ok(None);
                }
                Ok(Some(self.frozen_backward(addr, grad_y)?.add(&g.x)?))
            }
            Some(AdapterParams::Ia3 { scale }) => {
                let base = tape.ia3_base.get(&addr).ok_or(missing)?;
                grads.insert((addr, ParamSlot::Ia3Scale), grad_y.mul(base)?.sum_rows()?);
                if !need_input {
                    return Ok(None);
                }
                let g_base = grad_y.mul_row_vector(scale)?;
                Ok(Some(self.frozen_backward(addr, &g_base)?))
            }
        }
    }

    /// Adapter gradients for `grad_logits`, walking layers in reverse and
    /// stopping once the lowest adapted block is done. Frozen layers answer
    /// with `grad_y · Wᵀ`, so nothing is needed from the executor but W.
    pub fn backward(&mut self, adapter: &AdapterState, tape: &Tape, grad_logits: &Tensor) -> Result<AdapterGrads> {
        let cfg = self.config;
        let mut grads = AdapterGrads::new();
        let Some(lowest) = adapter.addresses().map(|a| a.block as usize).min() else {
            return Ok(grads);
        };
        let h_final = tape.h_final.as_ref().ok_or(ClientError::State("no recorded forward"))?;
        let head = LayerAddress::lm_head(&cfg);
        let below_head = lowest < cfg.n_layers;
        let g_f = self.layer_backward(adapter, tape, head, grad_logits, below_head, &mut grads)?;
        let Some(g_f) = g_f else { return Ok(grads) };
        let mut g_h = rmsnorm_backward(h_final, &self.weights.final_norm, NORM_EPS, &g_f)?;

        let (batch, s) = (tape.batch, tape.seq);
        for block in (lowest..cfg.n_layers).rev() {
            let bt = &tape.blocks[block];
            let at = |role| LayerAddress::new(block as u16, role);
            let last = block == lowest;

            let g_su = self.layer_backward(adapter, tape, at(Role::FfDown), &g_h, true, &mut grads)?.expect("input grad");
            let g_u = silu_backward(&bt.u, &g_su)?;
            let g_m = self.layer_backward(adapter, tape, at(Role::FfUp), &g_u, true, &mut grads)?.expect("input grad");
            g_h = g_h.add(&rmsnorm_backward(&bt.h_ff, &self.weights.norms[block].ff, NORM_EPS, &g_m)?)?;

            let g_attn = self.layer_backward(adapter, tape, at(Role::O), &g_h, true, &mut grads)?.expect("input grad");
            let (mut gq, mut gk, mut gv) = (Vec::new(), Vec::new(), Vec::new());
            for b in 0..batch {
                let g = attention_backward(
                    &row_range(&bt.q, b * s, s)?,
                    &row_range(&bt.k, b * s, s)?,
                    &row_range(&bt.v, b * s, s)?,
                    &bt.probs[b],
                    &row_range(&g_attn, b * s, s)?,
                    cfg.n_heads,
                    0,
                )?;
                gq.push(g.q);
                gk.push(g.k);
                gv.push(g.v);
            }
            let cat = |v: &[Tensor]| concat_rows(&v.iter().collect::<Vec<_>>());
            let (gq, gk, gv) = (cat(&gq)?, cat(&gk)?, cat(&gv)?);
            let need = !last;
            let a_q = self.layer_backward(adapter, tape, at(Role::Q), &gq, need, &mut grads)?;
            let a_k = self.layer_backward(adapter, tape, at(Role::K), &gk, need, &mut grads)?;
            let a_v = self.layer_backward(adapter, tape, at(Role::V), &gv, need, &mut grads)?;
            if let (Some(a_q), Some(a_k), Some(a_v)) = (a_q, a_k, a_v) {
                let g_a = a_q.add(&a_k)?.add(&a_v)?;
                g_h = g_h.add(&rmsnorm_backward(&bt.h_attn, &self.weights.norms[block].attn, NORM_EPS, &g_a)?)?;
            }
        }
        Ok(grads)
    }
}
