//! Monolithic forward pass over a fully local model.
//!
//! This is the equivalence oracle for split execution: it never touches a
//! transport and processes one sequence at a time.

use super::attention::attention_forward;
use super::{AdapterState, BaseModel, LayerAddress, ModelError, Result, Role, TokenBatch, NORM_EPS};
use crate::kv::KVCache;
use crate::tensor::{affine_forward, concat_rows, rmsnorm, silu, Tensor};

fn layer(model: &BaseModel, adapter: Option<&AdapterState>, addr: LayerAddress, x: &Tensor) -> Result<Tensor> {
    let p = model.base.get(addr).ok_or(ModelError::UnknownLayer(addr))?;
    let y = affine_forward(x, p)?;
    match adapter {
        Some(a) => a.apply(addr, x, y),
        None => Ok(y),
    }
}

/// Logits `[batch * seq, vocab]` for `tokens`.
///
/// With a cache, `tokens` continue each cached sequence: they are placed at
/// positions `kv.len()..` and their keys/values are appended.
pub fn reference_forward(
    model: &BaseModel,
    adapter: Option<&AdapterState>,
    tokens: &TokenBatch,
    mut kv: Option<&mut KVCache>,
) -> Result<Tensor> {
    let cfg = &model.config;
    let offset = kv.as_ref().map_or(0, |c| c.len());
    tokens.validate(cfg, offset)?;
    if let Some(c) = kv.as_ref() {
        if c.batch() != tokens.batch {
            return Err(ModelError::Config(format!(
                "cache holds {} sequences, batch has {}",
                c.batch(),
                tokens.batch
            )));
        }
    }
    let mut outputs = Vec::with_capacity(tokens.batch);
    for b in 0..tokens.batch {
        let mut h = model.client.embed(tokens.sequence(b))?;
        for block in 0..cfg.n_layers {
            let at = |role| LayerAddress::new(block as u16, role);
            let norms = &model.client.norms[block];
            let a = rmsnorm(&h, &norms.attn, NORM_EPS)?;
            let q = layer(model, adapter, at(Role::Q), &a)?;
            let k = layer(model, adapter, at(Role::K), &a)?;
            let v = layer(model, adapter, at(Role::V), &a)?;
            let (k_all, v_all) = match kv.as_deref_mut() {
                Some(cache) => {
                    cache.append(b, block, &k, &v)?;
                    (cache.keys(b, block), cache.values(b, block))
                }
                None => (k, v),
            };
            let attn = attention_forward(&q, &k_all, &v_all, cfg.n_heads, offset)?;
            let o = layer(model, adapter, at(Role::O), &attn.out)?;
            h = h.add(&o)?;
            let m = rmsnorm(&h, &norms.ff, NORM_EPS)?;
            let u = layer(model, adapter, at(Role::FfUp), &m)?;
            let d = layer(model, adapter, at(Role::FfDown), &silu(&u))?;
            h = h.add(&d)?;
        }
        let f = rmsnorm(&h, &model.client.final_norm, NORM_EPS)?;
        outputs.push(layer(model, adapter, LayerAddress::lm_head(cfg), &f)?);
    }
    let refs: Vec<&Tensor> = outputs.iter().collect();
    Ok(concat_rows(&refs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv::Placement;
    use crate::model::{build_model, AdapterSpec, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(n_layers: usize) -> ModelConfig {
        ModelConfig {
            n_layers,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 20,
            max_seq: 12,
            seed: 3,
        }
    }

    fn tokens(batch: usize, seq: usize, seed: u64, vocab: usize) -> TokenBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = (0..batch * seq).map(|_| rng.gen_range(0..vocab as u32)).collect();
        TokenBatch::new(batch, seq, ids).unwrap()
    }

    #[test]
    fn neutral_adapters_leave_logits_bitwise_unchanged() {
        let c = cfg(2);
        let m = build_model(&c).unwrap();
        let t = tokens(2, 5, 1, c.vocab_size);
        let plain = reference_forward(&m, None, &t, None).unwrap();
        let all = Role::ALL;
        let lora = AdapterState::new(&c, AdapterSpec::lora(4, 8.0, &all), 2).unwrap();
        let ia3 = AdapterState::new(&c, AdapterSpec::ia3(), 2).unwrap();
        assert!(reference_forward(&m, Some(&lora), &t, None).unwrap().bitwise_eq(&plain));
        assert!(reference_forward(&m, Some(&ia3), &t, None).unwrap().bitwise_eq(&plain));
    }

    #[test]
    fn causality() {
        let c = cfg(2);
        let m = build_model(&c).unwrap();
        let t = tokens(1, 8, 4, c.vocab_size);
        let base = reference_forward(&m, None, &t, None).unwrap();
        let mut changed = t.clone();
        for id in &mut changed.ids[5..] {
            *id = (*id + 7) % c.vocab_size as u32;
        }
        let other = reference_forward(&m, None, &changed, None).unwrap();
        for i in 0..5 {
            assert_eq!(base.row(i), other.row(i));
        }
        assert_ne!(base.row(5), other.row(5));
    }

    #[test]
    fn decode_with_cache_matches_full_forward() {
        let c = cfg(2);
        let m = build_model(&c).unwrap();
        let mut adapter = AdapterState::new(&c, AdapterSpec::lora(2, 4.0, &[Role::Q, Role::V]), 5).unwrap();
        adapter.perturb(6, 0.2);
        let t = tokens(2, 9, 7, c.vocab_size);
        let full = reference_forward(&m, Some(&adapter), &t, None).unwrap();
        let mut cache = KVCache::new(&c, 2, Placement::Fast);
        let prefill_len = 4;
        let prompt: Vec<u32> = (0..2).flat_map(|b| t.sequence(b)[..prefill_len].to_vec()).collect();
        let pre = reference_forward(&m, Some(&adapter), &TokenBatch::new(2, prefill_len, prompt).unwrap(), Some(&mut cache)).unwrap();
        for b in 0..2 {
            for i in 0..prefill_len {
                let d = pre.row(b * prefill_len + i).iter().zip(full.row(b * 9 + i)).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
                assert!(d <= 1e-5);
            }
        }
        for pos in prefill_len..9 {
            let step: Vec<u32> = (0..2).map(|b| t.sequence(b)[pos]).collect();
            let out = reference_forward(&m, Some(&adapter), &TokenBatch::new(2, 1, step).unwrap(), Some(&mut cache)).unwrap();
            for b in 0..2 {
                let d = out.row(b).iter().zip(full.row(b * 9 + pos)).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
                assert!(d <= 1e-5, "pos {pos}: {d}");
            }
        }
        assert_eq!(cache.len(), 9);
    }

    #[test]
    fn single_token_single_layer_attends_to_itself() {
        let c = cfg(1);
        let m = build_model(&c).unwrap();
        let t = TokenBatch::new(1, 1, vec![3]).unwrap();
        let logits = reference_forward(&m, None, &t, None).unwrap();
        // Recompute with attention replaced by the V path.
        let at = |r| LayerAddress::new(0, r);
        let h = m.client.embed(&[3]).unwrap();
        let a = rmsnorm(&h, &m.client.norms[0].attn, NORM_EPS).unwrap();
        let v = affine_forward(&a, m.base.get(at(Role::V)).unwrap()).unwrap();
        let h = h.add(&affine_forward(&v, m.base.get(at(Role::O)).unwrap()).unwrap()).unwrap();
        let mm = rmsnorm(&h, &m.client.norms[0].ff, NORM_EPS).unwrap();
        let u = affine_forward(&mm, m.base.get(at(Role::FfUp)).unwrap()).unwrap();
        let h = h.add(&affine_forward(&silu(&u), m.base.get(at(Role::FfDown)).unwrap()).unwrap()).unwrap();
        let f = rmsnorm(&h, &m.client.final_norm, NORM_EPS).unwrap();
        let want = affine_forward(&f, m.base.get(LayerAddress::lm_head(&c)).unwrap()).unwrap();
        assert!(logits.bitwise_eq(&want));
    }

    #[test]
    fn input_errors() {
        let c = cfg(1);
        let m = build_model(&c).unwrap();
        let bad = TokenBatch::new(1, 1, vec![20]).unwrap();
        assert!(matches!(
            reference_forward(&m, None, &bad, None),
            Err(ModelError::TokenOutOfRange { token: 20, .. })
        ));
        let long = TokenBatch::new(1, 13, vec![0; 13]).unwrap();
        assert!(matches!(reference_forward(&m, None, &long, None), Err(ModelError::SeqOverflow { .. })));
    }
}
