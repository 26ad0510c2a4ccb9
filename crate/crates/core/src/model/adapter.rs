//! Client-owned adapters: LoRA low-rank deltas and IA3 output scalings.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LayerAddress, ModelConfig, ModelError, Result, Role};
use crate::tensor::{matmul, matmul_transposed, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum AdapterMethod {
    Lora { rank: usize, alpha: f32 },
    Ia3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    #[serde(flatten)]
    pub method: AdapterMethod,
    pub targets: BTreeSet<Role>,
}

impl AdapterSpec {
    pub fn lora(rank: usize, alpha: f32, targets: &[Role]) -> Self {
        Self {
            method: AdapterMethod::Lora { rank, alpha },
            targets: targets.iter().copied().collect(),
        }
    }

    /// IA3 over the conventional K, V and FF_UP targets.
    pub fn ia3() -> Self {
        Self::ia3_on(&[Role::K, Role::V, Role::FfUp])
    }

    pub fn ia3_on(targets: &[Role]) -> Self {
        Self {
            method: AdapterMethod::Ia3,
            targets: targets.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AdapterParams {
    Lora { a: Tensor, b: Tensor },
    Ia3 { scale: Tensor },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamSlot {
    LoraA,
    LoraB,
    Ia3Scale,
}

pub type AdapterGrads = BTreeMap<(LayerAddress, ParamSlot), Tensor>;

/// Trainable adapter parameters for one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterState {
    spec: AdapterSpec,
    #[serde(with = "entries")]
    params: BTreeMap<LayerAddress, AdapterParams>,
}

// A list of pairs rather than a map, so formats with string-only keys
// (JSON) can carry it.
mod entries {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<K: Serialize, V: Serialize, S: Serializer>(m: &BTreeMap<K, V>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.iter())
    }

    pub fn deserialize<'de, K, V, D>(d: D) -> Result<BTreeMap<K, V>, D::Error>
    where
        K: Deserialize<'de> + Ord,
        V: Deserialize<'de>,
        D: Deserializer<'de>,
    {
        Ok(Vec::<(K, V)>::deserialize(d)?.into_iter().collect())
    }
}

impl AdapterState {
    /// LoRA starts with `B = 0` and IA3 with unit scales, so a fresh adapter
    /// leaves the model output unchanged.
    pub fn new(config: &ModelConfig, spec: AdapterSpec, seed: u64) -> Result<Self> {
        if let AdapterMethod::Lora { rank, .. } = spec.method {
            if rank == 0 {
                return Err(ModelError::Adapter("LoRA rank must be positive".into()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for addr in config.layer_addresses() {
            if !spec.targets.contains(&addr.role) {
                continue;
            }
            let (d_in, d_out) = config.dims(addr.role);
            let p = match spec.method {
                AdapterMethod::Lora { rank, .. } => {
                    let bound = 1.0 / (d_in as f32).sqrt();
                    let a = (0..d_in * rank).map(|_| rng.gen_range(-bound..bound)).collect();
                    AdapterParams::Lora {
                        a: Tensor::new(vec![d_in, rank], a)?,
                        b: Tensor::zeros(&[rank, d_out]),
                    }
                }
                AdapterMethod::Ia3 => AdapterParams::Ia3 {
                    scale: Tensor::full(&[d_out], 1.0),
                },
            };
            params.insert(addr, p);
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn get(&self, addr: LayerAddress) -> Option<&AdapterParams> {
        self.params.get(&addr)
    }

    pub fn addresses(&self) -> impl Iterator<Item = LayerAddress> + '_ {
        self.params.keys().copied()
    }

    /// `alpha / rank` for LoRA, 1 otherwise.
    pub fn lora_scale(&self) -> f32 {
        match self.spec.method {
            AdapterMethod::Lora { rank, alpha } => alpha / rank as f32,
            AdapterMethod::Ia3 => 1.0,
        }
    }

    pub fn nbytes(&self) -> u64 {
        self.tensors().map(|(_, _, t)| t.nbytes()).sum()
    }

    pub fn tensors(&self) -> impl Iterator<Item = (LayerAddress, ParamSlot, &Tensor)> {
        self.params.iter().flat_map(|(addr, p)| {
            let items: Vec<(LayerAddress, ParamSlot, &Tensor)> = match p {
                AdapterParams::Lora { a, b } => {
                    vec![(*addr, ParamSlot::LoraA, a), (*addr, ParamSlot::LoraB, b)]
                }
                AdapterParams::Ia3 { scale } => vec![(*addr, ParamSlot::Ia3Scale, scale)],
            };
            items
        })
    }

    pub fn tensor_mut(&mut self, addr: LayerAddress, slot: ParamSlot) -> Option<&mut Tensor> {
        match (self.params.get_mut(&addr)?, slot) {
            (AdapterParams::Lora { a, .. }, ParamSlot::LoraA) => Some(a),
            (AdapterParams::Lora { b, .. }, ParamSlot::LoraB) => Some(b),
            (AdapterParams::Ia3 { scale }, ParamSlot::Ia3Scale) => Some(scale),
            _ => None,
        }
    }

    /// Replaces every trainable tensor with random values (LoRA B uniform in
    /// `±magnitude`, IA3 scales in `1 ± magnitude`). Used to move away from
    /// the zero-effect initialization in gradient checks and tests.
    pub fn perturb(&mut self, seed: u64, magnitude: f32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.params.values_mut() {
            match p {
                AdapterParams::Lora { b, .. } => {
                    for v in b.data_mut() {
                        *v = rng.gen_range(-magnitude..magnitude);
                    }
                }
                AdapterParams::Ia3 { scale } => {
                    for v in scale.data_mut() {
                        *v = 1.0 + rng.gen_range(-magnitude..magnitude);
                    }
                }
            }
        }
    }

    /// Combines a base-layer output with this adapter's contribution.
    ///
    /// `x` is the layer input (needed by LoRA), `base_out` the frozen layer's
    /// output. Addresses without adapter parameters pass `base_out` through.
    pub fn apply(&self, addr: LayerAddress, x: &Tensor, base_out: Tensor) -> Result<Tensor> {
        match self.params.get(&addr) {
            None => Ok(base_out),
            Some(AdapterParams::Lora { a, b }) => {
                let delta = lora_forward(x, a, b, self.lora_scale())?;
                Ok(base_out.add(&delta)?)
            }
            Some(AdapterParams::Ia3 { scale }) => Ok(base_out.mul_row_vector(scale)?),
        }
    }
}

/// `scale · (x A) B` where `scale = alpha / rank`.
pub fn lora_forward(x: &Tensor, a: &Tensor, b: &Tensor, scale: f32) -> Result<Tensor> {
    let h = matmul(x, a)?;
    Ok(matmul(&h, b)?.scale(scale))
}

pub struct LoraGrads {
    pub a: Tensor,
    pub b: Tensor,
    pub x: Tensor,
}

/// Chain rule through [`lora_forward`]: gradients for `A`, `B` and the input.
pub fn lora_backward(x: &Tensor, grad_y: &Tensor, a: &Tensor, b: &Tensor, scale: f32) -> Result<LoraGrads> {
    let h = matmul(x, a)?;
    let grad_b = matmul(&h.transpose()?, grad_y)?.scale(scale);
    let grad_h = matmul_transposed(grad_y, b)?.scale(scale);
    let grad_a = matmul(&x.transpose()?, &grad_h)?;
    let grad_x = matmul_transposed(&grad_h, a)?;
    Ok(LoraGrads {
        a: grad_a,
        b: grad_b,
        x: grad_x,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_b_gives_zero_delta() {
        let x = random(&[3, 4], 1);
        let a = random(&[4, 2], 2);
        let y = lora_forward(&x, &a, &Tensor::zeros(&[2, 5]), 8.0).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_chain() {
        let x = random(&[3, 4], 3);
        let i = Tensor::identity(4);
        let y = lora_forward(&x, &i, &i, 4.0 / 4.0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn forward_matches_two_step_oracle() {
        let x = random(&[3, 6], 4);
        let a = random(&[6, 2], 5);
        let b = random(&[2, 5], 6);
        let y = lora_forward(&x, &a, &b, 0.5).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut want = 0.0f64;
                for r in 0..2 {
                    let mut h = 0.0f64;
                    for t in 0..6 {
                        h += x.get(i, t) as f64 * a.get(t, r) as f64;
                    }
                    want += h * b.get(r, j) as f64;
                }
                assert!((y.get(i, j) as f64 - 0.5 * want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn backward_zero_grad_and_zero_b() {
        let x = random(&[3, 4], 7);
        let a = random(&[4, 2], 8);
        let b = random(&[2, 5], 9);
        let g = lora_backward(&x, &Tensor::zeros(&[3, 5]), &a, &b, 2.0).unwrap();
        for t in [&g.a, &g.b, &g.x] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
        let gy = random(&[3, 5], 10);
        let g = lora_backward(&x, &gy, &a, &Tensor::zeros(&[2, 5]), 2.0).unwrap();
        assert!(g.x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (n, d_in, r, d_out) = (3, 5, 2, 4);
        let x = random(&[n, d_in], 11);
        let a = random(&[d_in, r], 12);
        let b = random(&[r, d_out], 13);
        let gy = random(&[n, d_out], 14);
        let scale = 1.5;
        let g = lora_backward(&x, &gy, &a, &b, scale).unwrap();

        // L = <gy, scale · x A B>, evaluated in f64.
        let loss = |x: &[f64], a: &[f64], b: &[f64]| -> f64 {
            let mut l = 0.0;
            for i in 0..n {
                for j in 0..d_out {
                    let mut y = 0.0;
                    for k in 0..r {
                        let mut h = 0.0;
                        for t in 0..d_in {
                            h += x[i * d_in + t] * a[t * r + k];
                        }
                        y += h * b[k * d_out + j];
                    }
                    l += gy.get(i, j) as f64 * scale as f64 * y;
                }
            }
            l
        };
        let to64 = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        let (x0, a0, b0) = (to64(&x), to64(&a), to64(&b));
        let h = 1e-3;
        let check = |which: usize, analytic: &Tensor| {
            let base = [&x0, &a0, &b0][which];
            let (mut num, mut den) = (0.0, 0.0);
            for idx in 0..base.len() {
                let mut p = [x0.clone(), a0.clone(), b0.clone()];
                let mut m = [x0.clone(), a0.clone(), b0.clone()];
                p[which][idx] += h;
                m[which][idx] -= h;
                let fd = (loss(&p[0], &p[1], &p[2]) - loss(&m[0], &m[1], &m[2])) / (2.0 * h);
                num += (fd - analytic.data()[idx] as f64).powi(2);
                den += fd * fd;
            }
            let rel = (num / den).sqrt();
            assert!(rel < 1e-3, "slot {which}: {rel}");
        };
        check(0, &g.x);
        check(1, &g.a);
        check(2, &g.b);
    }

    #[test]
    fn fresh_adapters_are_neutral() {
        let c = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 10,
            max_seq: 4,
            seed: 0,
        };
        let lora = AdapterState::new(&c, AdapterSpec::lora(2, 4.0, &[Role::Q, Role::FfUp]), 1).unwrap();
        let ia3 = AdapterState::new(&c, AdapterSpec::ia3(), 1).unwrap();
        let x = random(&[3, 8], 15);
        let base = random(&[3, 8], 16);
        let q = LayerAddress::new(0, Role::Q);
        let k = LayerAddress::new(0, Role::K);
        assert!(lora.apply(q, &x, base.clone()).unwrap().bitwise_eq(&base));
        assert!(ia3.apply(k, &x, base.clone()).unwrap().bitwise_eq(&base));
        // Q gets A and B, FF_UP gets A and B.
        assert_eq!(lora.tensors().count(), 4);
        assert_eq!(lora.nbytes(), 4 * (8 * 2 + 2 * 8 + 8 * 2 + 2 * 16));
        assert!(AdapterState::new(&c, AdapterSpec::lora(0, 1.0, &[Role::Q]), 0).is_err());
        let json = serde_json::to_string(&lora).unwrap();
        assert_eq!(serde_json::from_str::<AdapterState>(&json).unwrap(), lora);
    }
}
