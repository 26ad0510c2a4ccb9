//! Double-precision monolithic model and central finite differences.
//!
//! Written independently of the f32 kernels (plain nested loops, no shared
//! helpers) so the split runtime's gradients can be checked against
//! something that does not share its code.

use std::collections::BTreeMap;

use crate::model::{AdapterMethod, AdapterState, BaseModel, LayerAddress, ModelConfig, ParamSlot, Role, TokenBatch};
use crate::tensor::Tensor;

const EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
struct Mat {
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn from_tensor(t: &Tensor) -> Self {
        let cols = match t.shape() {
            [n] => *n,
            [_, c] => *c,
            s => panic!("unsupported shape {s:?}"),
        };
        Self {
            cols,
            data: t.data().iter().map(|&v| f64::from(v)).collect(),
        }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

fn matmul(x: &[Vec<f64>], w: &Mat) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let mut out = vec![0.0; w.cols];
            for (i, &xi) in row.iter().enumerate() {
                for (j, o) in out.iter_mut().enumerate() {
                    *o += xi * w.at(i, j);
                }
            }
            out
        })
        .collect()
}

fn rmsnorm(x: &[Vec<f64>], gain: &Mat) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + EPS).sqrt();
            row.iter().zip(&gain.data).map(|(v, g)| v * inv * g).collect()
        })
        .collect()
}

fn add(a: &mut [Vec<f64>], b: &[Vec<f64>]) {
    for (ra, rb) in a.iter_mut().zip(b) {
        for (x, y) in ra.iter_mut().zip(rb) {
            *x += y;
        }
    }
}

/// f64 copy of a model and an adapter. Adapter values live in a flat map so
/// finite differences can nudge them one at a time.
pub struct Oracle {
    config: ModelConfig,
    base: BTreeMap<LayerAddress, (Mat, Option<Mat>)>,
    embedding: Mat,
    norms: Vec<(Mat, Mat)>,
    final_norm: Mat,
    method: AdapterMethod,
    params: BTreeMap<(LayerAddress, ParamSlot), Mat>,
}

impl Oracle {
    pub fn new(model: &BaseModel, adapter: &AdapterState) -> Self {
        let base = model
            .base
            .iter()
            .map(|(a, p)| (*a, (Mat::from_tensor(p.weight()), p.bias().map(Mat::from_tensor))))
            .collect();
        Self {
            config: model.config,
            base,
            embedding: Mat::from_tensor(&model.client.embedding),
            norms: model
                .client
                .norms
                .iter()
                .map(|n| (Mat::from_tensor(&n.attn), Mat::from_tensor(&n.ff)))
                .collect(),
            final_norm: Mat::from_tensor(&model.client.final_norm),
            method: adapter.spec().method,
            params: adapter
                .tensors()
                .map(|(a, s, t)| ((a, s), Mat::from_tensor(t)))
                .collect(),
        }
    }

    fn layer(&self, addr: LayerAddress, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (w, b) = &self.base[&addr];
        let mut y = matmul(x, w);
        if let Some(b) = b {
            for row in &mut y {
                for (v, bv) in row.iter_mut().zip(&b.data) {
                    *v += bv;
                }
            }
        }
        match self.method {
            AdapterMethod::Lora { rank, alpha } => {
                if let (Some(a), Some(bm)) = (
                    self.params.get(&(addr, ParamSlot::LoraA)),
                    self.params.get(&(addr, ParamSlot::LoraB)),
                ) {
                    let s = f64::from(alpha) / rank as f64;
                    let delta = matmul(&matmul(x, a), bm);
                    for (row, drow) in y.iter_mut().zip(&delta) {
                        for (v, d) in row.iter_mut().zip(drow) {
                            *v += s * d;
                        }
                    }
                }
            }
            AdapterMethod::Ia3 => {
                if let Some(scale) = self.params.get(&(addr, ParamSlot::Ia3Scale)) {
                    for row in &mut y {
                        for (v, s) in row.iter_mut().zip(&scale.data) {
                            *v *= s;
                        }
                    }
                }
            }
        }
        y
    }

    fn attention(&self, q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = self.config.d_model;
        let dh = d / self.config.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![vec![0.0; d]; q.len()];
        for h in 0..self.config.n_heads {
            let c = h * dh..(h + 1) * dh;
            for i in 0..q.len() {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| c.clone().map(|x| q[i][x] * k[j][x]).sum::<f64>() * scale)
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    for x in c.clone() {
                        out[i][x] += ej / z * v[j][x];
                    }
                }
            }
        }
        out
    }

    /// Logits of one sequence.
    pub fn logits(&self, ids: &[u32]) -> Vec<Vec<f64>> {
        let mut h: Vec<Vec<f64>> = ids
            .iter()
            .map(|&t| self.embedding.data[t as usize * self.embedding.cols..][..self.embedding.cols].to_vec())
            .collect();
        for block in 0..self.config.n_layers {
            let at = |r| LayerAddress::new(block as u16, r);
            let a = rmsnorm(&h, &self.norms[block].0);
            let q = self.layer(at(Role::Q), &a);
            let k = self.layer(at(Role::K), &a);
            let v = self.layer(at(Role::V), &a);
            let o = self.layer(at(Role::O), &self.attention(&q, &k, &v));
            add(&mut h, &o);
            let m = rmsnorm(&h, &self.norms[block].1);
            let u = self.layer(at(Role::FfUp), &m);
            let su: Vec<Vec<f64>> = u
                .iter()
                .map(|r| r.iter().map(|&x| x / (1.0 + (-x).exp())).collect())
                .collect();
            add(&mut h, &self.layer(at(Role::FfDown), &su));
        }
        let f = rmsnorm(&h, &self.final_norm);
        self.layer(LayerAddress::lm_head(&self.config), &f)
    }

    /// Mean cross-entropy over every position of the batch.
    pub fn loss(&self, tokens: &TokenBatch, targets: &[u32]) -> f64 {
        let mut total = 0.0;
        for b in 0..tokens.batch {
            let logits = self.logits(tokens.sequence(b));
            for (i, row) in logits.iter().enumerate() {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - row[targets[b * tokens.seq + i] as usize];
            }
        }
        total / tokens.tokens() as f64
    }

    /// Central differences of [`loss`](Self::loss) for every adapter value.
    pub fn finite_difference(&mut self, tokens: &TokenBatch, targets: &[u32], h: f64) -> BTreeMap<(LayerAddress, ParamSlot), Vec<f64>> {
        let keys: Vec<_> = self.params.keys().copied().collect();
        let mut out = BTreeMap::new();
        for key in keys {
            let n = self.params[&key].data.len();
            let mut g = Vec::with_capacity(n);
            for i in 0..n {
                let orig = self.params[&key].data[i];
                self.params.get_mut(&key).expect("key").data[i] = orig + h;
                let up = self.loss(tokens, targets);
                self.params.get_mut(&key).expect("key").data[i] = orig - h;
                let down = self.loss(tokens, targets);
                self.params.get_mut(&key).expect("key").data[i] = orig;
                g.push((up - down) / (2.0 * h));
            }
            out.insert(key, g);
        }
        out
    }

    /// Central differences at `per_tensor` coordinates of every adapter
    /// tensor, chosen by `seed`. Returns `(key, index, gradient)` triples.
    pub fn finite_difference_sampled(
        &mut self,
        tokens: &TokenBatch,
        targets: &[u32],
        h: f64,
        per_tensor: usize,
        seed: u64,
    ) -> Vec<((LayerAddress, ParamSlot), usize, f64)> {
        let keys: Vec<_> = self.params.keys().copied().collect();
        let mut state = seed | 1;
        let mut out = Vec::new();
        for key in keys {
            let n = self.params[&key].data.len();
            for _ in 0..per_tensor.min(n) {
                // xorshift: no need to share the runtime's RNG here.
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                let i = (state % n as u64) as usize;
                let orig = self.params[&key].data[i];
                self.params.get_mut(&key).expect("key").data[i] = orig + h;
                let up = self.loss(tokens, targets);
                self.params.get_mut(&key).expect("key").data[i] = orig - h;
                let down = self.loss(tokens, targets);
                self.params.get_mut(&key).expect("key").data[i] = orig;
                out.push((key, i, (up - down) / (2.0 * h)));
            }
        }
        out
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both are 0.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
