//! Causal multi-head attention, computed client-side.
//!
//! Heads are contiguous column ranges of the `[positions, d_model]` Q/K/V
//! matrices. Query row `i` sits at absolute position `offset + i` and attends to
//! keys `0..=offset + i`.

use super::Result;
use crate::tensor::{softmax_in_place, Tensor, TensorError};

pub struct AttentionOutput {
    /// `[s_new, d_model]`
    pub out: Tensor,
    /// Per head, `[s_new, s_total]`; masked positions hold exactly 0.
    pub probs: Vec<Tensor>,
}

fn check(q: &Tensor, k: &Tensor, v: &Tensor, n_heads: usize, offset: usize) -> Result<(usize, usize, usize)> {
    let (s_new, d) = (q.rows(), q.cols());
    let s_total = k.rows();
    if k.shape() != v.shape() || k.cols() != d || d % n_heads != 0 || offset + s_new > s_total {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        }
        .into());
    }
    Ok((s_new, s_total, d))
}

pub fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, n_heads: usize, offset: usize) -> Result<AttentionOutput> {
    let (s_new, s_total, d) = check(q, k, v, n_heads, offset)?;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = Tensor::zeros(&[s_new, d]);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let mut p = Tensor::zeros(&[s_new, s_total]);
        for i in 0..s_new {
            let visible = offset + i + 1;
            let qi = &q.row(i)[cols.clone()];
            let row = &mut p.row_mut(i)[..visible];
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &k.row(j)[cols.clone()];
                let mut dot = 0.0f32;
                for (a, b) in qi.iter().zip(kj) {
                    dot += a * b;
                }
                *s = dot * scale;
            }
            softmax_in_place(row);
            let o = &mut out.row_mut(i)[cols.clone()];
            for j in 0..visible {
                let w = p.get(i, j);
                for (oc, vc) in o.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *oc += w * vc;
                }
            }
        }
        probs.push(p);
    }
    Ok(AttentionOutput { out, probs })
}

pub struct AttentionGrads {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[Tensor],
    grad_out: &Tensor,
    n_heads: usize,
    offset: usize,
) -> Result<AttentionGrads> {
    let (s_new, s_total, d) = check(q, k, v, n_heads, offset)?;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut dq = Tensor::zeros(&[s_new, d]);
    let mut dk = Tensor::zeros(&[s_total, d]);
    let mut dv = Tensor::zeros(&[s_total, d]);
    for (h, p) in probs.iter().enumerate().take(n_heads) {
        let c0 = h * dh;
        for i in 0..s_new {
            let visible = offset + i + 1;
            let go = &grad_out.row(i)[c0..c0 + dh];
            // dP[i, j] = dO_i · V_j
            let mut dp = vec![0.0f32; visible];
            for (j, slot) in dp.iter_mut().enumerate() {
                let vj = &v.row(j)[c0..c0 + dh];
                *slot = go.iter().zip(vj).map(|(a, b)| a * b).sum();
            }
            let mut weighted = 0.0f32;
            for (j, &dpj) in dp.iter().enumerate() {
                weighted += p.get(i, j) * dpj;
            }
            for (j, &dpj) in dp.iter().enumerate() {
                let pij = p.get(i, j);
                let ds = pij * (dpj - weighted) * scale;
                for c in 0..dh {
                    dv.row_mut(j)[c0 + c] += pij * go[c];
                    dq.row_mut(i)[c0 + c] += ds * k.row(j)[c0 + c];
                    dk.row_mut(j)[c0 + c] += ds * q.row(i)[c0 + c];
                }
            }
        }
    }
    Ok(AttentionGrads { q: dq, k: dk, v: dv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_position_returns_v() {
        let q = random(&[1, 4], 1);
        let k = random(&[1, 4], 2);
        let v = random(&[1, 4], 3);
        let a = attention_forward(&q, &k, &v, 2, 0).unwrap();
        assert_eq!(a.out, v);
        assert!(a.probs.iter().all(|p| p.data() == [1.0]));
    }

    #[test]
    fn identical_keys_and_values_ignore_query() {
        let row = random(&[1, 4], 4);
        let kv = Tensor::from_rows(&[row.row(0).to_vec(), row.row(0).to_vec()]).unwrap();
        for seed in 0..3 {
            let q = random(&[2, 4], 10 + seed);
            let a = attention_forward(&q, &kv, &kv, 1, 0).unwrap();
            for i in 0..2 {
                for (o, want) in a.out.row(i).iter().zip(row.row(0)) {
                    assert!((o - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn masked_probs_are_zero() {
        let q = random(&[3, 4], 5);
        let k = random(&[3, 4], 6);
        let a = attention_forward(&q, &k, &k, 2, 0).unwrap();
        for p in &a.probs {
            assert_eq!(p.get(0, 1), 0.0);
            assert_eq!(p.get(0, 2), 0.0);
            assert_eq!(p.get(1, 2), 0.0);
        }
    }

    #[test]
    fn decode_row_matches_prefill_row() {
        let q = random(&[3, 4], 7);
        let k = random(&[3, 4], 8);
        let v = random(&[3, 4], 9);
        let full = attention_forward(&q, &k, &v, 2, 0).unwrap();
        let last = attention_forward(&q.slice_rows(2, 3).unwrap(), &k, &v, 2, 2).unwrap();
        assert!(last.out.max_abs_diff(&full.out.slice_rows(2, 3).unwrap()).unwrap() <= 1e-6);
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Two tokens, one head, f64 oracle of L = <G, attention(q, k, v)>.
        let (s, d) = (2, 3);
        let q = random(&[s, d], 20);
        let k = random(&[s, d], 21);
        let v = random(&[s, d], 22);
        let g = random(&[s, d], 23);
        let fwd = attention_forward(&q, &k, &v, 1, 0).unwrap();
        let grads = attention_backward(&q, &k, &v, &fwd.probs, &g, 1, 0).unwrap();

        let loss = |q: &[f64], k: &[f64], v: &[f64]| -> f64 {
            let scale = 1.0 / (d as f64).sqrt();
            let mut l = 0.0;
            for i in 0..s {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() * scale)
                    .collect();
                let max = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for c in 0..d {
                    let o: f64 = (0..=i).map(|j| (scores[j] - max).exp() / z * v[j * d + c]).sum();
                    l += g.get(i, c) as f64 * o;
                }
            }
            l
        };
        let to64 = |t: &Tensor| t.data().iter().map(|&x| x as f64).collect::<Vec<_>>();
        let base = [to64(&q), to64(&k), to64(&v)];
        let analytic = [&grads.q, &grads.k, &grads.v];
        let h = 1e-3;
        for which in 0..3 {
            let (mut num, mut den) = (0.0, 0.0);
            for idx in 0..s * d {
                let mut p = base.clone();
                let mut m = base.clone();
                p[which][idx] += h;
                m[which][idx] -= h;
                let fd = (loss(&p[0], &p[1], &p[2]) - loss(&m[0], &m[1], &m[2])) / (2.0 * h);
                num += (fd - analytic[which].data()[idx] as f64).powi(2);
                den += fd * fd;
            }
            let rel = (num / den.max(1e-30)).sqrt();
            assert!(rel < 1e-3, "input {which}: rel err {rel}");
        }
    }
}
