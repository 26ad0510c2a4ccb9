//! The shared base executor: frozen affine layers behind a batching queue.
//!
//! The executor keeps no per-request state. Forward and backward requests
//! both reduce to one matrix product against the frozen weight, so a
//! backward request never needs a matching forward.

use std::collections::BTreeSet;

use crate::ledger::{Category, MemoryLedger, Owner};
use crate::model::{BaseLayers, LayerAddress};
use crate::protocol::{ExecError, Pass, Payload, Reply, ReplyPayload, RequestEnvelope};
use crate::tensor::{affine_backward_input, affine_forward, affine_forward_no_bias, split_rows, Tensor};

mod metrics;
pub mod scheduler;
mod service;

pub use metrics::{BatchRecord, ExecutorMetrics};
pub use scheduler::{Batch, BatchPolicy, Pending, PolicyMode, Poll, Scheduler};
pub use service::{ExecutorHandle, ExecutorService, ReplySink};

/// Frozen layers plus the executor's memory ledger.
#[derive(Debug)]
pub struct BaseExecutor {
    layers: BaseLayers,
    ledger: MemoryLedger,
    retain_activations: bool,
}

impl BaseExecutor {
    pub fn new(layers: BaseLayers) -> Self {
        let mut ledger = MemoryLedger::new(Owner::Executor);
        ledger.set(Category::Weights, layers.nbytes());
        Self {
            layers,
            ledger,
            retain_activations: false,
        }
    }

    /// Hosts only `hosted`, dropping every other layer.
    pub fn hosting(layers: &BaseLayers, hosted: &BTreeSet<LayerAddress>) -> Self {
        let subset = layers
            .iter()
            .filter(|(a, _)| hosted.contains(a))
            .map(|(a, p)| (*a, p.clone()))
            .collect();
        Self::new(BaseLayers::new(subset))
    }

    /// Charges every forward input to `SavedActivations` and never releases
    /// it, as an executor that kept activations for a conventional backward
    /// would. Only for contrasting against the stateless default.
    pub fn retain_activations(mut self, on: bool) -> Self {
        self.retain_activations = on;
        self
    }

    pub fn layers(&self) -> &BaseLayers {
        &self.layers
    }

    pub fn ledger(&self) -> &MemoryLedger {
        &self.ledger
    }

    /// Runs a same-layer, same-pass group of requests as one flattened
    /// product and returns one reply per request, in order.
    ///
    /// Malformed requests are rejected individually; the rest still run.
    /// Requests carrying a shared buffer get their output written back into
    /// it (`data: None`); inline requests get it in the reply.
    pub fn execute(&mut self, layer: LayerAddress, pass: Pass, envelopes: &[&RequestEnvelope]) -> Vec<Reply> {
        let mut results: Vec<Option<Result<ReplyPayload, ExecError>>> = vec![None; envelopes.len()];
        let Some(params) = self.layers.get(layer) else {
            return envelopes.iter().map(|e| reply(e, Err(ExecError::UnknownLayer))).collect();
        };
        let (d_in, d_out) = (params.d_in(), params.d_out());
        let (in_w, out_w) = match pass {
            Pass::Forward | Pass::NoiseEffect => (d_in, d_out),
            Pass::Backward => (d_out, d_in),
        };

        let mut rows = Vec::new();
        let mut accepted = Vec::new();
        for (i, e) in envelopes.iter().enumerate() {
            if e.layer != layer || e.pass != pass {
                results[i] = Some(Err(ExecError::UnknownLayer));
                continue;
            }
            if e.width != in_w {
                results[i] = Some(Err(ExecError::WidthMismatch {
                    expected: in_w,
                    got: e.width,
                }));
                continue;
            }
            match e.payload.append_to(e.token_count * in_w, &mut rows) {
                Ok(()) => accepted.push(i),
                Err(err) => results[i] = Some(Err(err)),
            }
        }

        if !accepted.is_empty() {
            let sizes: Vec<usize> = accepted.iter().map(|&i| envelopes[i].token_count).collect();
            let tokens: usize = sizes.iter().sum();
            let transient = ((tokens * (in_w + out_w)) * 4) as u64;
            self.ledger.alloc(Category::TransientBuffer, transient);

            let x = Tensor::new(vec![tokens, in_w], rows).expect("validated row count");
            let y = match pass {
                Pass::Forward => affine_forward(&x, params),
                Pass::Backward => affine_backward_input(&x, params),
                Pass::NoiseEffect => affine_forward_no_bias(&x, params),
            }
            .expect("validated widths");
            if self.retain_activations && pass == Pass::Forward {
                self.ledger.alloc(Category::SavedActivations, x.nbytes());
            }
            let parts = split_rows(&y, &sizes).expect("sizes sum to rows");
            for (&i, part) in accepted.iter().zip(parts) {
                results[i] = Some(deliver(envelopes[i], part, out_w));
            }
            self.ledger.release(Category::TransientBuffer, transient);
        }

        envelopes
            .iter()
            .zip(results)
            .map(|(e, r)| reply(e, r.expect("every request answered")))
            .collect()
    }

    pub fn serve_forward(&mut self, envelopes: &[&RequestEnvelope]) -> Vec<Reply> {
        self.serve(Pass::Forward, envelopes)
    }

    pub fn serve_backward(&mut self, envelopes: &[&RequestEnvelope]) -> Vec<Reply> {
        self.serve(Pass::Backward, envelopes)
    }

    /// Bias-free forward of a single noise matrix.
    pub fn serve_noise_effect(&mut self, envelope: &RequestEnvelope) -> Reply {
        self.execute(envelope.layer, Pass::NoiseEffect, &[envelope])
            .pop()
            .expect("one reply")
    }

    fn serve(&mut self, pass: Pass, envelopes: &[&RequestEnvelope]) -> Vec<Reply> {
        match envelopes.first() {
            Some(first) => self.execute(first.layer, pass, envelopes),
            None => Vec::new(),
        }
    }
}

fn deliver(e: &RequestEnvelope, out: Tensor, width: usize) -> Result<ReplyPayload, ExecError> {
    let token_count = out.rows();
    match &e.payload {
        Payload::Shared(buf) => {
            let need = out.len();
            if buf.capacity() < need {
                return Err(ExecError::PayloadLength {
                    expected: need,
                    got: buf.capacity(),
                });
            }
            buf.write(out.data());
            Ok(ReplyPayload {
                token_count,
                width,
                data: None,
            })
        }
        Payload::Inline(_) => Ok(ReplyPayload {
            token_count,
            width,
            data: Some(out.into_data()),
        }),
    }
}

fn reply(e: &RequestEnvelope, result: Result<ReplyPayload, ExecError>) -> Reply {
    Reply {
        client_id: e.client_id,
        request_id: e.request_id,
        layer: e.layer,
        pass: e.pass,
        result,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_base_layers, ModelConfig, Role};
    use crate::transport::SharedBuffer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 10,
            max_seq: 8,
            seed: 4,
        }
    }

    fn rand_rows(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![rows, cols], d).unwrap()
    }

    fn env(client: u32, layer: LayerAddress, pass: Pass, x: &Tensor) -> RequestEnvelope {
        RequestEnvelope::inline(client, 0, layer, pass, x)
    }

    fn out(r: &Reply) -> Tensor {
        let p = r.result.as_ref().unwrap();
        Tensor::new(vec![p.token_count, p.width], p.data.clone().unwrap()).unwrap()
    }

    #[test]
    fn batched_forward_bitwise_equals_solo() {
        let layers = build_base_layers(&cfg()).unwrap();
        let mut ex = BaseExecutor::new(layers.clone());
        let up = LayerAddress::new(0, Role::FfUp);
        let a = rand_rows(3, 8, 1);
        let b = rand_rows(5, 8, 2);
        let (ea, eb) = (env(1, up, Pass::Forward, &a), env(2, up, Pass::Forward, &b));
        let batched = ex.serve_forward(&[&ea, &eb]);
        let solo_a = affine_forward(&a, layers.get(up).unwrap()).unwrap();
        let solo_b = affine_forward(&b, layers.get(up).unwrap()).unwrap();
        assert!(out(&batched[0]).bitwise_eq(&solo_a));
        assert!(out(&batched[1]).bitwise_eq(&solo_b));
        assert_eq!(ex.ledger().get(Category::SavedActivations), 0);
        assert_eq!(ex.ledger().get(Category::TransientBuffer), 0);
        assert_eq!(ex.ledger().peak(Category::TransientBuffer), (8 * (8 + 12) * 4) as u64);
    }

    #[test]
    fn backward_without_forward_and_batched() {
        let layers = build_base_layers(&cfg()).unwrap();
        let mut ex = BaseExecutor::new(layers.clone());
        let down = LayerAddress::new(0, Role::FfDown);
        let g1 = rand_rows(2, 8, 3);
        let g2 = rand_rows(4, 8, 4);
        let (e1, e2) = (env(1, down, Pass::Backward, &g1), env(2, down, Pass::Backward, &g2));
        let solo = ex.serve_backward(&[&e2]);
        let both = ex.serve_backward(&[&e1, &e2]);
        assert!(out(&solo[0]).bitwise_eq(&out(&both[1])));
        let expect = affine_backward_input(&g1, layers.get(down).unwrap()).unwrap();
        assert!(out(&both[0]).bitwise_eq(&expect));
        assert_eq!(out(&both[0]).shape(), &[2, 12]);
    }

    #[test]
    fn bad_request_fails_alone() {
        let mut ex = BaseExecutor::new(build_base_layers(&cfg()).unwrap());
        let q = LayerAddress::new(0, Role::Q);
        let good = env(1, q, Pass::Forward, &rand_rows(2, 8, 5));
        let wide = env(2, q, Pass::Forward, &rand_rows(2, 9, 6));
        let mut short = env(3, q, Pass::Forward, &rand_rows(2, 8, 7));
        short.payload = Payload::Inline(vec![0.0; 3]);
        let r = ex.serve_forward(&[&good, &wide, &short]);
        assert!(r[0].result.is_ok());
        assert_eq!(r[1].result, Err(ExecError::WidthMismatch { expected: 8, got: 9 }));
        assert!(matches!(r[2].result, Err(ExecError::PayloadLength { .. })));
        let missing = env(1, LayerAddress::new(7, Role::Q), Pass::Forward, &rand_rows(1, 8, 8));
        assert_eq!(ex.serve_forward(&[&missing])[0].result, Err(ExecError::UnknownLayer));
    }

    #[test]
    fn noise_effect_drops_bias() {
        let layers = build_base_layers(&cfg()).unwrap();
        let mut ex = BaseExecutor::new(layers.clone());
        let v = LayerAddress::new(0, Role::V);
        let zero = Tensor::zeros(&[3, 8]);
        let r = ex.serve_noise_effect(&env(1, v, Pass::NoiseEffect, &zero));
        assert!(out(&r).data().iter().all(|&x| x == 0.0));
        let n = rand_rows(3, 8, 9);
        let r = ex.serve_noise_effect(&env(1, v, Pass::NoiseEffect, &n));
        let w = layers.get(v).unwrap().weight();
        assert!(out(&r).bitwise_eq(&crate::tensor::matmul(&n, w).unwrap()));
    }

    #[test]
    fn shared_payload_written_back() {
        let layers = build_base_layers(&cfg()).unwrap();
        let mut ex = BaseExecutor::new(layers.clone());
        let up = LayerAddress::new(0, Role::FfUp);
        let x = rand_rows(2, 8, 10);
        let buf = SharedBuffer::new(1, 2 * 12);
        buf.write(x.data());
        let e = RequestEnvelope {
            client_id: 1,
            request_id: 0,
            layer: up,
            pass: Pass::Forward,
            token_count: 2,
            width: 8,
            payload: Payload::Shared(buf.clone()),
        };
        let r = ex.serve_forward(&[&e]);
        assert_eq!(r[0].result.as_ref().unwrap().data, None);
        let y = Tensor::new(vec![2, 12], buf.read(24)).unwrap();
        assert!(y.bitwise_eq(&affine_forward(&x, layers.get(up).unwrap()).unwrap()));
    }

    #[test]
    fn retained_mode_grows_saved_activations() {
        let mut ex = BaseExecutor::new(build_base_layers(&cfg()).unwrap()).retain_activations(true);
        let q = LayerAddress::new(0, Role::Q);
        for i in 1..=3u64 {
            let e = env(1, q, Pass::Forward, &rand_rows(4, 8, i));
            ex.serve_forward(&[&e]);
            assert_eq!(ex.ledger().get(Category::SavedActivations), i * 4 * 8 * 4);
        }
    }
}
