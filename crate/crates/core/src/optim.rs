//! SGD and Adam over adapter parameters. Base weights are never visible here.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{AdapterGrads, AdapterState, LayerAddress, ParamSlot};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd { lr: f32 },
    Adam { lr: f32 },
}

impl OptimizerConfig {
    pub fn adam(lr: f32) -> Self {
        OptimizerConfig::Adam { lr }
    }
}

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const EPS: f32 = 1e-8;

struct Moments {
    m: Tensor,
    v: Tensor,
}

pub struct Optimizer {
    config: OptimizerConfig,
    step: u32,
    moments: BTreeMap<(LayerAddress, ParamSlot), Moments>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// Bytes of optimizer state currently held (moments are allocated lazily
    /// on the first step).
    pub fn state_bytes(&self) -> u64 {
        self.moments.values().map(|m| m.m.nbytes() + m.v.nbytes()).sum()
    }

    pub fn step(&mut self, adapter: &mut AdapterState, grads: &AdapterGrads) {
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd { lr } => {
                for (&(addr, slot), g) in grads {
                    if let Some(p) = adapter.tensor_mut(addr, slot) {
                        for (w, gv) in p.data_mut().iter_mut().zip(g.data()) {
                            *w -= lr * gv;
                        }
                    }
                }
            }
            OptimizerConfig::Adam { lr } => {
                let t = self.step as i32;
                let bc1 = 1.0 - BETA1.powi(t);
                let bc2 = 1.0 - BETA2.powi(t);
                for (&key, g) in grads {
                    let Some(p) = adapter.tensor_mut(key.0, key.1) else {
                        continue;
                    };
                    let mom = self.moments.entry(key).or_insert_with(|| Moments {
                        m: Tensor::zeros(g.shape()),
                        v: Tensor::zeros(g.shape()),
                    });
                    let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
                    for (i, (w, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * gv;
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * gv * gv;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        *w -= lr * mh / (vh.sqrt() + EPS);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AdapterSpec, ModelConfig, Role};

    fn setup() -> (AdapterState, AdapterGrads) {
        let c = ModelConfig {
            n_layers: 1,
            d_model: 4,
            n_heads: 1,
            d_ff: 8,
            vocab_size: 6,
            max_seq: 4,
            seed: 0,
        };
        let a = AdapterState::new(&c, AdapterSpec::lora(2, 2.0, &[Role::Q]), 0).unwrap();
        let grads = a.tensors().map(|(addr, slot, t)| ((addr, slot), Tensor::full(t.shape(), 0.5))).collect();
        (a, grads)
    }

    #[test]
    fn zero_lr_changes_nothing() {
        for cfg in [OptimizerConfig::Sgd { lr: 0.0 }, OptimizerConfig::Adam { lr: 0.0 }] {
            let (mut a, g) = setup();
            let before = a.clone();
            Optimizer::new(cfg).step(&mut a, &g);
            assert_eq!(a, before);
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let (mut a, g) = setup();
        let before = a.clone();
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.01));
        assert_eq!(opt.state_bytes(), 0);
        opt.step(&mut a, &g);
        assert_eq!(opt.state_bytes(), 2 * a.nbytes());
        for ((_, _, x), (_, _, y)) in a.tensors().zip(before.tensors()) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert!((q - p - 0.01).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sgd_step() {
        let (mut a, g) = setup();
        let before = a.clone();
        Optimizer::new(OptimizerConfig::Sgd { lr: 0.1 }).step(&mut a, &g);
        for ((_, _, x), (_, _, y)) in a.tensors().zip(before.tensors()) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert!((q - p - 0.05).abs() < 1e-7);
            }
        }
    }
}
