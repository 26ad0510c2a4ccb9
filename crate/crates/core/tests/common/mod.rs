#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splitserve_core::client::ClientModel;
use splitserve_core::executor::{BaseExecutor, BatchPolicy, ExecutorService, PolicyMode};
use splitserve_core::model::{build_model, BaseModel};
use splitserve_core::transport::{LocalChannel, RemoteChannel, TcpServer};
use splitserve_core::{ModelConfig, TokenBatch};

pub fn config(n_layers: usize, d_model: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model,
        n_heads: 4,
        d_ff: 2 * d_model,
        vocab_size: 48,
        max_seq: 16,
        seed,
    }
}

pub fn model(c: &ModelConfig) -> BaseModel {
    build_model(c).unwrap()
}

pub fn tokens(c: &ModelConfig, batch: usize, seq: usize, seed: u64) -> TokenBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = (0..batch * seq).map(|_| rng.gen_range(0..c.vocab_size as u32)).collect();
    TokenBatch::new(batch, seq, ids).unwrap()
}

pub fn service(m: &BaseModel, mode: PolicyMode) -> ExecutorService {
    ExecutorService::start(BaseExecutor::new(m.base.clone()), BatchPolicy::with_mode(mode))
}

pub fn local_client(svc: &ExecutorService, m: &BaseModel, id: u32, batch: usize, seq: usize) -> ClientModel {
    let ch = LocalChannel::connect(svc.handle(), id, &m.config, batch, seq);
    ClientModel::from_parts(m.config, m.client.clone(), BTreeMap::new(), Box::new(ch)).unwrap()
}

pub fn remote_client(server: &TcpServer, m: &BaseModel, id: u32) -> ClientModel {
    let ch = RemoteChannel::connect(server.local_addr(), id, &m.config).unwrap();
    ClientModel::from_parts(m.config, m.client.clone(), BTreeMap::new(), Box::new(ch)).unwrap()
}
