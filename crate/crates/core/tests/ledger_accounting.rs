mod common;

use std::collections::BTreeMap;
use std::thread;

use common::*;
use splitserve_core::client::{ClientJob, ClientModel, JobConfig, JobKind};
use splitserve_core::executor::{BaseExecutor, PolicyMode};
use splitserve_core::ledger::formulas;
use splitserve_core::model::{AdapterSpec, AdapterState};
use splitserve_core::optim::OptimizerConfig;
use splitserve_core::transport::{LocalChannel, TcpServer};
use splitserve_core::{Category, Placement, Role};

fn ft_config(batch: usize, seq: usize, adapter: AdapterSpec) -> JobConfig {
    JobConfig {
        name: "ft".into(),
        kind: JobKind::Finetune,
        adapter,
        batch,
        seq,
        steps: 3,
        gen_tokens: 0,
        placement: Placement::Fast,
        privacy: Default::default(),
        optimizer: OptimizerConfig::adam(1e-2),
        seed: 1,
        samples: 8,
        profile: Default::default(),
    }
}

#[test]
fn fresh_executor_holds_exactly_the_frozen_weights() {
    let c = config(2, 32, 1);
    let m = model(&c);
    let ex = BaseExecutor::new(m.base.clone());
    assert_eq!(ex.ledger().total(), formulas::base_weight_bytes(&c, 4));
    // Hand count: per block 4·d² + 2·d·f weights plus 4·d + f + d biases,
    // then the head.
    let (d, f, v) = (32u64, 64u64, 48u64);
    let per_block = 4 * d * d + 2 * d * f + 4 * d + f + d;
    assert_eq!(ex.ledger().total(), (2 * per_block + d * v + v) * 4);
}

#[test]
fn measured_peak_equals_closed_form() {
    let c = config(2, 32, 3);
    let m = model(&c);
    for spec in [
        AdapterSpec::lora(8, 16.0, &[Role::Q, Role::V]),
        AdapterSpec::lora(4, 8.0, &Role::ALL),
        AdapterSpec::ia3(),
        AdapterSpec::lora(2, 2.0, &[Role::LmHead]),
    ] {
        let svc = service(&m, PolicyMode::Opportunistic);
        let cfg = ft_config(2, 12, spec.clone());
        let ch = LocalChannel::connect(svc.handle(), 1, &c, cfg.batch, cfg.seq);
        let client = ClientModel::from_parts(c, m.client.clone(), BTreeMap::new(), Box::new(ch)).unwrap();
        let mut job = ClientJob::from_config(&cfg, client).unwrap();
        job.run(&cfg).unwrap();
        let want = formulas::finetune_job_peak_bytes(&c, &spec, cfg.batch, cfg.seq, 4);
        assert_eq!(job.ledger().peak_total(), want, "{spec:?}");
        assert_eq!(
            job.ledger().peak(Category::SavedActivations),
            formulas::saved_activation_bytes(&c, &spec, cfg.batch, cfg.seq, 4)
        );
        assert_eq!(job.ledger().get(Category::SavedActivations), 0);
        assert_eq!(job.ledger().get(Category::Optimizer), formulas::adam_state_bytes(&c, &spec, 4));
    }
}

#[test]
fn train_step_ledger_deltas() {
    let c = config(1, 32, 2);
    let m = model(&c);
    let svc = service(&m, PolicyMode::Opportunistic);
    let cfg = ft_config(2, 8, AdapterSpec::lora(4, 8.0, &[Role::Q]));
    let ch = LocalChannel::connect(svc.handle(), 1, &c, 2, 8);
    let client = ClientModel::from_parts(c, m.client.clone(), BTreeMap::new(), Box::new(ch)).unwrap();
    let mut job = ClientJob::from_config(&cfg, client).unwrap();
    let data = cfg.copy_dataset(&c);
    let before_exec = svc.handle().ledger().total();
    let mut totals = vec![job.ledger().total()];
    for step in 0..3 {
        let (t, y) = cfg.training_batch(&data, step);
        job.train_step(&t, &y).unwrap();
        totals.push(job.ledger().total());
        assert_eq!(svc.handle().ledger().total(), before_exec);
    }
    let adam = formulas::adam_state_bytes(&c, &cfg.adapter, 4);
    assert_eq!(totals[1] - totals[0], adam);
    assert_eq!(totals[2], totals[1]);
    assert_eq!(totals[3], totals[2]);
}

#[test]
fn kv_cache_bytes_after_prefill() {
    let c = config(2, 32, 4);
    let m = model(&c);
    let svc = service(&m, PolicyMode::Opportunistic);
    let mut client = local_client(&svc, &m, 1, 3, 7);
    let mut cache = splitserve_core::KVCache::new(&c, 3, Placement::Offloaded);
    client.forward(None, &tokens(&c, 3, 7, 1), Some(&mut cache), None).unwrap();
    assert_eq!(cache.nbytes(), (2 * 2 * 7 * 32 * 4 * 3) as u64);
    assert_eq!(cache.nbytes(), formulas::kv_cache_bytes(&c, 3, 7, 4));
}

#[test]
fn executor_footprint_is_flat_in_client_count() {
    let c = config(2, 32, 5);
    let m = model(&c);
    let spec = AdapterSpec::lora(4, 8.0, &[Role::Q, Role::V]);
    let mut exec_totals = Vec::new();
    let mut client_sums = Vec::new();
    for n in [1u32, 2, 4, 8] {
        let svc = service(&m, PolicyMode::Opportunistic);
        let handles: Vec<_> = (0..n)
            .map(|id| {
                let cfg = ft_config(2, 8, spec.clone());
                let ch = LocalChannel::connect(svc.handle(), id, &c, 2, 8);
                let client = ClientModel::from_parts(c, m.client.clone(), BTreeMap::new(), Box::new(ch)).unwrap();
                thread::spawn(move || {
                    let mut job = ClientJob::from_config(&cfg, client).unwrap();
                    job.run(&cfg).unwrap();
                    job.ledger().peak_total()
                })
            })
            .collect();
        let sum: u64 = handles.into_iter().map(|h| h.join().unwrap()).sum();
        let ledger = svc.handle().ledger();
        let non_transient_peak: u64 = ledger
            .peaks
            .iter()
            .filter(|(c, _)| **c != Category::TransientBuffer)
            .map(|(_, b)| b)
            .sum();
        exec_totals.push((ledger.total_excluding_transient(), non_transient_peak));
        client_sums.push(sum);
    }
    assert!(exec_totals.windows(2).all(|w| w[0] == w[1]), "{exec_totals:?}");
    for (i, n) in [1u64, 2, 4, 8].into_iter().enumerate() {
        let expect = client_sums[0] * n;
        let dev = (client_sums[i] as f64 - expect as f64).abs() / expect as f64;
        assert!(dev <= 0.01, "{n} clients: {} vs {expect}", client_sums[i]);
    }
}

#[test]
fn shared_buffer_grows_to_exact_need_and_never_shrinks() {
    let c = config(1, 32, 6);
    let m = model(&c);
    let svc = service(&m, PolicyMode::Opportunistic);
    let ch = LocalChannel::connect(svc.handle(), 1, &c, 1, 4);
    let buf = ch.buffer().clone();
    let mut client = ClientModel::from_parts(c, m.client.clone(), BTreeMap::new(), Box::new(ch)).unwrap();
    let w = c.max_width();
    assert_eq!(buf.capacity(), 4 * w);
    client.forward(None, &tokens(&c, 1, 3, 1), None, None).unwrap();
    assert_eq!((buf.capacity(), buf.resizes()), (4 * w, 0));
    client.forward(None, &tokens(&c, 2, 5, 1), None, None).unwrap();
    assert_eq!((buf.capacity(), buf.resizes()), (10 * w, 1));
    client.forward(None, &tokens(&c, 1, 2, 1), None, None).unwrap();
    assert_eq!((buf.capacity(), buf.resizes()), (10 * w, 1));
    assert_eq!(client.transport().stats().buffer_resizes, 1);
    assert_eq!(client.transport().buffer_bytes(), (10 * w * 4) as u64);
}

#[test]
fn payload_copy_counts_per_channel() {
    let c = config(1, 32, 7);
    let m = model(&c);
    let svc = service(&m, PolicyMode::Opportunistic);
    let mut local = local_client(&svc, &m, 1, 1, 4);
    local.forward(None, &tokens(&c, 1, 4, 1), None, None).unwrap();
    let s = local.transport().stats();
    assert_eq!(s.requests, c.layer_addresses().len() as u64);
    assert_eq!(s.payload_copies, 0);
    assert_eq!(s.bytes_sent, 0);

    let server = TcpServer::bind("127.0.0.1:0", svc.handle()).unwrap();
    let mut remote = remote_client(&server, &m, 2);
    remote.forward(None, &tokens(&c, 1, 4, 1), None, None).unwrap();
    let s = remote.transport().stats();
    assert_eq!(s.payload_copies, 2 * s.requests);
    assert!(s.bytes_sent > 0 && s.bytes_received > 0);
}

#[test]
fn decode_transfer_bytes_scale_with_placement() {
    let c = config(2, 32, 8);
    let m = model(&c);
    let svc = service(&m, PolicyMode::Opportunistic);
    let mut gen_cfg = ft_config(1, 2, AdapterSpec::lora(2, 2.0, &[Role::Q]));
    gen_cfg.kind = JobKind::Inference;
    gen_cfg.placement = Placement::Offloaded;
    let ch = LocalChannel::connect(svc.handle(), 1, &c, 1, 2);
    let client = ClientModel::from_parts(c, m.client.clone(), BTreeMap::new(), Box::new(ch)).unwrap();
    let adapter = AdapterState::new(&c, gen_cfg.adapter.clone(), 1).unwrap();
    let mut job = ClientJob::new("g", JobKind::Inference, client, adapter, gen_cfg.optimizer, Placement::Offloaded);
    let g = job.generate(&gen_cfg.prompt(&c, 0), 10).unwrap();
    assert_eq!(g.transfers.len(), 10);
    for w in g.transfers.windows(2) {
        let step = w[1].compute_on_fast - w[0].compute_on_fast;
        assert_eq!(step, formulas::kv_cache_bytes(&c, 1, 1, 4));
        assert_eq!(w[1].compute_on_offloaded, w[0].compute_on_offloaded);
    }
    assert_eq!(job.ledger().get(Category::KvCache), 0);
    assert_eq!(job.ledger().peak(Category::KvCache), formulas::kv_cache_bytes(&c, 1, 11, 4));
}
