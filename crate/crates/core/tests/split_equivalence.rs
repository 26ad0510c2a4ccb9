mod common;

use std::collections::BTreeSet;

use common::*;
use proptest::prelude::*;
use splitserve_core::client::virtualize;
use splitserve_core::executor::PolicyMode;
use splitserve_core::kv::{KVCache, Placement};
use splitserve_core::model::{reference_forward, AdapterSpec, AdapterState};
use splitserve_core::transport::TcpServer;
use splitserve_core::{LayerAddress, Role, TokenBatch};

const TOL: f32 = 1e-5;

fn pairs() -> Vec<(usize, usize, u64)> {
    let mut out = Vec::new();
    for (i, n_layers) in [1, 2, 4].into_iter().enumerate() {
        for d in [32, 64] {
            for s in 0..4 {
                out.push((n_layers, d, 100 * i as u64 + d as u64 + s));
            }
        }
    }
    out
}

#[test]
fn local_channel_matches_monolithic_reference() {
    let cases = pairs();
    assert!(cases.len() >= 20);
    for (n_layers, d, seed) in cases {
        let c = config(n_layers, d, seed);
        let m = model(&c);
        let svc = service(&m, PolicyMode::Opportunistic);
        let mut client = local_client(&svc, &m, 1, 2, 6);
        let mut adapter = AdapterState::new(&c, AdapterSpec::lora(4, 8.0, &[Role::Q, Role::V, Role::FfDown]), seed).unwrap();
        adapter.perturb(seed + 1, 0.1);
        let t = tokens(&c, 2, 6, seed);
        let split = client.forward(Some(&adapter), &t, None, None).unwrap();
        let mono = reference_forward(&m, Some(&adapter), &t, None).unwrap();
        let err = split.max_abs_diff(&mono).unwrap();
        assert!(err <= TOL, "layers {n_layers} d {d} seed {seed}: {err}");
    }
}

#[test]
fn remote_channel_matches_monolithic_reference() {
    for (n_layers, d, seed) in pairs() {
        let c = config(n_layers, d, seed);
        let m = model(&c);
        let svc = service(&m, PolicyMode::Opportunistic);
        let server = TcpServer::bind("127.0.0.1:0", svc.handle()).unwrap();
        let mut client = remote_client(&server, &m, 7);
        let t = tokens(&c, 3, 5, seed);
        let split = client.forward(None, &t, None, None).unwrap();
        let mono = reference_forward(&m, None, &t, None).unwrap();
        let err = split.max_abs_diff(&mono).unwrap();
        assert!(err <= TOL, "layers {n_layers} d {d} seed {seed}: {err}");
    }
}

#[test]
fn partial_virtualization_matches() {
    let c = config(2, 32, 9);
    let m = model(&c);
    let svc = service(&m, PolicyMode::NoLockstep);
    let base_set: BTreeSet<LayerAddress> = c.layer_addresses().into_iter().filter(|a| a.block == 1).collect();
    let ch = splitserve_core::transport::LocalChannel::connect(svc.handle(), 3, &c, 1, 8);
    let mut client = virtualize(&m, &base_set, Box::new(ch)).unwrap();
    assert_eq!(client.virtual_count(), base_set.len());
    assert!(client.local_count() > 0);
    let t = tokens(&c, 1, 8, 1);
    let err = client
        .forward(None, &t, None, None)
        .unwrap()
        .max_abs_diff(&reference_forward(&m, None, &t, None).unwrap())
        .unwrap();
    assert!(err <= TOL);
}

#[test]
fn cached_decode_matches_full_forward() {
    let c = config(2, 32, 5);
    let m = model(&c);
    let svc = service(&m, PolicyMode::Opportunistic);
    let mut client = local_client(&svc, &m, 1, 2, 10);
    let mut adapter = AdapterState::new(&c, AdapterSpec::ia3(), 2).unwrap();
    adapter.perturb(3, 0.2);
    let t = tokens(&c, 2, 10, 8);
    let full = reference_forward(&m, Some(&adapter), &t, None).unwrap();
    let mut cache = KVCache::new(&c, 2, Placement::Fast);
    let prefix: Vec<u32> = (0..2).flat_map(|b| t.sequence(b)[..4].to_vec()).collect();
    client
        .forward(Some(&adapter), &TokenBatch::new(2, 4, prefix).unwrap(), Some(&mut cache), None)
        .unwrap();
    for pos in 4..10 {
        let step: Vec<u32> = (0..2).map(|b| t.sequence(b)[pos]).collect();
        let out = client
            .forward(Some(&adapter), &TokenBatch::new(2, 1, step).unwrap(), Some(&mut cache), None)
            .unwrap();
        for b in 0..2 {
            let err = out
                .row(b)
                .iter()
                .zip(full.row(b * 10 + pos))
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(err <= TOL, "pos {pos}: {err}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn split_logits_match_for_random_shapes(
        n_layers in prop::sample::select(vec![1usize, 2, 4]),
        d in prop::sample::select(vec![32usize, 64]),
        seed in 0u64..10_000,
        batch in 1usize..4,
        seq in 1usize..9,
    ) {
        let c = config(n_layers, d, seed);
        let m = model(&c);
        let svc = service(&m, PolicyMode::Opportunistic);
        let mut client = local_client(&svc, &m, 1, batch, seq);
        let t = tokens(&c, batch, seq, seed ^ 0x55);
        let split = client.forward(None, &t, None, None).unwrap();
        let mono = reference_forward(&m, None, &t, None).unwrap();
        prop_assert!(split.max_abs_diff(&mono).unwrap() <= TOL);
    }
}

#[test]
fn local_and_remote_channels_agree_bitwise() {
    use splitserve_core::client::{ClientJob, JobConfig};
    let c = config(2, 32, 31);
    let m = model(&c);
    let svc = service(&m, PolicyMode::Opportunistic);
    let server = TcpServer::bind("127.0.0.1:0", svc.handle()).unwrap();
    let cfg: JobConfig = serde_json::from_value(serde_json::json!({
        "name": "t", "kind": "finetune", "batch": 2, "seq": 6, "steps": 3
    }))
    .unwrap();
    let mut local = ClientJob::from_config(&cfg, local_client(&svc, &m, 1, 2, 6)).unwrap();
    let mut remote = ClientJob::from_config(&cfg, remote_client(&server, &m, 2)).unwrap();
    let a = local.run(&cfg).unwrap();
    let b = remote.run(&cfg).unwrap();
    assert_eq!(a.losses, b.losses);
    let hashes = |j: &ClientJob| j.records().iter().map(|r| r.output_hash).collect::<Vec<_>>();
    assert_eq!(hashes(&local), hashes(&remote));
}

#[test]
fn a_vanishing_remote_client_does_not_disturb_others() {
    use std::io::Write;
    let c = config(1, 32, 32);
    let m = model(&c);
    let svc = service(&m, PolicyMode::Lockstep);
    let server = TcpServer::bind("127.0.0.1:0", svc.handle()).unwrap();
    // Registers, sends half a frame, then disappears.
    {
        let mut s = std::net::TcpStream::connect(server.local_addr()).unwrap();
        let mut buf = Vec::new();
        splitserve_core::transport::wire::encode_into(&splitserve_core::transport::wire::Frame::Register(9), &mut buf).unwrap();
        s.write_all(&buf).unwrap();
        s.write_all(b"SSWF\x01").unwrap();
    }
    let mut client = remote_client(&server, &m, 1);
    let t = tokens(&c, 1, 4, 2);
    let out = client.forward(None, &t, None, None).unwrap();
    assert!(out.max_abs_diff(&reference_forward(&m, None, &t, None).unwrap()).unwrap() <= TOL);
}
