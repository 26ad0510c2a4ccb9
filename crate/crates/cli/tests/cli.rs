use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Duration;

use splitserve_cli::harness::{self, RunOptions, ServeProcess};
use splitserve_cli::scenario::Scenario;
use splitserve_core::client::{JobKind, Phase};
use splitserve_core::executor::PolicyMode;
use splitserve_core::model::{build_model, checkpoint};

fn exe() -> &'static Path {
    Path::new(env!("CARGO_BIN_EXE_splitserve"))
}

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.toml"))
}

fn splitserve(args: &[&str]) -> Output {
    Command::new(exe()).args(args).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

const SMALL: &str = r#"
name = "small"

[model]
n_layers = 1
d_model = 32
n_heads = 4
d_ff = 64
vocab_size = 32
max_seq = 16
seed = 5
"#;

const FINETUNE: &str = r#"
[[jobs]]
name = "ft"
kind = "finetune"
batch = 2
seq = 8
steps = 3
"#;

#[test]
fn verify_passes_and_writes_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = splitserve(&["run", scenario_path("single-ft").to_str().unwrap(), "--steps", "3", "-o", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    for f in ["clients.csv", "executor.csv", "ledger.csv", "summary.csv"] {
        let body = std::fs::read_to_string(out.join(f)).unwrap();
        assert!(body.lines().count() > 1, "{f} is empty");
    }
    let clients = std::fs::read_to_string(out.join("clients.csv")).unwrap();
    assert!(clients.starts_with("variant,policy,client,name,iteration,phase,tokens,started_us,latency_us,tokens_per_s,loss"));

    let o = splitserve(&["verify", "single-ft", "--steps", "3", "-o", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}\n{}", text(&o.stdout), text(&o.stderr));
    assert!(text(&o.stdout).contains("PASS"));
}

#[test]
fn config_errors_exit_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "name = \"bad\"\n[model]\nn_layers = 1\nd_model = \"wide\"\n").unwrap();
    let o = splitserve(&["verify", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("line 4"), "{}", text(&o.stderr));

    let o = splitserve(&["run", "no-such-scenario"]);
    assert_eq!(o.status.code(), Some(2));

    // Heads must divide the width.
    let uneven = dir.path().join("uneven.toml");
    std::fs::write(&uneven, SMALL.replace("n_heads = 4", "n_heads = 5") + FINETUNE).unwrap();
    let o = splitserve(&["run", uneven.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o.stderr));

    let o = splitserve(&["bench", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_steps_is_a_vacuous_pass() {
    let dir = tempfile::tempdir().unwrap();
    let o = splitserve(&[
        "verify",
        "single-ft",
        "--steps",
        "0",
        "-o",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}\n{}", text(&o.stdout), text(&o.stderr));
}

#[test]
fn corrupted_weights_fail_equivalence() {
    let dir = tempfile::tempdir().unwrap();
    let s = Scenario::parse(&(SMALL.to_string() + FINETUNE), "small").unwrap();
    let weights = dir.path().join("weights.bin");
    checkpoint::save(&weights, &build_model(&s.model).unwrap()).unwrap();
    let file = dir.path().join("small.toml");
    std::fs::write(&file, SMALL.replace("[model]", "weights = \"weights.bin\"\n\n[model]") + FINETUNE).unwrap();
    let out = dir.path().join("out");

    let o = splitserve(&["verify", file.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert!(o.status.success(), "intact weights: {}\n{}", text(&o.stdout), text(&o.stderr));

    // Flip bytes well inside the tensor data, past the header.
    let mut bytes = std::fs::read(&weights).unwrap();
    let n = bytes.len();
    for b in &mut bytes[n / 2..n / 2 + 64] {
        *b ^= 0x5A;
    }
    std::fs::write(&weights, bytes).unwrap();
    let o = splitserve(&["verify", file.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}\n{}", text(&o.stdout), text(&o.stderr));
    let table = text(&o.stdout);
    assert!(
        table.lines().any(|l| l.contains("equivalence") && l.contains("FAIL")),
        "{table}"
    );
}

#[test]
fn inference_records_one_decode_per_generated_token() {
    let s = Scenario::parse(
        &(SMALL.replace("max_seq = 16", "max_seq = 32")
            + "[[jobs]]\nname = \"chat\"\nkind = \"inference\"\nseq = 16\ngen_tokens = 8\nsteps = 1\n"),
        "chat",
    )
    .unwrap();
    let r = harness::run(&s, &RunOptions::default()).unwrap();
    let job = &r.variants[0].jobs[0];
    assert!(job.ok(), "{:?}", job.error);
    let decode = job.records.iter().filter(|r| r.phase == Phase::Decode).count();
    let prefill = job.records.iter().filter(|r| r.phase == Phase::Prefill).count();
    assert_eq!((prefill, decode), (1, 8));
    // Prompt followed by the generated tokens.
    assert_eq!(job.generated[0][0].len(), 16 + 8);
}

#[test]
fn mixed_scenario_has_six_inference_and_two_finetune_clients() {
    let s = Scenario::load(&scenario_path("mixed")).unwrap();
    let clients = s.expanded();
    let count = |k: JobKind| clients.iter().filter(|c| c.job.kind == k).count();
    assert_eq!((count(JobKind::Inference), count(JobKind::Finetune)), (6, 2));
    let r = harness::run(&s, &RunOptions::default()).unwrap();
    assert_eq!(r.variants[0].failures(), 0);
}

#[test]
fn killed_client_does_not_disturb_others() {
    let long = FINETUNE.replace("steps = 3", "steps = 400");
    let s = Scenario::parse(&(SMALL.to_string() + &long.replace("name = \"ft\"", "name = \"ft\"\nreplicas = 3")), "crash").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let json = harness::write_scenario_json(&s, dir.path()).unwrap();
    let mut serve = ServeProcess::spawn(exe(), &json, PolicyMode::Opportunistic).unwrap();

    let mut specs = s.expanded();
    for spec in &mut specs {
        spec.job.steps = 20;
    }
    // The victim would run far longer than the others; kill it mid-run.
    specs[1].job.steps = 100_000;
    let mut children: Vec<_> = specs
        .iter()
        .map(|spec| harness::spawn_client(exe(), &json, spec, &serve.addr).unwrap())
        .collect();
    std::thread::sleep(Duration::from_millis(300));
    children[1].kill().unwrap();

    let results: Vec<_> = children.into_iter().zip(&specs).map(|(c, s)| harness::collect_client(c, s)).collect();
    assert!(!results[1].ok());
    for i in [0, 2] {
        assert!(results[i].ok(), "{}: {:?}", results[i].name, results[i].error);
        assert_eq!(results[i].losses.len(), 20);
    }
    // The executor is still serving and kept nothing per client.
    let stats = serve.stats().unwrap();
    assert!(stats.metrics.requests > 0);
    assert_eq!(stats.ledger.get(splitserve_core::Category::SavedActivations), 0);
    serve.stop().unwrap();
}

#[test]
fn multi_process_run_matches_in_process() {
    let s = Scenario::parse(&(SMALL.to_string() + FINETUNE), "mp").unwrap();
    let local = harness::run(&s, &RunOptions::default()).unwrap();
    let remote = harness::run(
        &s,
        &RunOptions {
            mode: Some(splitserve_cli::scenario::ProcessMode::MultiProcess),
            exe: Some(exe().to_path_buf()),
            ..Default::default()
        },
    )
    .unwrap();
    let (a, b) = (&local.variants[0].jobs[0], &remote.variants[0].jobs[0]);
    assert!(b.ok(), "{:?}", b.error);
    assert_eq!(a.output_hashes(), b.output_hashes());
    assert_eq!(a.losses, b.losses);
}
