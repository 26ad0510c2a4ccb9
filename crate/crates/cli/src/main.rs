use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use splitserve_cli::checks::{self, Check};
use splitserve_cli::experiments::{self, GB};
use splitserve_cli::harness::{self, policy_name, RunOptions, RunReport};
use splitserve_cli::scenario::{ClientSpec, Clock, ProcessMode, Scenario};
use splitserve_cli::{report, HarnessError};
use splitserve_core::executor::PolicyMode;
use splitserve_core::kv::TransferCostModel;
use splitserve_core::ledger::Category;
use splitserve_core::ModelConfig;

/// Scenario files shipped with the binary, runnable by name.
const BUILTIN: &[(&str, &str)] = &[
    ("single-ft", include_str!("../scenarios/single-ft.toml")),
    ("multi-ft", include_str!("../scenarios/multi-ft.toml")),
    ("remote-ft", include_str!("../scenarios/remote-ft.toml")),
    ("mixed", include_str!("../scenarios/mixed.toml")),
    ("policy-sweep", include_str!("../scenarios/policy-sweep.toml")),
    ("long-context", include_str!("../scenarios/long-context.toml")),
    ("privacy", include_str!("../scenarios/privacy.toml")),
];

#[derive(Parser)]
#[command(name = "splitserve", version, about = "Run and check split-execution scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file, or the name of a built-in scenario.
    scenario: String,
    /// Replace the model seed and shift every job seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for CSV outputs [default: out/<scenario name>].
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Override every job's step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Executor and clients as separate processes talking over TCP.
    #[arg(long, conflicts_with = "in_process")]
    multi_process: bool,
    #[arg(long)]
    in_process: bool,
    /// Simulated clock instead of wall time.
    #[arg(long, conflicts_with = "wall")]
    r#virtual: bool,
    #[arg(long)]
    wall: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write per-client, executor and ledger CSVs.
    Run(RunArgs),
    /// Run a scenario and check it against the oracles.
    Verify(RunArgs),
    /// Run a scenario and print every component's ledger.
    Ledger(RunArgs),
    /// Named measurement: packing, crossover, scaling, policy-sweep.
    Bench {
        name: String,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Executor process for multi-process runs.
    #[command(hide = true)]
    Serve {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_parser = parse_policy)]
        policy: PolicyMode,
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
    },
    /// Client process for multi-process runs.
    #[command(hide = true)]
    Client {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        endpoint: String,
        /// The client, as JSON.
        #[arg(long)]
        spec: String,
    },
}

fn parse_policy(s: &str) -> Result<PolicyMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown policy {s}"))
}

fn load_scenario(arg: &str) -> Result<Scenario, HarnessError> {
    let path = Path::new(arg);
    if path.exists() {
        return Scenario::load(path);
    }
    match BUILTIN.iter().find(|(name, _)| *name == arg) {
        Some((name, text)) => Scenario::parse(text, name),
        None => Err(HarnessError::Config {
            origin: arg.to_string(),
            message: format!(
                "no such file or built-in scenario (built-ins: {})",
                BUILTIN.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
            ),
        }),
    }
}

fn options(a: &RunArgs) -> Result<RunOptions> {
    Ok(RunOptions {
        seed: a.seed,
        steps: a.steps,
        mode: match (a.multi_process, a.in_process) {
            (true, _) => Some(ProcessMode::MultiProcess),
            (_, true) => Some(ProcessMode::InProcess),
            _ => None,
        },
        clock: match (a.r#virtual, a.wall) {
            (true, _) => Some(Clock::Virtual),
            (_, true) => Some(Clock::Wall),
            _ => None,
        },
        exe: Some(std::env::current_exe().context("locating own executable")?),
    })
}

fn execute(a: &RunArgs) -> Result<(RunReport, RunOptions, PathBuf), HarnessError> {
    let scenario = load_scenario(&a.scenario)?;
    let opts = options(a).map_err(|e| HarnessError::Child(e.to_string()))?;
    if opts.apply(&scenario).executor.clock == Clock::Virtual && opts.apply(&scenario).executor.mode == ProcessMode::MultiProcess {
        return Err(HarnessError::Config {
            origin: a.scenario.clone(),
            message: "the virtual clock runs in-process only".into(),
        });
    }
    let report = harness::run(&scenario, &opts)?;
    let out = a.out.clone().unwrap_or_else(|| Path::new("out").join(&scenario.name));
    report::write_all(&report, &out)?;
    Ok((report, opts, out))
}

fn summarize(report: &RunReport) {
    println!(
        "{:<8} {:<14} {:>7} {:>8} {:>10} {:>10} {:>12}",
        "variant", "policy", "clients", "failures", "mean-batch", "elapsed-s", "tokens/s"
    );
    for (i, v) in report.variants.iter().enumerate() {
        println!(
            "{:<8} {:<14} {:>7} {:>8} {:>10.3} {:>10.4} {:>12.1}",
            i,
            policy_name(v.policy),
            v.jobs.len(),
            v.failures(),
            v.executor.metrics.mean_batch_size(),
            v.elapsed_us as f64 * 1e-6,
            v.throughput()
        );
        for j in v.jobs.iter().filter(|j| !j.ok()) {
            println!("  {} failed: {}", j.name, j.error.as_deref().unwrap_or(""));
        }
    }
}

fn cmd_run(a: &RunArgs) -> Result<ExitCode, HarnessError> {
    let (report, _, out) = execute(a)?;
    summarize(&report);
    println!("outputs in {}", out.display());
    let failed = report.variants.iter().any(|v| v.failures() > 0);
    Ok(if failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn cmd_verify(a: &RunArgs) -> Result<ExitCode, HarnessError> {
    let (report, opts, _) = match execute(a) {
        Ok(r) => r,
        // A model that fails to load is a failed check, not a bad config.
        Err(HarnessError::Model(e)) => {
            print!("{}", checks::table(&[Check::judge("equivalence/weights", false, e.to_string())]));
            return Ok(ExitCode::from(1));
        }
        Err(e) => return Err(e),
    };
    let results = checks::verify(&report, opts.exe.as_deref());
    print!("{}", checks::table(&results));
    Ok(if results.iter().any(Check::failed) {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_ledger(a: &RunArgs) -> Result<ExitCode, HarnessError> {
    let (report, _, out) = execute(a)?;
    for (i, v) in report.variants.iter().enumerate() {
        println!("variant {i} ({}, {} clients)", policy_name(v.policy), v.jobs.len());
        print!("  {:<12}", "component");
        for c in Category::ALL {
            print!(" {:>17}", c.name());
        }
        println!(" {:>12}", "peak-total");
        let ex = &v.executor.ledger;
        print!("  {:<12}", ex.owner.to_string());
        for c in Category::ALL {
            print!(" {:>17}", ex.get(c));
        }
        println!(" {:>12}", "-");
        for j in &v.jobs {
            let Some(l) = &j.ledger else { continue };
            print!("  {:<12}", l.owner.to_string());
            for c in Category::ALL {
                print!(" {:>17}", l.peaks.get(&c).copied().unwrap_or(0));
            }
            println!(" {:>12}", j.peak_total);
        }
    }
    println!("executor rows are live bytes, client rows are per-category peaks");
    println!("ledger CSV in {}", out.join(report::LEDGER_CSV).display());
    Ok(ExitCode::SUCCESS)
}

fn write_json<T: serde::Serialize>(out: &Option<PathBuf>, name: &str, value: &T) -> Result<()> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(name), serde_json::to_string_pretty(value)?)?;
    }
    Ok(())
}

fn cmd_bench(name: &str, out: &Option<PathBuf>) -> Result<ExitCode> {
    match name {
        "packing" => {
            let toy = ModelConfig {
                n_layers: 1,
                d_model: 32,
                n_heads: 4,
                d_ff: 64,
                vocab_size: 64,
                max_seq: 512,
                seed: 1,
            };
            let s = experiments::packing_study(&toy, 2, 512, &[80 * GB, 80 * GB])?;
            println!("toy job at batch {} seq {}: measured {} B, formula {} B", s.batch, s.seq, s.measured_job_bytes, s.formula_job_bytes);
            println!("13B projection: {:.2} GB per job", s.projected_job_bytes as f64 / GB as f64);
            for (label, r) in [("toy, pooled", s.measured), ("13B, pooled", s.projected_pooled), ("13B, per device", s.projected_per_device)] {
                println!(
                    "{label:<16} replicated {:>4}  shared {:>8}  ratio {:.2}",
                    r.replicated_jobs,
                    r.shared_jobs,
                    r.ratio()
                );
            }
            write_json(out, "packing.json", &s)?;
        }
        "crossover" => {
            let c = ModelConfig {
                n_layers: 2,
                d_model: 32,
                n_heads: 4,
                d_ff: 64,
                vocab_size: 64,
                max_seq: 64,
                seed: 1,
            };
            let s = experiments::crossover_study(&c, 1, &TransferCostModel::default())?;
            println!("{:>8} {:>16} {:>20}", "context", "fast-bytes", "offloaded-bytes");
            for t in s.transfers.iter().step_by(8) {
                println!("{:>8} {:>16} {:>20}", t.context_len, t.compute_on_fast, t.compute_on_offloaded);
            }
            println!("crossover context: toy {:?}, 13B shape {:?}", s.crossover_toy, s.crossover_13b);
            write_json(out, "crossover.json", &s)?;
        }
        "scaling" => {
            let c = ModelConfig {
                n_layers: 2,
                d_model: 32,
                n_heads: 4,
                d_ff: 64,
                vocab_size: 64,
                max_seq: 16,
                seed: 1,
            };
            let pts = experiments::client_scaling(&c, &[1, 2, 4, 8], 2)?;
            println!("{:>8} {:>16} {:>18} {:>16}", "clients", "executor-bytes", "executor-saved-pk", "client-bytes");
            for p in &pts {
                println!("{:>8} {:>16} {:>18} {:>16}", p.clients, p.executor_bytes, p.executor_saved_peak, p.client_bytes);
            }
            write_json(out, "scaling.json", &pts)?;
        }
        "policy-sweep" => {
            let s = load_scenario("policy-sweep")?;
            let opts = RunOptions {
                clock: Some(Clock::Virtual),
                ..Default::default()
            };
            let report = harness::run(&s, &opts)?;
            summarize(&report);
            print!("{}", checks::table(&checks::policy_checks(&report)));
            if let Some(dir) = out {
                report::write_all(&report, dir)?;
            }
        }
        other => bail!("unknown bench {other} (packing, crossover, scaling, policy-sweep)"),
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_for(e: &HarnessError) -> ExitCode {
    if e.is_config() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Ledger(a) => cmd_ledger(a),
        Command::Bench { name, out } => {
            return match cmd_bench(name, out) {
                Ok(code) => code,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    match e.downcast_ref::<HarnessError>() {
                        Some(h) => exit_for(h),
                        None => ExitCode::from(2),
                    }
                }
            }
        }
        Command::Serve { scenario, policy, listen } => Scenario::load(scenario)
            .and_then(|s| harness::serve(&s, *policy, listen))
            .map(|_| ExitCode::SUCCESS),
        Command::Client { scenario, endpoint, spec } => (|| {
            let s = Scenario::load(scenario)?;
            let spec: ClientSpec = serde_json::from_str(spec)?;
            let r = harness::client(&s, &spec, endpoint)?;
            println!("{}", serde_json::to_string(&r)?);
            Ok(if r.ok() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        })(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}
