// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use tmm_conformance::bench::{run_bench, BENCHES};
use tmm_conformance::cases::{run_conformance, Status};
use tmm_conformance::fuzz::{run_fuzz, FuzzConfig};
use tmm_conformance::run::{run_scenario, RunOptions};
use tmm_conformance::scenario::Scenario;
use tmm_sim::attestation::{verify_evidence, verify_token, Verdict};
use tmm_sim::guest::Instr;
use tmm_sim::host::{CvmSpec, HostPolicy, HostSim};
use tmm_sim::machine::Machine;
use tmm_sim::mem::MappingPolicy;
use tmm_sim::platform::PlatformConfig;
use tmm_sim::shadow::CostModel;
use tmm_sim::tmm::TmmOptions;

#[derive(Parser)]
#[command(name = "tmmctl", version, about = "Drive the monitor simulator")]
struct Cli {
    /// Write the full result as JSON.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    /// Write the monitor command trace as JSON lines (`run` only).
    #[arg(long, global = true)]
    trace: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Direct,
    Dynamic,
}

impl From<Policy> for MappingPolicy {
    fn from(p: Policy) -> MappingPolicy {
        match p {
            Policy::Direct => MappingPolicy::Direct,
            Policy::Dynamic => MappingPolicy::Dynamic,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the conformance suite.
    Conformance {
        /// Only cases of this category (or this case id).
        #[arg(long)]
        filter: Option<String>,
        /// Threads available to the race cases; below 2 they are skipped.
        #[arg(long, default_value_t = default_parallelism())]
        parallel_cpus: usize,
        /// Fault injection: do not scrub memory when a cVM is destroyed.
        #[arg(long)]
        skip_zero_on_destroy: bool,
    },
    /// Run a micro-benchmark (hvc, ipi, io, memcpy or all).
    Bench { name: String },
    /// Run a scenario file.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        policy: Option<Policy>,
    },
    /// Random command sequences with invariant checks after every step.
    Fuzz {
        #[arg(long, default_value_t = 100_000)]
        sequences: usize,
        #[arg(long, default_value_t = 24)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = default_parallelism())]
        threads: usize,
    },
    #[command(subcommand)]
    Attest(Attest),
}

#[derive(Subcommand)]
enum Attest {
    /// Boot a cVM and write an attestation token for it.
    Issue {
        /// 64-byte challenge, hex.
        #[arg(long)]
        challenge: String,
        /// Boot the first cVM of this scenario instead of a minimal guest.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Where to write the token bytes.
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify a token against a trusted root key.
    Verify {
        token: PathBuf,
        /// Root attestation public key: 32 bytes hex, or a file holding it.
        rak_pub: String,
        #[arg(long)]
        measurement: Option<String>,
        #[arg(long)]
        challenge: Option<String>,
    },
}

fn default_parallelism() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

type Result<T> = std::result::Result<T, String>;

fn hex_array<const N: usize>(what: &str, s: &str) -> Result<[u8; N]> {
    let v = hex::decode(s.trim()).map_err(|e| format!("{what}: {e}"))?;
    v.try_into().map_err(|_| format!("{what}: expected {N} bytes"))
}

fn write_report<T: Serialize>(path: &Option<PathBuf>, value: &T) -> Result<()> {
    if let Some(p) = path {
        let text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
        std::fs::write(p, text + "\n").map_err(|e| format!("{}: {e}", p.display()))?;
    }
    Ok(())
}

fn conformance(cli: &Cli, filter: Option<&str>, parallel_cpus: usize, skip_zero: bool) -> Result<bool> {
    let opts = TmmOptions {
        skip_zero_on_destroy: skip_zero,
        ..TmmOptions::default()
    };
    let r = run_conformance(filter, parallel_cpus, &opts);
    for c in &r.cases {
        let (tag, why) = match &c.status {
            Status::Pass => ("PASS", String::new()),
            Status::Fail(e) => ("FAIL", format!("  {e}")),
            Status::Skip(e) => ("SKIP", format!("  ({e})")),
        };
        println!("{tag} {:<26} {:<20}{why}", c.id, c.category.name());
    }
    println!(
        "{} passed, {} failed, {} skipped; TMI coverage {}/19, TSI coverage {}/7",
        r.passed,
        r.failed,
        r.skipped,
        r.tmi_coverage.covered.iter().filter(|n| !n.starts_with("granule_")).count(),
        r.tsi_coverage.covered.len()
    );
    if filter.is_none() {
        for m in r.tmi_coverage.missing.iter().chain(&r.tsi_coverage.missing) {
            println!("not covered: {m}");
        }
    }
    write_report(&cli.report, &r)?;
    Ok(r.all_passed())
}

fn bench(cli: &Cli, name: &str) -> Result<bool> {
    let names: Vec<&str> = if name == "all" { BENCHES.to_vec() } else { vec![name] };
    let model = CostModel::reference();
    let mut reports = Vec::new();
    let mut ok = true;
    for n in names {
        let r = run_bench(n, &model).map_err(|e| e.to_string())?;
        println!("{n}:");
        for c in r.checks() {
            println!("  {} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        ok &= r.passed();
        reports.push(r);
    }
    let value = if reports.len() == 1 { json!(reports[0]) } else { json!(reports) };
    write_report(&cli.report, &value)?;
    Ok(ok)
}

fn run(cli: &Cli, path: &Path, seed: Option<u64>, policy: Option<Policy>) -> Result<bool> {
    let s = Scenario::load(path).map_err(|e| e.to_string())?;
    let opts = RunOptions {
        seed,
        policy: policy.map(Into::into),
        tmm: TmmOptions::default(),
    };
    let out = run_scenario(&s, &opts).map_err(|e| e.to_string())?;
    let r = &out.report;
    println!("scenario {:?} (seed {}, {:?} policy)", r.name, r.seed, r.policy);
    for c in &r.cvms {
        let run = c.run.as_ref();
        println!(
            "  cvm[{}] id {:?} measurement {} steps {} halted {} round trips {} attestation {:?}",
            c.index,
            c.id,
            hex::encode(&c.measurement),
            run.map_or(0, |r| r.steps),
            run.is_some_and(|r| r.halted),
            run.map_or(0, |r| r.irq_round_trips),
            c.attestation
        );
    }
    println!("  simulated latency {:.1} us, {:?}", r.simulated_latency_us, r.ledger.counters());
    for f in &r.failures {
        println!("  FAIL {f}");
    }
    println!("{}", if r.passed { "PASS" } else { "FAIL" });
    write_report(&cli.report, r)?;
    if let Some(p) = &cli.trace {
        std::fs::write(p, out.trace_jsonl()).map_err(|e| format!("{}: {e}", p.display()))?;
    }
    Ok(r.passed)
}

fn fuzz(cli: &Cli, cfg: FuzzConfig) -> Result<bool> {
    let start = std::time::Instant::now();
    let r = run_fuzz(&cfg, &TmmOptions::default()).map_err(|e| e.to_string())?;
    println!(
        "{} sequences, {} commands ({} succeeded) in {:.1}s: {} violations",
        r.sequences,
        r.commands,
        r.successes,
        start.elapsed().as_secs_f64(),
        r.violation_count
    );
    for v in &r.violations {
        println!("  seq {} step {} {} {:x?}: {}", v.sequence, v.step, v.command, v.args, v.problem);
    }
    write_report(&cli.report, &r)?;
    Ok(r.passed())
}

fn issue(cli: &Cli, challenge: &str, scenario: Option<&Path>, out: &Path) -> Result<bool> {
    let challenge: [u8; 64] = hex_array("challenge", challenge)?;
    let (cfg, spec) = match scenario {
        Some(p) => {
            let s = Scenario::load(p).map_err(|e| e.to_string())?;
            (s.platform(None, None), s.cvms[0].clone())
        }
        None => (PlatformConfig::default(), CvmSpec::single(vec![Instr::Halt])),
    };
    let m = Machine::new(&cfg, TmmOptions::default()).map_err(|e| e.to_string())?;
    let mut host = HostSim::new(m.clone(), HostPolicy::default());
    let id = host.boot_cvm(&spec).map_err(|e| e.to_string())?;
    let (token, measurement, rak) = m.with(|_, t| {
        let token = t.build_token(id, &challenge).map(|t| t.encode());
        (token, t.cvm(id).map(|c| c.measurement_value()), t.keys().rak_public())
    });
    let token = token.map_err(|e| e.to_string())?;
    std::fs::write(out, &token).map_err(|e| format!("{}: {e}", out.display()))?;
    let summary = json!({
        "token": out,
        "bytes": token.len(),
        "rak_public": hex::encode(rak),
        "measurement": measurement.map(hex::encode),
        "challenge": hex::encode(challenge),
    });
    println!("{}", serde_json::to_string_pretty(&summary).unwrap());
    write_report(&cli.report, &summary)?;
    Ok(true)
}

fn verify(cli: &Cli, token: &Path, rak: &str, measurement: Option<&str>, challenge: Option<&str>) -> Result<bool> {
    let bytes = std::fs::read(token).map_err(|e| format!("{}: {e}", token.display()))?;
    let rak_text = if Path::new(rak).is_file() {
        std::fs::read_to_string(rak).map_err(|e| format!("{rak}: {e}"))?
    } else {
        rak.to_string()
    };
    let rak: [u8; 32] = hex_array("root key", &rak_text)?;
    let verdict = match (measurement, challenge) {
        (Some(m), Some(c)) => verify_token(&bytes, &rak, &hex_array("measurement", m)?, &hex_array("challenge", c)?),
        (None, None) => match verify_evidence(&bytes, &rak) {
            Ok(_) => Verdict::Accept,
            Err(r) => Verdict::Reject(r),
        },
        _ => return Err("give both --measurement and --challenge, or neither".into()),
    };
    println!("{verdict:?}");
    write_report(&cli.report, &json!({ "verdict": verdict }))?;
    Ok(verdict == Verdict::Accept)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Conformance {
            filter,
            parallel_cpus,
            skip_zero_on_destroy,
        } => conformance(&cli, filter.as_deref(), *parallel_cpus, *skip_zero_on_destroy),
        Command::Bench { name } => bench(&cli, name),
        Command::Run { scenario, seed, policy } => run(&cli, scenario, *seed, *policy),
        Command::Fuzz {
            sequences,
            length,
            seed,
            threads,
        } => fuzz(
            &cli,
            FuzzConfig {
                sequences: *sequences,
                length: *length,
                seed: *seed,
                threads: *threads,
                ..FuzzConfig::default()
            },
        ),
        Command::Attest(Attest::Issue { challenge, scenario, out }) => issue(&cli, challenge, scenario.as_deref(), out),
        Command::Attest(Attest::Verify {
            token,
            rak_pub,
            measurement,
            challenge,
        }) => verify(&cli, token, rak_pub, measurement.as_deref(), challenge.as_deref()),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("tmmctl: {e}");
            ExitCode::from(2)
        }
    }
}
