// SPDX-License-Identifier: Apache-2.0

//! Executes a scenario end to end.

use serde::Serialize;
use thiserror::Error;
use tmm_sim::attestation::{verify_token, Verdict};
use tmm_sim::host::{HostError, HostEvent, HostSim, RunReport};
use tmm_sim::machine::{Machine, TraceRecord};
use tmm_sim::mem::{MappingPolicy, MemError};
use tmm_sim::shadow::CostLedger;
use tmm_sim::tmm::{Coverage, TraceEvent, TmmOptions};

use crate::checks::{delivery_violations, machine_invariants, token_from_trace};
use crate::scenario::{Expectation, Scenario};

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub policy: Option<MappingPolicy>,
    pub tmm: TmmOptions,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("platform: {0}")]
    Platform(#[from] MemError),
    #[error("host: {0}")]
    Host(#[from] HostError),
}

#[derive(Clone, Debug, Serialize)]
pub struct CvmOutcome {
    pub index: usize,
    pub id: Option<u32>,
    #[serde(with = "hex::serde")]
    pub measurement: Vec<u8>,
    pub run: Option<RunReport>,
    pub attestation: Option<Verdict>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub policy: MappingPolicy,
    pub passed: bool,
    pub failures: Vec<String>,
    pub cvms: Vec<CvmOutcome>,
    pub ledger: CostLedger,
    pub simulated_latency_us: f64,
    pub coverage: Coverage,
    pub host_events: Vec<HostEvent>,
}

pub struct ScenarioRun {
    pub report: ScenarioReport,
    pub trace: Vec<TraceRecord>,
}

impl ScenarioRun {
    /// The TMI trace as JSON lines.
    pub fn trace_jsonl(&self) -> String {
        self.trace
            .iter()
            .map(|r| serde_json::to_string(r).expect("trace serializes") + "\n")
            .collect()
    }
}

fn reads(trace: &[TraceEvent]) -> Vec<String> {
    trace
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Read { bytes, .. } => Some(hex::encode(bytes)),
            _ => None,
        })
        .collect()
}

fn check(e: &Expectation, out: &CvmOutcome, failures: &mut Vec<String>) {
    let who = format!("cvm[{}]", e.cvm);
    let Some(run) = &out.run else {
        failures.push(format!("{who}: did not run"));
        return;
    };
    let empty = Vec::new();
    let trace = run.traces.get(&0).unwrap_or(&empty);
    if let Some(h) = e.halted {
        if run.halted != h {
            failures.push(format!("{who}: halted {} (expected {h})", run.halted));
        }
    }
    if let Some(marks) = &e.marks {
        let got: Vec<u64> = trace
            .iter()
            .filter_map(|t| match t {
                TraceEvent::Mark(m) => Some(*m),
                _ => None,
            })
            .collect();
        if &got != marks {
            failures.push(format!("{who}: marks {got:?} (expected {marks:?})"));
        }
    }
    if let Some(want) = &e.reads {
        let got = reads(trace);
        let ok = got.len() == want.len()
            && got.iter().zip(want).all(|(g, w)| match w.strip_suffix('*') {
                Some(prefix) => g.starts_with(prefix),
                None => g == w,
            });
        if !ok {
            failures.push(format!("{who}: reads {got:?} (expected {want:?})"));
        }
    }
    if e.attest.is_some() && out.attestation != Some(Verdict::Accept) {
        failures.push(format!("{who}: attestation {:?}", out.attestation));
    }
    if let Some(max) = e.max_irq_round_trips {
        if run.irq_round_trips > max {
            failures.push(format!("{who}: {} interrupt round trips (max {max})", run.irq_round_trips));
        }
    }
}

pub fn run_scenario(s: &Scenario, opts: &RunOptions) -> Result<ScenarioRun, RunError> {
    let cfg = s.platform(opts.seed, opts.policy);
    let m = Machine::new(&cfg, opts.tmm.clone())?;
    m.enable_trace();
    let mut host = HostSim::new(m.clone(), s.host.clone());
    host.set_responder(s.responder.clone());
    let mut failures = Vec::new();
    let mut outcomes = Vec::new();
    let mut ids = Vec::new();
    for (i, spec) in s.cvms.iter().enumerate() {
        match host.boot_cvm(spec) {
            Ok(id) => ids.push(Some(id)),
            Err(e) => {
                failures.push(format!("cvm[{i}]: boot failed: {e}"));
                ids.push(None);
            }
        }
    }
    for irq in &s.interrupts {
        host.schedule_interrupt(irq.tick, irq.cpu, irq.intid);
    }
    let rak = m.with(|_, t| t.keys().rak_public());
    for (i, id) in ids.iter().enumerate() {
        let Some(id) = *id else {
            outcomes.push(CvmOutcome {
                index: i,
                id: None,
                measurement: Vec::new(),
                run: None,
                attestation: None,
            });
            continue;
        };
        let measurement = m.with(|_, t| t.cvm(id).map(|c| c.measurement_value()).unwrap_or_default());
        let run = host.run(id, s.max_steps)?;
        let attestation = s
            .expect
            .iter()
            .find(|e| e.cvm == i)
            .and_then(|e| e.attest.as_ref())
            .map(|a| {
                let challenge: [u8; 64] = a.challenge.clone().try_into().expect("validated length");
                match run.traces.get(&0).and_then(|t| token_from_trace(t)) {
                    Some(bytes) => verify_token(&bytes, &rak, &measurement, &challenge),
                    None => Verdict::Reject(tmm_sim::attestation::RejectReason::Malformed),
                }
            });
        outcomes.push(CvmOutcome {
            index: i,
            id: Some(id.0),
            measurement: measurement.to_vec(),
            run: Some(run),
            attestation,
        });
    }
    for e in &s.expect {
        check(e, &outcomes[e.cvm], &mut failures);
    }
    let monitor = m.with(|_, t| t.events().to_vec());
    failures.extend(delivery_violations(&monitor, host.events()));
    if let Err(e) = machine_invariants(&m) {
        failures.push(format!("invariant: {e}"));
    }
    let (ledger, coverage, latency) = m.with(|p, t| {
        let k = t.cost().constants().ok();
        (
            p.ledger().clone(),
            t.coverage().clone(),
            k.map_or(0.0, |k| p.ledger().simulated_latency(&k)),
        )
    });
    let report = ScenarioReport {
        name: s.name.clone(),
        seed: cfg.seed,
        policy: cfg.memory.policy,
        passed: failures.is_empty(),
        failures,
        cvms: outcomes,
        ledger,
        simulated_latency_us: latency,
        coverage,
        host_events: host.events().to_vec(),
    };
    Ok(ScenarioRun {
        report,
        trace: m.take_trace(),
    })
}
