// SPDX-License-Identifier: Apache-2.0

//! Random host command sequences against a small platform. After every
//! command the memory invariants must hold, a failed command must leave
//! granule and cVM state untouched, every cVM state change must be a legal
//! transition, and secure memory must stay unreadable from the host. The
//! translation tables are checked for soundness at the end of each sequence.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tmm_sim::guest::{assemble, Instr};
use tmm_sim::machine::Machine;
use tmm_sim::mem::{CvmId, GranuleIdx, GranuleState, MappingPolicy, MemError, World};
use tmm_sim::tmm::cvm::{CvmParams, CvmState};
use tmm_sim::tmm::{MonitorEvent, TmiCommand, TmiStatus, TmmOptions};

use crate::driver::{platform, PAGE};

#[derive(Clone, Debug, Serialize)]
pub struct FuzzConfig {
    pub sequences: usize,
    pub length: usize,
    pub seed: u64,
    pub threads: usize,
    pub granules: usize,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig {
            sequences: 100_000,
            length: 24,
            seed: 0,
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            granules: 128,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Violation {
    pub sequence: usize,
    pub step: usize,
    pub command: String,
    pub args: Vec<u64>,
    pub problem: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct FuzzReport {
    pub sequences: usize,
    pub commands: u64,
    pub successes: u64,
    /// Outcomes by command name and status.
    pub outcomes: BTreeMap<String, BTreeMap<String, u64>>,
    pub violations: Vec<Violation>,
    pub violation_count: usize,
}

impl FuzzReport {
    pub fn passed(&self) -> bool {
        self.violation_count == 0
    }
}

const KEEP_VIOLATIONS: usize = 32;
/// Live cVMs a sequence may hold at once.
pub const MAX_CVMS: usize = 4;

/// Transitions a cVM may make, written out independently of the monitor.
fn legal(from: CvmState, to: CvmState) -> bool {
    use CvmState::*;
    matches!(
        (from, to),
        (Null, New) | (New, Active) | (New, SystemOff) | (Active, SystemOff) | (SystemOff, Null)
    )
}

/// Pre-staged normal pages the host hands to the monitor.
struct Staging {
    params: GranuleIdx,
    io_params: GranuleIdx,
    code: GranuleIdx,
    pc: GranuleIdx,
    run: GranuleIdx,
}

fn template(policy: MappingPolicy, granules: usize, tmm: &TmmOptions) -> Result<(Machine, Staging), MemError> {
    let secure = if policy == MappingPolicy::Direct { granules / 2 } else { 0 };
    let m = Machine::new(&platform(granules, secure, policy), tmm.clone())?;
    let top = granules;
    let g = |k: usize| GranuleIdx(top - 1 - k);
    let staging = Staging {
        params: g(0),
        io_params: g(1),
        code: g(2),
        pc: g(3),
        run: g(4),
    };
    let io = CvmParams {
        io_window_base: 0x10_0000,
        io_window_pages: 4,
        io_queues: 1,
        ..CvmParams::default()
    };
    let code = assemble(&[Instr::Compute(20), Instr::MemWrite { ipa: 0x1000, bytes: vec![7] }, Instr::Halt])
        .expect("fixed program");
    m.with(|p, _| {
        p.host_write(staging.params, 0, &CvmParams::default().encode()).unwrap();
        p.host_write(staging.io_params, 0, &io.encode()).unwrap();
        p.host_write(staging.code, 0, &code).unwrap();
        p.host_write(staging.pc, 0, &0u64.to_le_bytes()).unwrap();
    });
    Ok((m, staging))
}

type Snapshot = (Vec<(World, GranuleState, Option<CvmId>)>, Vec<(CvmId, CvmState)>, usize);

fn snapshot(m: &Machine) -> Snapshot {
    m.with(|p, t| {
        (
            p.mem().iter().map(|(_, g)| (g.world(), g.state(), g.owner())).collect(),
            t.cvms().map(|c| (c.id, c.state)).collect(),
            t.tecs().count(),
        )
    })
}

struct Gen<'a> {
    rng: ChaCha8Rng,
    granules: usize,
    staging: &'a Staging,
}

impl Gen<'_> {
    fn cvm(&mut self) -> u64 {
        if self.rng.gen_bool(0.9) {
            self.rng.gen_range(0..=MAX_CVMS as u64)
        } else {
            self.rng.gen()
        }
    }

    fn tec(&mut self) -> u64 {
        self.rng.gen_range(0..5)
    }

    fn ipa(&mut self) -> u64 {
        match self.rng.gen_range(0..10) {
            0 => self.rng.gen_range(0..0x10_0000),
            1 => 0x20_0000,
            2 => 1 << 31,
            3 => 0x10_0000,
            4 => u64::MAX & !0xfff,
            _ => self.rng.gen_range(0..8) * PAGE,
        }
    }

    fn pa(&mut self) -> u64 {
        let s = self.staging;
        match self.rng.gen_range(0..10) {
            0 => s.code.addr(),
            1 => s.params.addr(),
            2 => s.io_params.addr(),
            3 => self.rng.gen_range(0..self.granules as u64) * PAGE + self.rng.gen_range(0..2) * 8,
            4 => self.granules as u64 * PAGE,
            _ => self.rng.gen_range(0..self.granules as u64) * PAGE,
        }
    }

    fn next(&mut self, live: usize) -> (TmiCommand, Vec<u64>) {
        use TmiCommand::*;
        let all = [
            TmiCommand::STANDARD.as_slice(),
            &[GranuleDelegate, GranuleUndelegate, CreateCvm, CreateTtt, DataCreate, TecCreate, ActivateCvm],
        ]
        .concat();
        let mut cmd = *all.choose(&mut self.rng).unwrap();
        if cmd == CreateCvm && live >= MAX_CVMS {
            cmd = DestroyCvm;
        }
        let level = self.rng.gen_range(0..5);
        let args = match cmd {
            CreateCvm => {
                let params = if self.rng.gen_bool(0.8) {
                    self.staging.params.addr()
                } else {
                    self.pa()
                };
                let shadow = if self.rng.gen_bool(0.5) { 0 } else { self.pa() };
                vec![params, self.rng.gen_range(0..40), shadow]
            }
            DataCreate => vec![self.cvm(), self.ipa(), self.pa()],
            DataCreateUnknown | DataDestroy | UnmapProtected | UnmapUnprotected => vec![self.cvm(), self.ipa()],
            DataBlockCreate => vec![self.cvm(), self.ipa(), self.rng.gen_range(0..6), self.pa()],
            DataBlockCreateUnknown | DataBlockDestroy => {
                vec![self.cvm(), self.ipa(), self.rng.gen_range(0..6)]
            }
            ActivateCvm | DestroyCvm => vec![self.cvm()],
            TecCreate => {
                let pc = if self.rng.gen_bool(0.8) {
                    self.staging.pc.addr()
                } else {
                    self.pa()
                };
                vec![self.cvm(), pc]
            }
            TecDestroy => vec![self.tec()],
            TecEnter => {
                let run = if self.rng.gen_bool(0.8) {
                    self.staging.run.addr()
                } else {
                    self.pa()
                };
                vec![self.tec(), run, self.rng.gen_range(0..60)]
            }
            CreateTtt | DestroyTtt => {
                let span = 1u64 << (12 + 9 * (4 - level.clamp(1, 3)));
                vec![self.cvm(), self.ipa() / span * span, level]
            }
            MapUnprotected | MapProtected => vec![self.cvm(), self.ipa(), self.pa()],
            PsciComplete => vec![self.tec(), self.tec(), self.rng.gen_range(0..2)],
            GranuleDelegate | GranuleUndelegate => vec![self.pa()],
        };
        (cmd, args)
    }
}

fn status_name(s: TmiStatus) -> &'static str {
    match s {
        TmiStatus::Success => "success",
        TmiStatus::ErrorInput => "error_input",
        TmiStatus::ErrorState => "error_state",
        TmiStatus::ErrorMemory => "error_memory",
        TmiStatus::ErrorPolicy => "error_policy",
    }
}

struct Local {
    commands: u64,
    successes: u64,
    outcomes: BTreeMap<String, BTreeMap<String, u64>>,
    violations: Vec<Violation>,
    count: usize,
}

fn run_sequence(index: usize, cfg: &FuzzConfig, template: &Machine, staging: &Staging, out: &mut Local) {
    let m = template.fork();
    let mut gen = Gen {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        granules: cfg.granules,
        staging,
    };
    let report = |step: usize, cmd: &str, args: &[u64], problem: String, out: &mut Local| {
        out.count += 1;
        if out.violations.len() < KEEP_VIOLATIONS {
            out.violations.push(Violation {
                sequence: index,
                step,
                command: cmd.to_string(),
                args: args.to_vec(),
                problem,
            });
        }
    };
    let mut seen_events = 0;
    for step in 0..cfg.length {
        let before = snapshot(&m);
        let (cmd, args) = gen.next(before.1.len());
        let r = m.call(0, cmd, &args);
        out.commands += 1;
        *out
            .outcomes
            .entry(cmd.name().to_string())
            .or_default()
            .entry(status_name(r.status).to_string())
            .or_default() += 1;
        if r.is_ok() {
            out.successes += 1;
        } else if snapshot(&m) != before {
            report(step, cmd.name(), &args, format!("failed with {:?} but changed state", r.status), out);
        }
        let (events, inv, probe) = m.with(|p, t| {
            let ev: Vec<(CvmState, CvmState)> = t.events()[seen_events..]
                .iter()
                .filter_map(|e| match e {
                    MonitorEvent::StateChange { from, to, .. } => Some((*from, *to)),
                    _ => None,
                })
                .collect();
            let n = t.events().len();
            let inv = p.mem().check_invariants();
            let secure: Vec<GranuleIdx> =
                p.mem().iter().filter(|(_, g)| g.world() == World::Secure).map(|(i, _)| i).collect();
            let probe = secure.choose(&mut gen.rng).map(|g| (*g, p.host_read(*g).is_err()));
            ((ev, n), inv, probe)
        });
        seen_events = events.1;
        for (from, to) in events.0 {
            if !legal(from, to) {
                report(step, cmd.name(), &args, format!("illegal transition {from:?} -> {to:?}"), out);
            }
        }
        if let Err(e) = inv {
            report(step, cmd.name(), &args, format!("invariant: {e}"), out);
        }
        if let Some((g, false)) = probe {
            report(step, cmd.name(), &args, format!("host read secure {g}"), out);
        }
    }
    if let Err(e) = m.with(|p, t| t.check_ttt_soundness(p)) {
        report(cfg.length, "end", &[], format!("translation tables: {e}"), out);
    }
}

/// Runs the sequences across `cfg.threads` workers. Work is split by
/// sequence index and each sequence has its own seed, so results do not
/// depend on the thread count. Even sequences run under the direct policy,
/// odd ones under the dynamic policy.
pub fn run_fuzz(cfg: &FuzzConfig, tmm: &TmmOptions) -> Result<FuzzReport, MemError> {
    let direct = template(MappingPolicy::Direct, cfg.granules, tmm)?;
    let dynamic = template(MappingPolicy::Dynamic, cfg.granules, tmm)?;
    let next = AtomicUsize::new(0);
    let merged = Mutex::new(FuzzReport {
        sequences: cfg.sequences,
        ..FuzzReport::default()
    });
    let mut kept = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..cfg.threads.max(1) {
            s.spawn(|| {
                let mut local = Local {
                    commands: 0,
                    successes: 0,
                    outcomes: BTreeMap::new(),
                    violations: Vec::new(),
                    count: 0,
                };
                loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= cfg.sequences {
                        break;
                    }
                    let (m, st) = if i % 2 == 0 { &direct } else { &dynamic };
                    run_sequence(i, cfg, m, st, &mut local);
                }
                let mut r = merged.lock().unwrap();
                r.commands += local.commands;
                r.successes += local.successes;
                r.violation_count += local.count;
                for (k, v) in local.outcomes {
                    let e = r.outcomes.entry(k).or_default();
                    for (s, n) in v {
                        *e.entry(s).or_default() += n;
                    }
                }
                kept.lock().unwrap().extend(local.violations);
            });
        }
    });
    let mut report = merged.into_inner().unwrap();
    let kept = kept.get_mut().unwrap();
    kept.sort_by_key(|v| (v.sequence, v.step));
    kept.truncate(KEEP_VIOLATIONS);
    report.violations = std::mem::take(kept);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(threads: usize) -> FuzzConfig {
        FuzzConfig {
            sequences: 300,
            threads,
            seed: 9,
            ..FuzzConfig::default()
        }
    }

    #[test]
    fn clean_and_thread_independent() {
        let a = run_fuzz(&small(1), &TmmOptions::default()).unwrap();
        let b = run_fuzz(&small(3), &TmmOptions::default()).unwrap();
        assert!(a.passed(), "{:?}", a.violations);
        assert_eq!(a.outcomes, b.outcomes);
        assert!(a.successes > 0);
    }

    #[test]
    fn reaches_deep_states() {
        let r = run_fuzz(&small(2), &TmmOptions::default()).unwrap();
        for cmd in ["create_cvm", "create_ttt", "tec_create", "activate_cvm", "destroy_cvm"] {
            assert!(r.outcomes[cmd].contains_key("success"), "{cmd}: {:?}", r.outcomes[cmd]);
        }
    }

    #[test]
    fn transition_table() {
        use CvmState::*;
        assert!(legal(Null, New) && legal(SystemOff, Null));
        assert!(!legal(Active, New) && !legal(Null, Active) && !legal(SystemOff, Active));
    }
}
