// SPDX-License-Identifier: Apache-2.0

//! The conformance suite. Each case builds its own machines and returns
//! `Err` with a reason on the first violated expectation.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::Serialize;
use tmm_sim::attestation::{verify_token, RejectReason, Verdict};
use tmm_sim::guest::{assemble, Desc, Instr, PsciFunction};
use tmm_sim::host::virtio::{BLK_T_IN, BLK_T_OUT, SECTOR_SIZE};
use tmm_sim::host::{CvmSpec, Device, DeviceSpec, HostPolicy, HostSim, VcpuSpec};
use tmm_sim::machine::Machine;
use tmm_sim::mem::{Access, AccessMode, CvmId, MappingPolicy, Requestor, World, TZASC_MAX_REGIONS};
use tmm_sim::platform::{PlatformConfig, SECURE_TIMER_INTID, VTIMER_INTID};
use tmm_sim::shadow::Counters;
use tmm_sim::tmm::cvm::{CvmParams, CvmState};
use tmm_sim::tmm::tec::EXIT_OFFSET;
use tmm_sim::tmm::ttt::{enumerate, translate};
use tmm_sim::tmm::{ExitInfo, ExitReason, MonitorEvent, TecId, TmiCommand, TmiRequest, TmiStatus, TmmOptions, TraceEvent};
use tmm_sim::tsi::{TsiFunction, TsiStatus};

use crate::checks::{delivery_violations, machine_invariants, token_from_trace};
use crate::driver::{platform, Rig, PAGE};

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    MultiCore,
    Race,
    InputSanity,
    TttLevels,
    InterWorldSharing,
    InterCvmIsolation,
    TimerInterrupt,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::MultiCore,
        Category::Race,
        Category::InputSanity,
        Category::TttLevels,
        Category::InterWorldSharing,
        Category::InterCvmIsolation,
        Category::TimerInterrupt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::MultiCore => "multi-core",
            Category::Race => "race",
            Category::InputSanity => "input-sanity",
            Category::TttLevels => "ttt-levels",
            Category::InterWorldSharing => "inter-world-sharing",
            Category::InterCvmIsolation => "inter-cvm-isolation",
            Category::TimerInterrupt => "timer-interrupt",
        }
    }
}

pub type CaseResult = Result<(), String>;

pub struct Case {
    pub id: &'static str,
    pub category: Category,
    /// Needs real concurrency; skipped when fewer than two cpus are allowed.
    pub needs_parallel: bool,
    pub run: fn(&Ctx) -> CaseResult,
}

/// Per-case environment. Every machine a case creates is registered so the
/// suite can gather command coverage afterwards.
pub struct Ctx {
    pub tmm: TmmOptions,
    pub parallel_cpus: usize,
    machines: RefCell<Vec<Machine>>,
}

impl Ctx {
    pub fn new(tmm: TmmOptions, parallel_cpus: usize) -> Ctx {
        Ctx {
            tmm,
            parallel_cpus,
            machines: RefCell::new(Vec::new()),
        }
    }

    pub fn machine(&self, cfg: &PlatformConfig) -> Result<Machine, String> {
        let m = Machine::new(cfg, self.tmm.clone()).map_err(|e| e.to_string())?;
        self.machines.borrow_mut().push(m.clone());
        Ok(m)
    }

    pub fn rig(&self, policy: MappingPolicy) -> Result<Rig, String> {
        Ok(Rig::new(self.machine(&platform(2048, 1024, policy))?))
    }

    pub fn host(&self, cfg: &PlatformConfig) -> Result<HostSim, String> {
        Ok(HostSim::new(self.machine(cfg)?, HostPolicy::default()))
    }

    pub fn boot(&self, cfg: &PlatformConfig, spec: &CvmSpec) -> Result<(HostSim, CvmId), String> {
        let mut host = self.host(cfg)?;
        let id = host.boot_cvm(spec).map_err(|e| e.to_string())?;
        Ok((host, id))
    }

    fn harvest(&self) -> (BTreeSet<String>, BTreeSet<String>, Counters) {
        let mut tmi = BTreeSet::new();
        let mut tsi = BTreeSet::new();
        let mut total = Counters::default();
        for m in self.machines.borrow().iter() {
            m.with(|p, t| {
                let c = t.coverage();
                tmi.extend(c.tmi.iter().filter(|(_, n)| **n > 0).map(|(k, _)| k.clone()));
                tsi.extend(c.tsi.iter().filter(|(_, n)| **n > 0).map(|(k, _)| k.clone()));
                let l = p.ledger().counters();
                total.world_switch += l.world_switch;
                total.tmi_calls += l.tmi_calls;
                total.cvm_exits += l.cvm_exits;
                total.irq_round_trips += l.irq_round_trips;
                total.transfers += l.transfers;
                total.bytes_copied += l.bytes_copied;
                total.stage2_map += l.stage2_map;
                total.stage2_unmap += l.stage2_unmap;
                total.tlb_flush += l.tlb_flush;
                total.smc_calls += l.smc_calls;
                total.delegations += l.delegations;
            })
        }
        (tmi, tsi, total)
    }
}

pub fn cases() -> Vec<Case> {
    use Category::*;
    let c = |id, category, run| Case {
        id,
        category,
        needs_parallel: false,
        run,
    };
    let p = |id, run| Case {
        id,
        category: Race,
        needs_parallel: true,
        run,
    };
    vec![
        c("mc-secondary-boot", MultiCore, mc_secondary_boot),
        c("mc-ipi-two-round-trips", MultiCore, mc_ipi),
        c("mc-four-vcpus", MultiCore, mc_four_vcpus),
        p("race-ttt-create", race_ttt_create),
        p("race-data-create", race_data_create),
        p("race-destroy-vs-enter", race_destroy_vs_enter),
        c("is-unknown-command", InputSanity, is_unknown_command),
        c("is-bad-addresses", InputSanity, is_bad_addresses),
        c("is-wrong-state", InputSanity, is_wrong_state),
        c("is-tsi-arguments", InputSanity, is_tsi_arguments),
        c("ttt-walk-levels", TttLevels, ttt_walk_levels),
        c("ttt-block-mapping", TttLevels, ttt_block_mapping),
        c("ttt-unmap-abort", TttLevels, ttt_unmap_abort),
        c("iws-unprotected-window", InterWorldSharing, iws_unprotected_window),
        c("iws-virtio-blk", InterWorldSharing, iws_virtio_blk),
        c("iws-protected-io", InterWorldSharing, iws_protected_io),
        c("ici-disjoint-regions", InterCvmIsolation, ici_disjoint_regions),
        c("ici-zero-on-destroy", InterCvmIsolation, ici_zero_on_destroy),
        c("ici-attestation-binding", InterCvmIsolation, ici_attestation_binding),
        c("ti-vtimer-wakeup", TimerInterrupt, ti_vtimer_wakeup),
        c("ti-secure-timer", TimerInterrupt, ti_secure_timer),
        c("ti-lr-overflow", TimerInterrupt, ti_lr_overflow),
    ]
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail(String),
    Skip(String),
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseOutcome {
    pub id: &'static str,
    pub category: Category,
    #[serde(flatten)]
    pub status: Status,
    pub millis: u64,
    pub tmi: BTreeSet<String>,
    pub tsi: BTreeSet<String>,
    pub counters: Counters,
}

#[derive(Clone, Debug, Serialize)]
pub struct CoverageReport {
    pub covered: BTreeSet<String>,
    pub missing: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConformanceReport {
    pub filter: Option<String>,
    pub parallel_cpus: usize,
    pub cases: Vec<CaseOutcome>,
    pub passed: usize,
    pub failed: usize,
    pub skipped: usize,
    pub categories: BTreeMap<Category, usize>,
    pub tmi_coverage: CoverageReport,
    pub tsi_coverage: CoverageReport,
}

impl ConformanceReport {
    /// No failures, and for an unfiltered run, every category present and
    /// every standard command and service exercised.
    pub fn all_passed(&self) -> bool {
        self.failed == 0
            && (self.filter.is_some()
                || (self.tmi_coverage.missing.is_empty()
                    && self.tsi_coverage.missing.is_empty()
                    && self.categories.len() == Category::ALL.len()))
    }

    pub fn outcome(&self, id: &str) -> Option<&CaseOutcome> {
        self.cases.iter().find(|c| c.id == id)
    }
}

/// `filter` selects a category name or a case id.
pub fn run_conformance(filter: Option<&str>, parallel_cpus: usize, tmm: &TmmOptions) -> ConformanceReport {
    let mut outcomes = Vec::new();
    let mut tmi_all = BTreeSet::new();
    let mut tsi_all = BTreeSet::new();
    for case in cases() {
        if let Some(f) = filter {
            if case.category.name() != f && case.id != f {
                continue;
            }
        }
        let ctx = Ctx::new(tmm.clone(), parallel_cpus);
        let start = Instant::now();
        let status = if case.needs_parallel && parallel_cpus < 2 {
            Status::Skip("needs at least two parallel cpus".into())
        } else {
            match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| (case.run)(&ctx))) {
                Ok(Ok(())) => Status::Pass,
                Ok(Err(e)) => Status::Fail(e),
                Err(p) => Status::Fail(format!(
                    "panicked: {}",
                    p.downcast_ref::<String>()
                        .map(String::as_str)
                        .or_else(|| p.downcast_ref::<&str>().copied())
                        .unwrap_or("?")
                )),
            }
        };
        let (tmi, tsi, counters) = ctx.harvest();
        tmi_all.extend(tmi.iter().cloned());
        tsi_all.extend(tsi.iter().cloned());
        outcomes.push(CaseOutcome {
            id: case.id,
            category: case.category,
            status,
            millis: start.elapsed().as_millis() as u64,
            tmi,
            tsi,
            counters,
        });
    }
    let count = |f: fn(&Status) -> bool| outcomes.iter().filter(|o| f(&o.status)).count();
    let mut categories = BTreeMap::new();
    for o in &outcomes {
        *categories.entry(o.category).or_default() += 1;
    }
    let missing_tmi = TmiCommand::STANDARD
        .iter()
        .map(|c| c.name().to_string())
        .filter(|n| !tmi_all.contains(n))
        .collect();
    let missing_tsi = TsiFunction::ALL
        .iter()
        .map(|f| f.name().to_string())
        .filter(|n| !tsi_all.contains(n))
        .collect();
    ConformanceReport {
        filter: filter.map(str::to_string),
        parallel_cpus,
        passed: count(|s| *s == Status::Pass),
        failed: count(|s| matches!(s, Status::Fail(_))),
        skipped: count(|s| matches!(s, Status::Skip(_))),
        cases: outcomes,
        categories,
        tmi_coverage: CoverageReport {
            covered: tmi_all,
            missing: missing_tmi,
        },
        tsi_coverage: CoverageReport {
            covered: tsi_all,
            missing: missing_tsi,
        },
    }
}

// ---- helpers -------------------------------------------------------------

fn spec(programs: Vec<Vec<Instr>>) -> CvmSpec {
    let mut s = CvmSpec::single(vec![]);
    s.vcpus = programs
        .into_iter()
        .map(|program| VcpuSpec { entry: None, program })
        .collect();
    s
}

fn cpu_on(target: u8) -> Instr {
    Instr::Psci {
        function: PsciFunction::CpuOn,
        target,
        entry: u64::from(target) * 0x10000,
    }
}

fn cpu_off() -> Instr {
    Instr::Psci {
        function: PsciFunction::CpuOff,
        target: 0,
        entry: 0,
    }
}

fn run(host: &mut HostSim, id: CvmId, steps: u64) -> Result<tmm_sim::host::RunReport, String> {
    host.run(id, steps).map_err(|e| e.to_string())
}

fn healthy(host: &HostSim) -> CaseResult {
    machine_invariants(host.machine())?;
    let monitor = host.machine().with(|_, t| t.events().to_vec());
    let v = delivery_violations(&monitor, host.events());
    ensure!(v.is_empty(), "delivery: {v:?}");
    Ok(())
}

fn marks(trace: &[TraceEvent]) -> Vec<u64> {
    trace
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Mark(m) => Some(*m),
            _ => None,
        })
        .collect()
}

fn reads(trace: &[TraceEvent]) -> Vec<Vec<u8>> {
    trace
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Read { bytes, .. } => Some(bytes.clone()),
            _ => None,
        })
        .collect()
}

fn trace_of(r: &tmm_sim::host::RunReport, vcpu: u8) -> &[TraceEvent] {
    r.traces.get(&vcpu).map_or(&[], Vec::as_slice)
}

/// A cVM built at the command level with `program` at IPA 0, activated,
/// plus a run page for entering its first TEC.
fn active_cvm(rig: &Rig, program: &[Instr], extra: &[(u64, &[u8])]) -> Result<(CvmId, TecId, u64), String> {
    let id = rig.create(&CvmParams::default(), 64)?;
    let tec = rig.tec(id, 0)?;
    let code = assemble(program).map_err(|e| e.to_string())?;
    for (i, chunk) in code.chunks(PAGE as usize).enumerate() {
        rig.data(id, i as u64 * PAGE, chunk)?;
    }
    for (ipa, bytes) in extra {
        rig.data(id, *ipa, bytes)?;
    }
    rig.ok(TmiCommand::ActivateCvm, &[u64::from(id.0)])?;
    let run = rig.ns()?.addr();
    Ok((id, tec, run))
}

fn enter(rig: &Rig, tec: TecId, run: u64) -> Result<ExitInfo, String> {
    rig.ok(TmiCommand::TecEnter, &[u64::from(tec.0), run, 1000])?;
    let page = rig
        .m
        .with(|p, _| p.host_read(tmm_sim::mem::GranuleIdx((run / PAGE) as usize)))
        .map_err(|_| "run page unreadable".to_string())?;
    ExitInfo::decode(&page[EXIT_OFFSET..]).ok_or_else(|| "undecodable exit record".into())
}

const IO: u64 = 0x100000;
const HDR: u64 = IO + 6 * PAGE;
const STATUS: u64 = HDR + 0x100;
const DATA: u64 = IO + 7 * PAGE;
const DATA2: u64 = IO + 8 * PAGE;

fn payload() -> Vec<u8> {
    (0..SECTOR_SIZE as usize).map(|i| (i * 13 + 1) as u8).collect()
}

fn blk_request(kind: u32, sector: u64, data: u64) -> Vec<Instr> {
    let mut header = kind.to_le_bytes().to_vec();
    header.extend([0; 4]);
    header.extend(sector.to_le_bytes());
    vec![
        Instr::MemWrite { ipa: HDR, bytes: header },
        Instr::VirtioSubmit {
            queue: 0,
            descs: vec![
                Desc {
                    ipa: HDR,
                    len: 16,
                    writable: false,
                },
                Desc {
                    ipa: data,
                    len: SECTOR_SIZE as u32,
                    writable: kind == BLK_T_IN,
                },
                Desc {
                    ipa: STATUS,
                    len: 1,
                    writable: true,
                },
            ],
        },
        Instr::Compute(50),
    ]
}

fn blk_spec(program: Vec<Instr>) -> CvmSpec {
    let mut s = CvmSpec::single(program);
    s.params.io_window_base = IO;
    s.params.io_window_pages = 16;
    s.params.io_queues = 1;
    s.devices = vec![DeviceSpec::Blk {
        queue: 0,
        sectors: 16,
        path: None,
        intid: None,
    }];
    s
}

fn scoped<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..n).map(|i| s.spawn(move || f(i))).collect();
        handles.into_iter().map(|h| h.join().expect("worker")).collect()
    })
}

// ---- multi-core ------------------------------------------------------------

fn mc_secondary_boot(ctx: &Ctx) -> CaseResult {
    let (mut host, id) = ctx.boot(
        &PlatformConfig::default(),
        &spec(vec![vec![cpu_on(1), cpu_off()], vec![Instr::Mark(11), Instr::Halt]]),
    )?;
    let tecs = host.tec_ids(id);
    let runnable = |h: &HostSim| h.machine().with(|_, t| t.tec(tecs[1]).map(|t| t.runnable));
    ensure!(runnable(&host) == Some(false), "secondary vCPU runnable before CPU_ON");
    let r = run(&mut host, id, 100)?;
    ensure!(r.halted, "guest did not halt: {r:?}");
    ensure!(
        trace_of(&r, 0).contains(&TraceEvent::PsciDone {
            function: PsciFunction::CpuOn,
            status: 0
        }),
        "CPU_ON not completed: {:?}",
        trace_of(&r, 0)
    );
    ensure!(marks(trace_of(&r, 1)) == [11], "secondary trace {:?}", trace_of(&r, 1));
    healthy(&host)
}

fn mc_ipi(ctx: &Ctx) -> CaseResult {
    let (mut host, id) = ctx.boot(&PlatformConfig::default(), &crate::bench::ipi_spec())?;
    let r = run(&mut host, id, 100)?;
    ensure!(r.halted, "guest did not halt");
    ensure!(r.irq_round_trips == 2, "{} round trips for one IPI", r.irq_round_trips);
    ensure!(trace_of(&r, 1).first() == Some(&TraceEvent::Virq(1)), "receiver trace {:?}", trace_of(&r, 1));
    healthy(&host)
}

fn mc_four_vcpus(ctx: &Ctx) -> CaseResult {
    let cfg = PlatformConfig {
        cpus: 4,
        ..PlatformConfig::default()
    };
    // Halting powers the whole cVM off, so the secondaries only go offline.
    let mut programs = vec![vec![cpu_on(1), cpu_on(2), cpu_on(3), Instr::Compute(3_000), Instr::Mark(100), Instr::Halt]];
    for k in 1..4u64 {
        programs.push(vec![Instr::Compute(200), Instr::Mark(100 + k), cpu_off()]);
    }
    let (mut host, id) = ctx.boot(&cfg, &spec(programs))?;
    let r = run(&mut host, id, 200)?;
    ensure!(r.halted, "guest did not halt: {r:?}");
    for k in 0..4u8 {
        ensure!(marks(trace_of(&r, k)) == [100 + u64::from(k)], "vCPU {k}: {:?}", trace_of(&r, k));
    }
    let cpus: BTreeSet<usize> = host
        .events()
        .iter()
        .filter_map(|e| match e {
            tmm_sim::host::HostEvent::Exit { cpu, .. } => Some(*cpu),
            _ => None,
        })
        .collect();
    ensure!(cpus.len() > 1, "all vCPUs ran on one cpu: {cpus:?}");
    healthy(&host)
}

// ---- races -----------------------------------------------------------------

fn race_ttt_create(ctx: &Ctx) -> CaseResult {
    let rig = ctx.rig(MappingPolicy::Direct)?;
    let id = rig.create(&CvmParams::default(), 256)?;
    let c = u64::from(id.0);
    rig.ok(TmiCommand::CreateTtt, &[c, 0, 1])?;
    rig.ok(TmiCommand::CreateTtt, &[c, 0, 2])?;
    let threads = ctx.parallel_cpus.max(2);
    for round in 0..32u64 {
        let ipa = round << 21;
        let statuses = scoped(threads, |i| rig.m.call(i % 2, TmiCommand::CreateTtt, &[c, ipa, 3]).status);
        let won = statuses.iter().filter(|s| **s == TmiStatus::Success).count();
        ensure!(won == 1, "round {round}: {won} winners {statuses:?}");
        ensure!(
            statuses.iter().all(|s| matches!(s, TmiStatus::Success | TmiStatus::ErrorInput)),
            "round {round}: {statuses:?}"
        );
    }
    machine_invariants(&rig.m)
}

fn race_data_create(ctx: &Ctx) -> CaseResult {
    let rig = ctx.rig(MappingPolicy::Direct)?;
    let id = rig.create(&CvmParams::default(), 256)?;
    let c = u64::from(id.0);
    rig.tables(id, 0)?;
    let threads = ctx.parallel_cpus.max(2);
    for page in 0..64u64 {
        let ipa = page * PAGE;
        let results = scoped(threads, |i| rig.m.call(i % 2, TmiCommand::DataCreateUnknown, &[c, ipa]));
        let won: Vec<_> = results.iter().filter(|r| r.is_ok()).collect();
        ensure!(won.len() == 1, "page {page}: {} winners", won.len());
    }
    let leaves = rig.m.with(|p, t| enumerate(p.mem(), t.cvm(id).unwrap().ttt_root).1.len());
    ensure!(leaves == 64, "{leaves} leaves after 64 contested creates");
    machine_invariants(&rig.m)
}

fn race_destroy_vs_enter(ctx: &Ctx) -> CaseResult {
    for round in 0..16 {
        let rig = ctx.rig(MappingPolicy::Direct)?;
        let (id, tec, run) = active_cvm(&rig, &[Instr::Compute(100_000), Instr::Halt], &[])?;
        let out = scoped(2, |i| {
            if i == 0 {
                rig.m.call(0, TmiCommand::TecEnter, &[u64::from(tec.0), run, 500]).status
            } else {
                rig.m.call(1, TmiCommand::DestroyCvm, &[u64::from(id.0)]).status
            }
        });
        ensure!(out[1] == TmiStatus::Success, "round {round}: destroy {:?}", out[1]);
        ensure!(
            matches!(out[0], TmiStatus::Success | TmiStatus::ErrorInput),
            "round {round}: enter {:?}",
            out[0]
        );
        let owned = rig.m.with(|p, t| {
            (
                t.cvm_state(id),
                p.mem().iter().filter(|(_, g)| g.owner() == Some(id)).count(),
                t.tec(tec).is_some(),
            )
        });
        ensure!(owned == (CvmState::Null, 0, false), "round {round}: left behind {owned:?}");
        machine_invariants(&rig.m)?;
    }
    Ok(())
}

// ---- input sanity ------------------------------------------------------------

fn is_unknown_command(ctx: &Ctx) -> CaseResult {
    let rig = ctx.rig(MappingPolicy::Direct)?;
    let before = rig.m.fingerprint();
    for raw in [0u64, 0xC400_0000, tmm_sim::tmm::TMI_BASE + 0x20, tmm_sim::tmm::TMI_BASE + 0x32, u64::MAX] {
        let r = rig.m.tmi(0, &TmiRequest::raw(raw, &[1, 2, 3]));
        ensure!(r.status == TmiStatus::ErrorInput, "{raw:#x}: {:?}", r.status);
    }
    // The fingerprint covers memory, tables and monitor state, not the ledger.
    ensure!(rig.m.fingerprint() == before, "unknown commands changed state");
    Ok(())
}

fn is_bad_addresses(ctx: &Ctx) -> CaseResult {
    let rig = ctx.rig(MappingPolicy::Direct)?;
    let a = rig.create(&CvmParams::default(), 64)?;
    let b = rig.create(&CvmParams::default(), 64)?;
    rig.data(a, 0, b"secret")?;
    rig.tables(b, 0)?;
    let (a_page, mem_len) = rig.m.with(|p, t| {
        (
            translate(p.mem(), t.cvm(a).unwrap().ttt_root, 0).map(|x| x.0),
            p.mem().len() as u64,
        )
    });
    let a_page = a_page.ok_or("no translation for a's page")?.addr();
    let src = rig.ns()?;
    rig.write(src, &[1; 16])?;
    let params = rig.ns()?;
    rig.write(params, &CvmParams::default().encode())?;
    let cb = u64::from(b.0);
    let shared = 1u64 << 31;
    rig.tables(b, shared)?;
    let cases: Vec<(TmiCommand, Vec<u64>)> = vec![
        (TmiCommand::CreateCvm, vec![params.addr() + 8, 32, 0]),
        (TmiCommand::CreateCvm, vec![mem_len * PAGE, 32, 0]),
        (TmiCommand::CreateCvm, vec![a_page, 32, 0]),
        (TmiCommand::CreateCvm, vec![params.addr(), 0, 0]),
        (TmiCommand::DataCreate, vec![cb, 0, a_page]),
        (TmiCommand::DataCreate, vec![cb, 0, src.addr() + 1]),
        (TmiCommand::DataCreate, vec![cb, 0x10, src.addr()]),
        (TmiCommand::DataCreate, vec![cb, 1 << 40, src.addr()]),
        (TmiCommand::DataCreate, vec![cb, shared, src.addr()]),
        (TmiCommand::MapProtected, vec![cb, 0x1000, a_page]),
        (TmiCommand::MapUnprotected, vec![cb, shared, a_page]),
        (TmiCommand::MapUnprotected, vec![cb, 0, src.addr()]),
        (TmiCommand::TecCreate, vec![cb, a_page]),
        (TmiCommand::TecEnter, vec![0, a_page, 10]),
        (TmiCommand::DataDestroy, vec![cb, 0]),
        (TmiCommand::DataBlockCreate, vec![cb, 0, 0, src.addr()]),
        (TmiCommand::DataBlockCreate, vec![cb, 0, 1 << 20, src.addr()]),
        (TmiCommand::DestroyCvm, vec![9999]),
    ];
    for (cmd, args) in cases {
        let before = rig.m.fingerprint();
        let r = rig.call(cmd, &args);
        ensure!(!r.is_ok(), "{} {args:x?} accepted", cmd.name());
        ensure!(rig.m.fingerprint() == before, "{} {args:x?} failed but changed state", cmd.name());
    }
    machine_invariants(&rig.m)
}

fn is_wrong_state(ctx: &Ctx) -> CaseResult {
    let rig = ctx.rig(MappingPolicy::Direct)?;
    let id = rig.create(&CvmParams::default(), 64)?;
    let c = u64::from(id.0);
    rig.expect(TmiCommand::ActivateCvm, &[c], TmiStatus::ErrorState)?;
    // A TEC on a cVM still being built can be removed again.
    let t = rig.tec(id, 0)?;
    let run = rig.ns()?.addr();
    rig.expect(TmiCommand::TecEnter, &[u64::from(t.0), run, 10], TmiStatus::ErrorState)?;
    rig.ok(TmiCommand::TecDestroy, &[u64::from(t.0)])?;
    let t = rig.tec(id, 0)?;
    rig.data(id, 0, &assemble(&[Instr::Halt]).map_err(|e| e.to_string())?)?;
    rig.ok(TmiCommand::ActivateCvm, &[c])?;
    rig.expect(TmiCommand::ActivateCvm, &[c], TmiStatus::ErrorState)?;
    let src = rig.ns()?;
    rig.tables(id, PAGE)?;
    rig.expect(TmiCommand::DataCreate, &[c, PAGE, src.addr()], TmiStatus::ErrorState)?;
    let g = rig.ns()?;
    rig.expect(TmiCommand::TecCreate, &[c, g.addr()], TmiStatus::ErrorState)?;
    rig.expect(TmiCommand::TecDestroy, &[u64::from(t.0)], TmiStatus::ErrorState)?;
    // Halting powers the cVM off: nothing more may run.
    let exit = enter(&rig, t, run)?;
    ensure!(exit.reason == ExitReason::SystemOff, "halt exit {:?}", exit.reason);
    ensure!(rig.m.with(|_, t| t.cvm_state(id)) == CvmState::SystemOff, "not powered off");
    rig.expect(TmiCommand::TecEnter, &[u64::from(t.0), run, 10], TmiStatus::ErrorState)?;
    rig.expect(TmiCommand::CreateTtt, &[c, 0x4000_0000, 2], TmiStatus::ErrorState)?;
    // A completion with no request behind it.
    rig.expect(TmiCommand::PsciComplete, &[u64::from(t.0), u64::from(t.0), 0], TmiStatus::ErrorInput)?;
    rig.ok(TmiCommand::DestroyCvm, &[c])?;
    machine_invariants(&rig.m)
}

fn is_tsi_arguments(ctx: &Ctx) -> CaseResult {
    let tsi = |function, args: [u64; 4], data: Vec<u8>| Instr::Tsi { function, args, data };
    let program = vec![
        tsi(TsiFunction::Version, [0; 4], vec![]),
        tsi(TsiFunction::CvmConfig, [0; 4], vec![]),
        tsi(TsiFunction::CvmConfig, [0xF000_0000, 0, 0, 0], vec![]),
        tsi(TsiFunction::MeasurementRead, [0; 4], vec![]),
        tsi(TsiFunction::MeasurementRead, [5, 0, 0, 0], vec![]),
        tsi(TsiFunction::MeasurementExtend, [0, 0, 0, 0], vec![1]),
        tsi(TsiFunction::MeasurementExtend, [2, 0, 0, 0], vec![1, 2, 3]),
        tsi(TsiFunction::MeasurementExtend, [9, 0, 0, 0], vec![1]),
        tsi(TsiFunction::AttestationTokenContinue, [0x8000, 64, 0, 0], vec![]),
        tsi(TsiFunction::AttestationTokenInit, [0; 4], vec![0; 10]),
        tsi(TsiFunction::AttestationTokenInit, [0; 4], vec![0; 64]),
        tsi(TsiFunction::AttestationTokenInit, [0; 4], vec![0; 64]),
        tsi(TsiFunction::AttestationTokenContinue, [0x8000, 0, 0, 0], vec![]),
        tsi(TsiFunction::HostCall, [4, 5, 6, 7], vec![]),
        Instr::Halt,
    ];
    let (mut host, id) = ctx.boot(&PlatformConfig::default(), &CvmSpec::single(program))?;
    let r = run(&mut host, id, 100)?;
    ensure!(r.halted, "guest did not halt");
    let got: Vec<(TsiFunction, TsiStatus)> = trace_of(&r, 0)
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Tsi { function, status, .. } => Some((*function, *status)),
            _ => None,
        })
        .collect();
    use TsiFunction::*;
    use TsiStatus::*;
    let want = vec![
        (Version, Success),
        (CvmConfig, Success),
        (CvmConfig, ErrorInput),
        (MeasurementRead, Success),
        (MeasurementRead, ErrorInput),
        (MeasurementExtend, ErrorInput),
        (MeasurementExtend, Success),
        (MeasurementExtend, ErrorInput),
        (AttestationTokenContinue, ErrorState),
        (AttestationTokenInit, ErrorInput),
        (AttestationTokenInit, Success),
        (AttestationTokenInit, Success),
        (AttestationTokenContinue, ErrorInput),
    ];
    ensure!(got == want, "statuses {got:?}");
    ensure!(r.exits.get("host_call") == Some(&1), "host call exits {:?}", r.exits);
    healthy(&host)
}

// ---- translation table levels ------------------------------------------------

fn ttt_walk_levels(ctx: &Ctx) -> CaseResult {
    let rig = ctx.rig(MappingPolicy::Direct)?;
    let id = rig.create(&CvmParams::default(), 64)?;
    let c = u64::from(id.0);
    // Level 3 before its parents: the failing level comes back as detail.
    let r = rig.call(TmiCommand::CreateTtt, &[c, 0x4000_0000, 3]);
    ensure!(r.status == TmiStatus::ErrorInput && r.results[0] == 0, "{r:?}");
    for (ipa, level) in [(0, 0), (0, 4), (0x1000, 1), (0x20_0000, 2)] {
        rig.expect(TmiCommand::CreateTtt, &[c, ipa, level], TmiStatus::ErrorInput)?;
    }
    rig.ok(TmiCommand::CreateTtt, &[c, 0, 1])?;
    rig.expect(TmiCommand::CreateTtt, &[c, 0, 1], TmiStatus::ErrorInput)?;
    rig.ok(TmiCommand::CreateTtt, &[c, 0, 2])?;
    rig.ok(TmiCommand::CreateTtt, &[c, 0, 3])?;
    rig.ok(TmiCommand::DataCreateUnknown, &[c, 0])?;
    rig.expect(TmiCommand::DataCreateUnknown, &[c, 0], TmiStatus::ErrorInput)?;
    let r = rig.call(TmiCommand::DataCreateUnknown, &[c, 0x20_0000]);
    ensure!(r.status == TmiStatus::ErrorInput && r.results[0] == 2, "no level-3 table: {r:?}");
    rig.expect(TmiCommand::DestroyTtt, &[c, 0, 3], TmiStatus::ErrorState)?;
    rig.expect(TmiCommand::DestroyTtt, &[c, 0, 2], TmiStatus::ErrorState)?;
    machine_invariants(&rig.m)?;
    rig.ok(TmiCommand::DataDestroy, &[c, 0])?;
    rig.ok(TmiCommand::DestroyTtt, &[c, 0, 3])?;
    rig.ok(TmiCommand::DestroyTtt, &[c, 0, 2])?;
    rig.ok(TmiCommand::DestroyTtt, &[c, 0, 1])?;
    rig.expect(TmiCommand::DestroyTtt, &[c, 0, 1], TmiStatus::ErrorInput)?;
    let tables = rig.m.with(|p, _| {
        p.mem()
            .iter()
            .filter(|(_, g)| g.owner() == Some(id) && g.state() == tmm_sim::mem::GranuleState::Ttt)
            .count()
    });
    ensure!(tables == 1, "{tables} table granules left (root only expected)");
    machine_invariants(&rig.m)
}

fn ttt_block_mapping(ctx: &Ctx) -> CaseResult {
    let rig = Rig::new(ctx.machine(&platform(4096, 2048, MappingPolicy::Direct))?);
    let id = rig.create(&CvmParams::default(), 1100)?;
    let c = u64::from(id.0);
    let start = 0x20_0000;
    rig.ok(TmiCommand::CreateTtt, &[c, 0, 1])?;
    rig.ok(TmiCommand::CreateTtt, &[c, 0, 2])?;
    let src = rig.ns_run(512)?;
    for i in 0..512 {
        rig.write(src.offset(i), &[(i % 251) as u8; 8])?;
    }
    let before = rig.m.with(|p, _| p.ledger().counters().tmi_calls);
    rig.ok(TmiCommand::DataBlockCreate, &[c, start, 512, src.addr()])?;
    let after = rig.m.with(|p, _| p.ledger().counters().tmi_calls);
    ensure!(after - before == 1, "block create cost {} calls", after - before);
    let leaves = rig.m.with(|p, t| enumerate(p.mem(), t.cvm(id).unwrap().ttt_root).1);
    ensure!(leaves.len() == 1 && leaves[0].level == 2 && leaves[0].pages() == 512, "leaves {leaves:?}");
    for i in [0usize, 1, 255, 511] {
        let byte = rig.m.with(|p, t| {
            translate(p.mem(), t.cvm(id).unwrap().ttt_root, start + i as u64 * PAGE)
                .map(|(g, _)| p.mem().granule(g).unwrap().contents()[0])
        });
        ensure!(byte == Some((i % 251) as u8), "page {i} holds {byte:?}");
    }
    machine_invariants(&rig.m)?;
    // Partial destroy of a block is refused; the whole range goes at once.
    rig.expect(TmiCommand::DataBlockDestroy, &[c, start, 2], TmiStatus::ErrorInput)?;
    rig.ok(TmiCommand::DataBlockDestroy, &[c, start, 512])?;
    // Unaligned or table-backed ranges are page mappings.
    rig.tables(id, 0)?;
    rig.ok(TmiCommand::DataBlockCreateUnknown, &[c, 3 * PAGE, 5])?;
    let leaves = rig.m.with(|p, t| enumerate(p.mem(), t.cvm(id).unwrap().ttt_root).1);
    ensure!(leaves.len() == 5 && leaves.iter().all(|l| l.level == 3), "leaves {leaves:?}");
    rig.expect(TmiCommand::DataBlockCreateUnknown, &[c, 6 * PAGE, 3], TmiStatus::ErrorInput)?;
    rig.ok(TmiCommand::DataBlockDestroy, &[c, 3 * PAGE, 5])?;
    machine_invariants(&rig.m)
}

fn ttt_unmap_abort(ctx: &Ctx) -> CaseResult {
    let rig = ctx.rig(MappingPolicy::Direct)?;
    let program = [Instr::MemRead { ipa: 0x5000, len: 4 }, Instr::Mark(1), Instr::Halt];
    let (id, tec, run) = active_cvm(&rig, &program, &[(0x5000, b"abcd")])?;
    let c = u64::from(id.0);
    let target = rig.ok(TmiCommand::UnmapProtected, &[c, 0x5000])?[0];
    rig.expect(TmiCommand::UnmapProtected, &[c, 0x5000], TmiStatus::ErrorInput)?;
    machine_invariants(&rig.m)?;
    let exit = enter(&rig, tec, run)?;
    ensure!(
        exit.reason == ExitReason::DataAbort && exit.ipa == 0x5000 && !exit.is_write,
        "exit {exit:?}"
    );
    // Only the page that was there may come back, at the same address.
    rig.expect(TmiCommand::MapProtected, &[c, 0x6000, target], TmiStatus::ErrorInput)?;
    rig.ok(TmiCommand::MapProtected, &[c, 0x5000, target])?;
    let exit = enter(&rig, tec, run)?;
    ensure!(exit.reason == ExitReason::SystemOff, "exit {exit:?}");
    let trace = rig.m.with(|_, t| t.tec(tec).map(|t| t.trace.clone())).unwrap_or_default();
    ensure!(reads(&trace) == [b"abcd".to_vec()], "guest trace {trace:?}");
    ensure!(marks(&trace) == [1], "guest trace {trace:?}");
    machine_invariants(&rig.m)
}

// ---- inter-world sharing ------------------------------------------------------

fn iws_unprotected_window(ctx: &Ctx) -> CaseResult {
    let rig = ctx.rig(MappingPolicy::Direct)?;
    let id = rig.create(&CvmParams::default(), 64)?;
    let c = u64::from(id.0);
    let shared = 1u64 << 31;
    rig.tables(id, shared)?;
    let g = rig.ns()?;
    rig.ok(TmiCommand::MapUnprotected, &[c, shared, g.addr()])?;
    rig.expect(TmiCommand::MapUnprotected, &[c, shared, g.addr()], TmiStatus::ErrorInput)?;
    rig.tables(id, 0)?;
    rig.expect(TmiCommand::MapUnprotected, &[c, 0, g.addr()], TmiStatus::ErrorInput)?;
    // The shared page stays normal-world memory the host can use.
    let world = rig.m.with(|p, _| p.mem().granule(g).map(|x| x.world()));
    ensure!(world == Some(World::Normal), "shared page in {world:?}");
    rig.write(g, b"from host")?;
    rig.expect(TmiCommand::UnmapProtected, &[c, shared], TmiStatus::ErrorInput)?;
    let r = rig.ok(TmiCommand::UnmapUnprotected, &[c, shared])?;
    ensure!(r[0] == g.addr(), "unmap returned {:#x}", r[0]);
    rig.expect(TmiCommand::UnmapUnprotected, &[c, shared], TmiStatus::ErrorInput)?;
    machine_invariants(&rig.m)
}

fn blk_round_trip(ctx: &Ctx, policy: MappingPolicy) -> Result<Counters, String> {
    let mut p = vec![Instr::MemWrite {
        ipa: DATA,
        bytes: payload(),
    }];
    p.extend(blk_request(BLK_T_OUT, 3, DATA));
    p.extend(blk_request(BLK_T_IN, 3, DATA2));
    p.push(Instr::MemRead {
        ipa: DATA2,
        len: SECTOR_SIZE as u16,
    });
    p.push(Instr::MemRead { ipa: STATUS, len: 1 });
    // Wait rather than halt: a powered-off cVM is torn down with its devices.
    p.push(Instr::Wfi);
    let secure = if policy == MappingPolicy::Direct { 2048 } else { 0 };
    let (mut host, id) = ctx.boot(&platform(4096, secure, policy), &blk_spec(p))?;
    let r = run(&mut host, id, 200)?;
    ensure!(r.deadlock, "{policy:?}: guest did not finish");
    ensure!(reads(trace_of(&r, 0)) == [payload(), vec![0]], "{policy:?}: reads differ");
    let Some(Device::Blk(dev)) = host.device_mut(id, 0) else {
        return Err("no block device".into());
    };
    let disk = dev.read_image(3 * SECTOR_SIZE, SECTOR_SIZE as usize).map_err(|e| e.to_string())?;
    ensure!(disk == payload(), "{policy:?}: sector not written");
    healthy(&host)?;
    Ok(*r.ledger.counters())
}

fn iws_virtio_blk(ctx: &Ctx) -> CaseResult {
    let direct = blk_round_trip(ctx, MappingPolicy::Direct)?;
    ensure!(
        direct.stage2_map == 0 && direct.stage2_unmap == 0 && direct.tlb_flush == 0,
        "direct policy remapped: {direct:?}"
    );
    ensure!(direct.transfers > 0 && direct.bytes_copied > 0, "no shadow transfers: {direct:?}");
    let dynamic = blk_round_trip(ctx, MappingPolicy::Dynamic)?;
    ensure!(dynamic.stage2_map > 0 && dynamic.tlb_flush > 0, "dynamic policy: {dynamic:?}");
    Ok(())
}

fn iws_protected_io(ctx: &Ctx) -> CaseResult {
    let mut p = vec![
        Instr::ProtectIoPages { ipa: DATA, pages: 1 },
        Instr::MemWrite {
            ipa: DATA,
            bytes: payload(),
        },
    ];
    p.extend(blk_request(BLK_T_OUT, 1, DATA));
    p.extend(blk_request(BLK_T_IN, 1, DATA));
    p.push(Instr::MemRead {
        ipa: DATA,
        len: SECTOR_SIZE as u16,
    });
    p.push(Instr::Wfi);
    let (mut host, id) = ctx.boot(&PlatformConfig::default(), &blk_spec(p))?;
    let r = run(&mut host, id, 200)?;
    ensure!(r.deadlock, "guest did not finish");
    ensure!(reads(trace_of(&r, 0)) == [payload()], "guest lost its plaintext");
    let shadow = host.machine().with(|p, t| {
        let g = t.cvm(id)?.shadow_of_page(DATA / PAGE)?;
        Some(p.mem().granule(g)?.contents()[..SECTOR_SIZE as usize].to_vec())
    });
    ensure!(shadow.is_some_and(|s| s != payload()), "shadow page holds plaintext");
    let Some(Device::Blk(dev)) = host.device_mut(id, 0) else {
        return Err("no block device".into());
    };
    let disk = dev.read_image(SECTOR_SIZE, SECTOR_SIZE as usize).map_err(|e| e.to_string())?;
    ensure!(disk != payload(), "device received plaintext");
    let failures = host
        .machine()
        .with(|_, t| t.events().iter().filter(|e| matches!(e, MonitorEvent::IntegrityFailure { .. })).count());
    ensure!(failures == 0, "{failures} integrity failures on an honest round trip");
    healthy(&host)
}

// ---- inter-cVM isolation --------------------------------------------------------

fn small(mark: u64) -> CvmSpec {
    CvmSpec::single(vec![
        Instr::MemWrite {
            ipa: 0x3000,
            bytes: vec![mark as u8; 64],
        },
        Instr::Mark(mark),
        Instr::Wfi,
    ])
}

fn ici_disjoint_regions(ctx: &Ctx) -> CaseResult {
    let mut host = ctx.host(&PlatformConfig::default())?;
    let ids = (0..8)
        .map(|i| host.boot_cvm(&small(i)).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    for id in &ids {
        run(&mut host, *id, 20)?;
    }
    let m = host.machine().clone();
    m.with(|p, _| {
        let regions = p.mem().tzasc().regions.len();
        ensure!(regions <= TZASC_MAX_REGIONS, "{regions} TZASC regions");
        let mut spans = Vec::new();
        for id in &ids {
            let r = p.mem().region(*id).ok_or(format!("{id} has no region"))?;
            spans.push((r.base.0, r.base.0 + r.count));
        }
        spans.sort();
        ensure!(spans.windows(2).all(|w| w[0].1 <= w[1].0), "overlapping regions {spans:?}");
        for (g, granule) in p.mem().iter() {
            let Some(owner) = granule.owner() else { continue };
            for other in ids.iter().filter(|id| **id != owner) {
                ensure!(
                    p.mem().check_access(Requestor::Cvm(*other), g, AccessMode::Read) == Access::Fault,
                    "{other} can read {g} of {owner}"
                );
            }
            ensure!(
                p.mem().check_access(Requestor::Host, g, AccessMode::Write) == Access::Fault,
                "host can write {g}"
            );
        }
        Ok(())
    })?;
    healthy(&host)
}

fn ici_zero_on_destroy(ctx: &Ctx) -> CaseResult {
    let mut host = ctx.host(&PlatformConfig::default())?;
    let a = host.boot_cvm(&small(0x5a)).map_err(|e| e.to_string())?;
    run(&mut host, a, 20)?;
    let owned: Vec<_> = host
        .machine()
        .with(|p, _| p.mem().iter().filter(|(_, g)| g.owner() == Some(a)).map(|(i, _)| i).collect());
    host.destroy(a).map_err(|e| e.to_string())?;
    let m = host.machine().clone();
    m.with(|p, t| {
        ensure!(t.cvm_state(a) == CvmState::Null, "destroyed cVM in {:?}", t.cvm_state(a));
        p.mem().check_invariants()?;
        for g in &owned {
            let gr = p.mem().granule(*g).ok_or("granule vanished")?;
            ensure!(gr.contents().iter().all(|b| *b == 0), "{g} not scrubbed");
        }
        Ok(())
    })?;
    // The next tenant sees only zeros where the previous one wrote.
    let b = host
        .boot_cvm(&CvmSpec::single(vec![Instr::MemRead { ipa: 0x3000, len: 64 }, Instr::Halt]))
        .map_err(|e| e.to_string())?;
    let r = run(&mut host, b, 20)?;
    ensure!(reads(trace_of(&r, 0)) == [vec![0; 64]], "new tenant read {:?}", reads(trace_of(&r, 0)));
    healthy(&host)
}

fn ici_attestation_binding(ctx: &Ctx) -> CaseResult {
    let challenge = [0x3c; 64];
    let program = |mark: u64| {
        vec![
            Instr::Mark(mark),
            Instr::MemWrite { ipa: 0x8000, bytes: vec![0] },
            Instr::RetrieveToken {
                challenge: challenge.to_vec(),
                buffer: 0x8000,
                chunk: 300,
            },
            Instr::MemRead { ipa: 0x8000, len: 4096 },
            Instr::Halt,
        ]
    };
    let mut host = ctx.host(&PlatformConfig::default())?;
    let a = host.boot_cvm(&CvmSpec::single(program(1))).map_err(|e| e.to_string())?;
    let b = host.boot_cvm(&CvmSpec::single(program(2))).map_err(|e| e.to_string())?;
    let (ma, mb, rak) = host.machine().with(|_, t| {
        (
            t.cvm(a).unwrap().measurement_value(),
            t.cvm(b).unwrap().measurement_value(),
            t.keys().rak_public(),
        )
    });
    ensure!(ma != mb, "different images share a measurement");
    let ra = run(&mut host, a, 1000)?;
    let token = token_from_trace(trace_of(&ra, 0)).ok_or("no token retrieved")?;
    ensure!(verify_token(&token, &rak, &ma, &challenge) == Verdict::Accept, "honest token rejected");
    ensure!(
        verify_token(&token, &rak, &mb, &challenge) == Verdict::Reject(RejectReason::MeasurementMismatch),
        "token accepted for another cVM"
    );
    ensure!(
        verify_token(&token, &rak, &ma, &[0; 64]) == Verdict::Reject(RejectReason::ChallengeMismatch),
        "token accepted for another challenge"
    );
    let other = ctx.machine(&PlatformConfig {
        rot_seed: [0x11; 32],
        ..PlatformConfig::default()
    })?;
    let other_rak = other.with(|_, t| t.keys().rak_public());
    ensure!(verify_token(&token, &other_rak, &ma, &challenge) != Verdict::Accept, "foreign root accepted");
    healthy(&host)
}

// ---- timers and interrupts --------------------------------------------------------

fn ti_vtimer_wakeup(ctx: &Ctx) -> CaseResult {
    let (mut host, id) = ctx.boot(&PlatformConfig::default(), &spec(vec![vec![Instr::Wfi, Instr::Mark(1), Instr::Halt]]))?;
    let now = host.machine().with(|p, _| p.clock());
    host.schedule_interrupt(now + 400, 0, VTIMER_INTID);
    let r = run(&mut host, id, 100)?;
    ensure!(r.halted, "guest never woke");
    ensure!(
        trace_of(&r, 0) == [TraceEvent::Virq(VTIMER_INTID), TraceEvent::Mark(1)],
        "trace {:?}",
        trace_of(&r, 0)
    );
    ensure!(r.exits.get("wfi") == Some(&1), "exits {:?}", r.exits);
    // A timer that fires while the guest computes interrupts it.
    let (mut host2, id2) = ctx.boot(
        &PlatformConfig::default(),
        &spec(vec![vec![Instr::Compute(300), Instr::Mark(2), Instr::Halt]]),
    )?;
    let now = host2.machine().with(|p, _| p.clock());
    host2.schedule_interrupt(now + 100, 0, VTIMER_INTID);
    let r2 = run(&mut host2, id2, 100)?;
    ensure!(r2.exits.get("irq") == Some(&1) && r2.irq_round_trips == 1, "exits {:?}", r2.exits);
    ensure!(trace_of(&r2, 0).contains(&TraceEvent::Virq(VTIMER_INTID)), "no vIRQ");
    healthy(&host)?;
    healthy(&host2)
}

fn ti_secure_timer(ctx: &Ctx) -> CaseResult {
    let (mut host, id) = ctx.boot(
        &PlatformConfig::default(),
        &spec(vec![vec![Instr::Compute(300), Instr::Mark(3), Instr::Halt]]),
    )?;
    let now = host.machine().with(|p, _| p.clock());
    host.schedule_interrupt(now + 50, 0, SECURE_TIMER_INTID);
    let r = run(&mut host, id, 100)?;
    ensure!(r.halted, "guest did not halt");
    ensure!(!r.exits.contains_key("irq"), "secure interrupt reached the host: {:?}", r.exits);
    ensure!(trace_of(&r, 0) == [TraceEvent::Mark(3)], "trace {:?}", trace_of(&r, 0));
    let ev = host.machine().with(|_, t| t.events().to_vec());
    ensure!(
        ev.iter().any(|e| matches!(e, MonitorEvent::SecureHandled { intid, .. } if *intid == SECURE_TIMER_INTID)),
        "secure timer not serviced"
    );
    healthy(&host)
}

fn ti_lr_overflow(ctx: &Ctx) -> CaseResult {
    let (mut host, id) = ctx.boot(
        &PlatformConfig::default(),
        &spec(vec![vec![Instr::Compute(3_000), Instr::Mark(1), Instr::Halt]]),
    )?;
    let now = host.machine().with(|p, _| p.clock());
    let ids = [40u32, 41, 42, 43, 44, 45, 46];
    for (i, intid) in ids.iter().enumerate() {
        host.schedule_interrupt(now + 10 + i as u64, 0, *intid);
    }
    let r = run(&mut host, id, 300)?;
    ensure!(r.halted, "guest did not halt");
    let got: BTreeSet<u32> = trace_of(&r, 0)
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Virq(i) => Some(*i),
            _ => None,
        })
        .collect();
    ensure!(got == ids.into_iter().collect(), "delivered {got:?}");
    healthy(&host)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_unique_and_categories_complete() {
        let all = cases();
        let ids: BTreeSet<_> = all.iter().map(|c| c.id).collect();
        assert_eq!(ids.len(), all.len());
        let cats: BTreeSet<_> = all.iter().map(|c| c.category).collect();
        assert_eq!(cats.len(), Category::ALL.len());
    }

    #[test]
    fn filter_by_id() {
        let r = run_conformance(Some("is-unknown-command"), 1, &TmmOptions::default());
        assert_eq!(r.cases.len(), 1);
        assert!(r.all_passed(), "{:?}", r.cases);
    }

    #[test]
    fn race_cases_skip_single_threaded() {
        let r = run_conformance(Some("race"), 1, &TmmOptions::default());
        assert_eq!(r.skipped, 3);
        assert_eq!(r.failed, 0);
    }
}
