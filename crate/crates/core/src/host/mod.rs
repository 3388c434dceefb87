// SPDX-License-Identifier: Apache-2.0

//! The untrusted host: boots cVMs through the monitor, schedules their
//! execution contexts over the physical CPUs, emulates interrupts, PSCI and
//! MMIO, and serves virtio devices from the shadow pages.

pub mod virtio;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guest::{assemble, AssembleError, Instr, PsciFunction};
use crate::layout;
use crate::machine::Machine;
use crate::mem::{CvmId, GranuleIdx, GranuleState, MappingPolicy, GRANULE_SIZE};
use crate::platform::KICK_SGI;
use crate::shadow::CostLedger;
use crate::tmm::cvm::CvmParams;
use crate::tmm::tec::{NUM_LRS, EXIT_OFFSET, EXIT_WORDS};
use crate::tmm::ttt;
use crate::tmm::{ExitInfo, ExitReason, TecEntry, TecId, TmiCommand, TmiResponse, TmiStatus, TraceEvent};
pub use virtio::{BlkDevice, Device, DeviceSpec, NetDevice};
use virtio::{IoView, ShadowMap, DEVICE_INTID_BASE};

const PAGE: u64 = GRANULE_SIZE as u64;
/// Code of vCPU `i` is loaded at `i * CODE_STRIDE` unless its entry is given.
pub const CODE_STRIDE: u64 = 0x1_0000;
pub const DEFAULT_QUANTUM: u64 = 1_000;
/// Granules per staging batch when loading an image.
const STAGING_BATCH: usize = 64;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    #[default]
    Faithful,
    /// Withholds these interrupts from the guest.
    Drop(BTreeSet<u32>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostPolicy {
    #[serde(default = "default_quantum")]
    pub quantum: u64,
    #[serde(default)]
    pub injection: Injection,
}

fn default_quantum() -> u64 {
    DEFAULT_QUANTUM
}

impl Default for HostPolicy {
    fn default() -> Self {
        HostPolicy {
            quantum: DEFAULT_QUANTUM,
            injection: Injection::Faithful,
        }
    }
}

impl HostPolicy {
    fn drops(&self, intid: u32) -> bool {
        matches!(&self.injection, Injection::Drop(s) if s.contains(&intid))
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSegment {
    pub ipa: u64,
    #[serde(with = "hex_bytes")]
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VcpuSpec {
    #[serde(default)]
    pub entry: Option<u64>,
    pub program: Vec<Instr>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvmSpec {
    #[serde(default)]
    pub params: CvmParams,
    pub vcpus: Vec<VcpuSpec>,
    #[serde(default)]
    pub image: Vec<ImageSegment>,
    #[serde(default)]
    pub devices: Vec<DeviceSpec>,
    /// Size of the secure region (direct policy). Derived from the image
    /// when absent.
    #[serde(default)]
    pub granules: Option<usize>,
}

impl CvmSpec {
    pub fn single(program: Vec<Instr>) -> CvmSpec {
        CvmSpec {
            params: CvmParams::default(),
            vcpus: vec![VcpuSpec { entry: None, program }],
            image: Vec::new(),
            devices: Vec::new(),
            granules: None,
        }
    }

    pub fn entry(&self, i: usize) -> u64 {
        self.vcpus[i].entry.unwrap_or(i as u64 * CODE_STRIDE)
    }

    /// All initial image pages: assembled programs overlaid with segments.
    pub fn image_pages(&self) -> Result<BTreeMap<u64, Box<[u8; GRANULE_SIZE]>>, HostError> {
        let mut pages: BTreeMap<u64, Box<[u8; GRANULE_SIZE]>> = BTreeMap::new();
        let mut put = |ipa: u64, bytes: &[u8]| {
            for (i, b) in bytes.iter().enumerate() {
                let a = ipa + i as u64;
                pages.entry(a / PAGE).or_insert_with(|| Box::new([0; GRANULE_SIZE]))[(a % PAGE) as usize] = *b;
            }
        };
        for (i, v) in self.vcpus.iter().enumerate() {
            let code = assemble(&v.program)?;
            put(self.entry(i), &code);
        }
        for s in &self.image {
            put(s.ipa, &s.bytes);
        }
        Ok(pages)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum HostEvent {
    BootStep { cvm: CvmId, step: u8, name: &'static str },
    BootFailed { step: u8, command: &'static str, status: TmiStatus },
    Exit { seq: u64, cvm: CvmId, tec: TecId, cpu: usize, info: ExitInfo, action: String },
    Deadlock { cvm: CvmId },
    Destroyed { cvm: CvmId },
}

/// Protected pages a direct-policy region covers by default, so guests can
/// touch low memory beyond their image without sizing the region.
pub const MIN_DIRECT_PAGES: usize = 32;

pub const BOOT_STEPS: [&str; 4] = ["create_cvm", "create_tecs", "load_image", "activate"];

#[derive(Debug, Error)]
pub enum HostError {
    #[error("{command} failed with {status:?}")]
    Tmi { command: &'static str, status: TmiStatus },
    #[error("host ran out of normal-world memory")]
    HostMemory,
    #[error("invalid cVM spec: {0}")]
    Spec(String),
    #[error("unknown cVM {0}")]
    UnknownCvm(CvmId),
    #[error("device: {0}")]
    Device(#[from] std::io::Error),
    #[error(transparent)]
    Assemble(#[from] AssembleError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RunState {
    Ready,
    Waiting,
    Offline,
}

#[derive(Debug)]
struct HostTec {
    id: TecId,
    index: u8,
    cpu: usize,
    run: GranuleIdx,
    state: RunState,
    virqs: VecDeque<u32>,
    lrs: [Option<u32>; NUM_LRS],
    entry: TecEntry,
}

#[derive(Debug)]
struct HostCvm {
    params: CvmParams,
    tecs: Vec<HostTec>,
    tables: BTreeSet<(u8, u64)>,
    shadow: ShadowMap,
    devices: Vec<(Device, u32)>,
    /// Normal granules the host set aside for this cVM.
    pages: Vec<GranuleIdx>,
    delegated: Vec<GranuleIdx>,
    rr: usize,
}

/// Outcome of [`HostSim::run`].
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunReport {
    pub cvm: u32,
    pub steps: u64,
    pub exits: BTreeMap<String, u64>,
    pub irq_round_trips: u64,
    pub deadlock: bool,
    pub halted: bool,
    /// Cost of the run, excluding teardown.
    pub ledger: CostLedger,
    /// Guest traces by vCPU index, captured by the simulator (not visible
    /// to the host).
    pub traces: BTreeMap<u8, Vec<TraceEvent>>,
}

pub struct HostSim {
    machine: Machine,
    policy: HostPolicy,
    responder: BTreeMap<u64, [u64; 7]>,
    cvms: BTreeMap<CvmId, HostCvm>,
    ns_used: BTreeSet<GranuleIdx>,
    events: Vec<HostEvent>,
    seq: u64,
}

fn reason_name(r: ExitReason) -> &'static str {
    match r {
        ExitReason::Irq => "irq",
        ExitReason::HostCall => "host_call",
        ExitReason::Psci => "psci",
        ExitReason::DataAbort => "data_abort",
        ExitReason::SystemOff => "system_off",
        ExitReason::Quantum => "quantum",
        ExitReason::Wfi => "wfi",
    }
}

impl HostSim {
    pub fn new(machine: Machine, policy: HostPolicy) -> HostSim {
        HostSim {
            machine,
            policy,
            responder: BTreeMap::new(),
            cvms: BTreeMap::new(),
            ns_used: BTreeSet::new(),
            events: Vec::new(),
            seq: 0,
        }
    }

    pub fn machine(&self) -> &Machine {
        &self.machine
    }

    pub fn policy(&self) -> &HostPolicy {
        &self.policy
    }

    /// Answers for guest host calls, keyed by the first argument.
    pub fn set_responder(&mut self, table: BTreeMap<u64, [u64; 7]>) {
        self.responder = table;
    }

    pub fn events(&self) -> &[HostEvent] {
        &self.events
    }

    pub fn cvm_ids(&self) -> Vec<CvmId> {
        self.cvms.keys().copied().collect()
    }

    pub fn tec_ids(&self, cvm: CvmId) -> Vec<TecId> {
        self.cvms.get(&cvm).map_or(Vec::new(), |c| c.tecs.iter().map(|t| t.id).collect())
    }

    pub fn device(&self, cvm: CvmId, i: usize) -> Option<&Device> {
        self.cvms.get(&cvm)?.devices.get(i).map(|(d, _)| d)
    }

    pub fn device_mut(&mut self, cvm: CvmId, i: usize) -> Option<&mut Device> {
        self.cvms.get_mut(&cvm)?.devices.get_mut(i).map(|(d, _)| d)
    }

    pub fn schedule_interrupt(&self, tick: u64, cpu: usize, intid: u32) {
        self.machine.with(|p, _| p.host_schedule(tick, cpu, intid));
    }

    fn call(&self, cpu: usize, cmd: TmiCommand, args: &[u64]) -> TmiResponse {
        self.machine.call(cpu, cmd, args)
    }

    fn expect(&self, cmd: TmiCommand, args: &[u64]) -> Result<[u64; 4], HostError> {
        let r = self.call(0, cmd, args);
        if r.is_ok() {
            Ok(r.results)
        } else {
            Err(HostError::Tmi {
                command: cmd.name(),
                status: r.status,
            })
        }
    }

    /// Highest run of `count` free normal granules the host is not using.
    /// The monitor takes shadow memory from the bottom, so the host works
    /// from the top.
    fn alloc_ns(&mut self, count: usize) -> Result<GranuleIdx, HostError> {
        let used = &self.ns_used;
        let base = self.machine.with(|p, _| {
            let mem = p.mem();
            let mut run = 0usize;
            for i in (0..mem.len()).rev() {
                let g = GranuleIdx(i);
                let free = mem.granule(g).unwrap().state() == GranuleState::NsFree && !used.contains(&g);
                run = if free { run + 1 } else { 0 };
                if run == count {
                    return Some(g);
                }
            }
            None
        });
        let base = base.ok_or(HostError::HostMemory)?;
        for i in 0..count {
            self.ns_used.insert(base.offset(i));
        }
        Ok(base)
    }

    fn free_ns(&mut self, base: GranuleIdx, count: usize) {
        for i in 0..count {
            self.ns_used.remove(&base.offset(i));
        }
    }

    fn delegate_one(&mut self, id: Option<CvmId>) -> Result<GranuleIdx, HostError> {
        let g = self.alloc_ns(1)?;
        if let Err(e) = self.expect(TmiCommand::GranuleDelegate, &[g.addr()]) {
            self.free_ns(g, 1);
            return Err(e);
        }
        if let Some(c) = id.and_then(|id| self.cvms.get_mut(&id)) {
            c.delegated.push(g);
        }
        Ok(g)
    }

    /// Issues a command on behalf of `cvm`, delegating more memory when the
    /// monitor runs short under the dynamic policy.
    fn call_for(&mut self, cvm: CvmId, cpu: usize, cmd: TmiCommand, args: &[u64]) -> Result<TmiResponse, HostError> {
        loop {
            let r = self.call(cpu, cmd, args);
            let dynamic = self.machine.with(|p, _| p.mem().policy()) == MappingPolicy::Dynamic;
            if r.status == TmiStatus::ErrorMemory && dynamic {
                self.delegate_one(Some(cvm))?;
                continue;
            }
            return Ok(r);
        }
    }

    fn ensure_tables(&mut self, cvm: CvmId, ipa: u64) -> Result<(), HostError> {
        for level in 1..=ttt::LEAF_LEVEL {
            let span = ttt::entry_size(level - 1);
            let key = (level, ipa / span * span);
            if self.cvms[&cvm].tables.contains(&key) {
                continue;
            }
            let r = self.call_for(cvm, 0, TmiCommand::CreateTtt, &[u64::from(cvm.0), key.1, u64::from(level)])?;
            if !r.is_ok() {
                return Err(HostError::Tmi {
                    command: "create_ttt",
                    status: r.status,
                });
            }
            self.cvms.get_mut(&cvm).unwrap().tables.insert(key);
        }
        Ok(())
    }

    /// Creates, loads and activates a cVM. On failure anything created is
    /// destroyed again.
    pub fn boot_cvm(&mut self, spec: &CvmSpec) -> Result<CvmId, HostError> {
        if spec.vcpus.is_empty() {
            return Err(HostError::Spec("no vCPUs".into()));
        }
        let mut params = spec.params;
        params.vcpu_count = spec.vcpus.len() as u16;
        if !params.is_valid() {
            return Err(HostError::Spec("cVM parameters rejected".into()));
        }
        let pages = spec.image_pages()?;
        let io: Vec<u64> = params.io_pages().collect();
        let mapped: BTreeSet<u64> = pages.keys().copied().chain(io.iter().copied()).collect();
        let tables: BTreeSet<(u8, u64)> = mapped
            .iter()
            .flat_map(|p| (1..=3u8).map(move |l| (l, p * PAGE / ttt::entry_size(l - 1))))
            .collect();
        let objects = tables.len() + spec.vcpus.len() + 2;
        let policy = self.machine.with(|p, _| p.mem().policy());
        let devices = spec
            .devices
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let intid = match d {
                    DeviceSpec::Blk { intid, .. } | DeviceSpec::Net { intid, .. } => {
                        intid.unwrap_or(DEVICE_INTID_BASE + i as u32)
                    }
                };
                Device::new(d).map(|dev| (dev, intid))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if spec.devices.iter().flat_map(DeviceSpec::queues).any(|q| q >= params.io_queues) {
            return Err(HostError::Spec("device queue outside the I/O window".into()));
        }

        // Step 1: create the cVM.
        let params_g = self.alloc_ns(1)?;
        self.machine
            .with(|p, _| p.host_write(params_g, 0, &params.encode()))
            .map_err(|_| HostError::HostMemory)?;
        let mut delegated = Vec::new();
        let mut shadow_pa = 0;
        let mut reserved = Vec::new();
        let count = match policy {
            MappingPolicy::Direct => spec
                .granules
                .unwrap_or(mapped.last().map_or(0, |p| *p as usize + 1).max(MIN_DIRECT_PAGES) + objects + 8),
            MappingPolicy::Dynamic => {
                for _ in 0..objects.max(2) {
                    delegated.push(self.delegate_one(None)?);
                }
                if !io.is_empty() {
                    let base = self.alloc_ns(io.len())?;
                    reserved.extend((0..io.len()).map(|i| base.offset(i)));
                    shadow_pa = base.addr();
                }
                0
            }
        };
        let r = self.call(0, TmiCommand::CreateCvm, &[params_g.addr(), count as u64, shadow_pa]);
        self.free_ns(params_g, 1);
        if !r.is_ok() {
            self.events.push(HostEvent::BootFailed {
                step: 1,
                command: "create_cvm",
                status: r.status,
            });
            for g in delegated {
                let _ = self.expect(TmiCommand::GranuleUndelegate, &[g.addr()]);
                self.free_ns(g, 1);
            }
            for g in reserved {
                self.free_ns(g, 1);
            }
            return Err(HostError::Tmi {
                command: "create_cvm",
                status: r.status,
            });
        }
        let id = CvmId(r.results[0] as u32);
        let first_page = params.io_pages().start;
        let shadow = ShadowMap {
            first_page,
            pages: io.len() as u64,
            base: match policy {
                MappingPolicy::Direct => GranuleIdx((r.results[2] / PAGE + first_page) as usize),
                MappingPolicy::Dynamic => GranuleIdx((shadow_pa / PAGE) as usize),
            },
        };
        self.cvms.insert(
            id,
            HostCvm {
                params,
                tecs: Vec::new(),
                tables: BTreeSet::new(),
                shadow,
                devices,
                pages: reserved,
                delegated,
                rr: 0,
            },
        );
        self.boot_step(id, 1);
        match self.boot_rest(id, spec, &pages, &io) {
            Ok(()) => Ok(id),
            Err((step, e)) => {
                if let HostError::Tmi { command, status } = &e {
                    self.events.push(HostEvent::BootFailed {
                        step,
                        command,
                        status: *status,
                    });
                }
                self.destroy(id)?;
                Err(e)
            }
        }
    }

    fn boot_step(&mut self, cvm: CvmId, step: u8) {
        self.events.push(HostEvent::BootStep {
            cvm,
            step,
            name: BOOT_STEPS[usize::from(step) - 1],
        });
    }

    fn boot_rest(
        &mut self,
        id: CvmId,
        spec: &CvmSpec,
        pages: &BTreeMap<u64, Box<[u8; GRANULE_SIZE]>>,
        io: &[u64],
    ) -> Result<(), (u8, HostError)> {
        let cpus = self.machine.with(|p, _| p.cpus());
        // Step 2: execution contexts.
        for i in 0..spec.vcpus.len() {
            let tp = self.alloc_ns(1).map_err(|e| (2, e))?;
            let entry = spec.entry(i);
            let _ = self.machine.with(|p, _| p.host_write(tp, 0, &entry.to_le_bytes()));
            let r = self.call_for(id, 0, TmiCommand::TecCreate, &[u64::from(id.0), tp.addr()]);
            self.free_ns(tp, 1);
            let r = r.map_err(|e| (2, e))?;
            if !r.is_ok() {
                return Err((
                    2,
                    HostError::Tmi {
                        command: "tec_create",
                        status: r.status,
                    },
                ));
            }
            let run = self.alloc_ns(1).map_err(|e| (2, e))?;
            let c = self.cvms.get_mut(&id).unwrap();
            c.pages.push(run);
            let index = r.results[1] as u8;
            c.tecs.push(HostTec {
                id: TecId(r.results[0] as u32),
                index,
                cpu: usize::from(index) % cpus,
                run,
                state: if index == 0 { RunState::Ready } else { RunState::Offline },
                virqs: VecDeque::new(),
                lrs: [None; NUM_LRS],
                entry: TecEntry::default(),
            });
        }
        self.boot_step(id, 2);

        // Step 3: tables for everything, then the image in contiguous runs.
        for &p in pages.keys().chain(io) {
            self.ensure_tables(id, p * PAGE).map_err(|e| (3, e))?;
        }
        let keys: Vec<u64> = pages.keys().copied().collect();
        let mut i = 0;
        while i < keys.len() {
            let mut n = 1;
            while i + n < keys.len() && n < STAGING_BATCH && keys[i + n] == keys[i] + n as u64 {
                n += 1;
            }
            let staging = self.alloc_ns(n).map_err(|e| (3, e))?;
            for k in 0..n {
                let page = &pages[&keys[i + k]];
                let _ = self.machine.with(|p, _| p.host_write(staging.offset(k), 0, &page[..]));
            }
            let r = self.call_for(
                id,
                0,
                TmiCommand::DataBlockCreate,
                &[u64::from(id.0), keys[i] * PAGE, n as u64, staging.addr()],
            );
            self.free_ns(staging, n);
            let r = r.map_err(|e| (3, e))?;
            if !r.is_ok() {
                return Err((
                    3,
                    HostError::Tmi {
                        command: "data_block_create",
                        status: r.status,
                    },
                ));
            }
            i += n;
        }
        for &p in io.iter().filter(|p| !pages.contains_key(p)) {
            let r = self
                .call_for(id, 0, TmiCommand::DataCreateUnknown, &[u64::from(id.0), p * PAGE])
                .map_err(|e| (3, e))?;
            if !r.is_ok() {
                return Err((
                    3,
                    HostError::Tmi {
                        command: "data_create_unknown",
                        status: r.status,
                    },
                ));
            }
        }
        self.boot_step(id, 3);

        // Step 4.
        self.expect(TmiCommand::ActivateCvm, &[u64::from(id.0)]).map_err(|e| (4, e))?;
        self.boot_step(id, 4);
        Ok(())
    }

    /// Tears a cVM down and reclaims its memory.
    pub fn destroy(&mut self, id: CvmId) -> Result<(), HostError> {
        let c = self.cvms.remove(&id).ok_or(HostError::UnknownCvm(id))?;
        let r = self.call(0, TmiCommand::DestroyCvm, &[u64::from(id.0)]);
        if !r.is_ok() {
            return Err(HostError::Tmi {
                command: "destroy_cvm",
                status: r.status,
            });
        }
        for g in c.delegated {
            let _ = self.expect(TmiCommand::GranuleUndelegate, &[g.addr()]);
            self.free_ns(g, 1);
        }
        for g in c.pages {
            self.free_ns(g, 1);
        }
        self.events.push(HostEvent::Destroyed { cvm: id });
        Ok(())
    }

    /// Guest traces of a cVM's TECs. This is a simulator-side view.
    pub fn observe_traces(&self, id: CvmId) -> BTreeMap<u8, Vec<TraceEvent>> {
        self.machine.with(|_, tmm| {
            tmm.tecs()
                .filter(|t| t.cvm == id)
                .map(|t| (t.index, t.trace.clone()))
                .collect()
        })
    }

    fn eligible(&self, c: &HostCvm, t: &HostTec) -> bool {
        match t.state {
            RunState::Ready => true,
            RunState::Offline => false,
            RunState::Waiting => {
                !t.virqs.is_empty()
                    || t.lrs.iter().any(Option::is_some)
                    || self.machine.with(|p, _| p.gic().pending().any(|(cpu, _)| cpu == t.cpu))
                    || c.tecs.is_empty()
            }
        }
    }

    /// Runs a cVM until it powers off, deadlocks or `max_steps` entries
    /// have been made.
    pub fn run(&mut self, id: CvmId, max_steps: u64) -> Result<RunReport, HostError> {
        if !self.cvms.contains_key(&id) {
            return Err(HostError::UnknownCvm(id));
        }
        let start = self.machine.with(|p, _| p.ledger().clone());
        let mut report = RunReport {
            cvm: id.0,
            ..Default::default()
        };
        while report.steps < max_steps {
            let c = &self.cvms[&id];
            let n = c.tecs.len();
            let pick = (0..n).map(|k| (c.rr + k) % n).find(|&k| self.eligible(c, &c.tecs[k]));
            let Some(k) = pick else {
                let next = self.machine.with(|p, _| p.next_scheduled());
                if let Some(at) = next {
                    self.machine.with(|p, _| p.host_idle_until(at));
                    continue;
                }
                report.deadlock = true;
                self.events.push(HostEvent::Deadlock { cvm: id });
                break;
            };
            self.cvms.get_mut(&id).unwrap().rr = (k + 1) % n;
            report.steps += 1;
            let reason = self.enter(id, k, &mut report)?;
            *report.exits.entry(reason_name(reason).to_string()).or_default() += 1;
            if reason == ExitReason::SystemOff {
                report.halted = true;
                report.ledger = self.machine.with(|p, _| p.ledger().since(&start));
                report.traces = self.observe_traces(id);
                self.destroy(id)?;
                return Ok(report);
            }
        }
        report.ledger = self.machine.with(|p, _| p.ledger().since(&start));
        report.traces = self.observe_traces(id);
        Ok(report)
    }

    fn enter(&mut self, id: CvmId, k: usize, report: &mut RunReport) -> Result<ExitReason, HostError> {
        let quantum = self.policy.quantum.max(1);
        let c = self.cvms.get_mut(&id).unwrap();
        let t = &mut c.tecs[k];
        for slot in 0..NUM_LRS {
            if t.lrs[slot].is_none() && t.entry.lrs[slot].is_none() {
                t.entry.lrs[slot] = t.virqs.pop_front();
            }
        }
        t.state = RunState::Ready;
        let (tid, run, cpu) = (t.id, t.run, t.cpu);
        let entry = std::mem::take(&mut t.entry);
        let _ = self.machine.with(|p, _| p.host_write(run, 0, &entry.encode()));
        let r = self.call(cpu, TmiCommand::TecEnter, &[u64::from(tid.0), run.addr(), quantum]);
        if !r.is_ok() {
            return Err(HostError::Tmi {
                command: "tec_enter",
                status: r.status,
            });
        }
        let page = self.machine.with(|p, _| p.host_read(run)).map_err(|_| HostError::HostMemory)?;
        let off = EXIT_OFFSET;
        let info = ExitInfo::decode(&page[off..off + EXIT_WORDS * 8]).ok_or(HostError::Tmi {
            command: "tec_enter",
            status: TmiStatus::ErrorInput,
        })?;
        self.cvms.get_mut(&id).unwrap().tecs[k].lrs = info.lrs;
        let action = self.handle(id, k, &info, report)?;
        self.events.push(HostEvent::Exit {
            seq: self.seq,
            cvm: id,
            tec: tid,
            cpu,
            info,
            action,
        });
        self.seq += 1;
        Ok(info.reason)
    }

    fn round_trip(&mut self, report: &mut RunReport) {
        report.irq_round_trips += 1;
        self.machine.with(|p, _| p.ledger_mut().record_irq_round_trip());
    }

    fn handle(&mut self, id: CvmId, k: usize, info: &ExitInfo, report: &mut RunReport) -> Result<String, HostError> {
        let cpu = self.cvms[&id].tecs[k].cpu;
        Ok(match info.reason {
            ExitReason::Irq => {
                let intid = info.value as u32;
                self.machine.with(|p, _| p.host_ack(cpu, intid));
                self.round_trip(report);
                if intid == KICK_SGI {
                    "kick".into()
                } else if self.policy.drops(intid) {
                    format!("drop {intid}")
                } else {
                    self.cvms.get_mut(&id).unwrap().tecs[k].virqs.push_back(intid);
                    format!("inject {intid}")
                }
            }
            ExitReason::HostCall => {
                let res = self.responder.get(&info.args[0]).copied().unwrap_or([u64::MAX, 0, 0, 0, 0, 0, 0]);
                self.cvms.get_mut(&id).unwrap().tecs[k].entry.results = res;
                "respond".into()
            }
            ExitReason::Psci => match PsciFunction::from_code(info.psci_function) {
                Some(PsciFunction::CpuOn) => {
                    let c = &self.cvms[&id];
                    let caller = c.tecs[k].id;
                    let Some(j) = c.tecs.iter().position(|t| u64::from(t.index) == info.psci_target) else {
                        return Ok("psci: no such vCPU".into());
                    };
                    let target = c.tecs[j].id;
                    let r = self.call(cpu, TmiCommand::PsciComplete, &[u64::from(caller.0), u64::from(target.0), 0]);
                    if r.is_ok() && r.results[0] == 0 {
                        let t = &mut self.cvms.get_mut(&id).unwrap().tecs[j];
                        t.state = RunState::Ready;
                        t.lrs = [None; NUM_LRS];
                        format!("cpu_on {}", info.psci_target)
                    } else {
                        "cpu_on denied".into()
                    }
                }
                Some(PsciFunction::CpuOff) => {
                    self.cvms.get_mut(&id).unwrap().tecs[k].state = RunState::Offline;
                    "cpu_off".into()
                }
                _ => "psci ignored".into(),
            },
            ExitReason::DataAbort => self.data_abort(id, k, info, report)?,
            ExitReason::Wfi => {
                let t = &mut self.cvms.get_mut(&id).unwrap().tecs[k];
                t.state = RunState::Waiting;
                "wait".into()
            }
            ExitReason::Quantum => "resched".into(),
            ExitReason::SystemOff => "destroy".into(),
        })
    }

    fn data_abort(&mut self, id: CvmId, k: usize, info: &ExitInfo, report: &mut RunReport) -> Result<String, HostError> {
        let params = self.cvms[&id].params;
        let ipa = info.ipa;
        let page_ipa = ipa / PAGE * PAGE;
        if params.is_protected(ipa) {
            self.ensure_tables(id, page_ipa)?;
            let r = self.call_for(id, 0, TmiCommand::DataCreateUnknown, &[u64::from(id.0), page_ipa])?;
            if r.is_ok() {
                return Ok(format!("populate {page_ipa:#x}"));
            }
            self.cvms.get_mut(&id).unwrap().tecs[k].state = RunState::Offline;
            return Ok(format!("unresolved fault {ipa:#x}"));
        }
        if ipa < params.mmio_base() {
            if !params.in_ipa_space(ipa) {
                self.cvms.get_mut(&id).unwrap().tecs[k].state = RunState::Offline;
                return Ok(format!("unresolved fault {ipa:#x}"));
            }
            let g = self.alloc_ns(1)?;
            self.cvms.get_mut(&id).unwrap().pages.push(g);
            self.ensure_tables(id, page_ipa)?;
            let r = self.call_for(id, 0, TmiCommand::MapUnprotected, &[u64::from(id.0), page_ipa, g.addr()])?;
            if !r.is_ok() {
                self.cvms.get_mut(&id).unwrap().tecs[k].state = RunState::Offline;
                return Ok(format!("unresolved fault {ipa:#x}"));
            }
            return Ok(format!("share {page_ipa:#x}"));
        }
        self.cvms.get_mut(&id).unwrap().tecs[k].entry.emulated_mmio = true;
        if info.is_write && ipa == layout::sgir_ipa(&params) {
            self.round_trip(report);
            let (target, intid) = layout::decode_sgi(info.value);
            let intid = u32::from(intid);
            if self.policy.drops(intid) {
                return Ok(format!("drop sgi {intid}"));
            }
            let c = self.cvms.get_mut(&id).unwrap();
            let Some(j) = c.tecs.iter().position(|t| t.index == target) else {
                return Ok("sgi: no such vCPU".into());
            };
            let t = &mut c.tecs[j];
            t.virqs.push_back(intid);
            if t.state == RunState::Ready && j != k {
                let cpu = t.cpu;
                self.machine.with(|p, _| p.host_raise(cpu, KICK_SGI));
                return Ok(format!("sgi {intid} -> {target}, kick"));
            }
            return Ok(format!("sgi {intid} -> {target}"));
        }
        if info.is_write {
            if let Some(q) = layout::doorbell_queue(&params, ipa) {
                let c = self.cvms.get_mut(&id).unwrap();
                let shadow = c.shadow;
                let boot_cpu = c.tecs.first().map_or(0, |t| t.cpu);
                let mut raise = Vec::new();
                self.machine.with(|p, _| {
                    let mut io = IoView { plat: p, map: shadow };
                    for (dev, intid) in c.devices.iter_mut().filter(|(d, _)| d.handles(q)) {
                        if dev.serve(&mut io, &params) {
                            raise.push(*intid);
                        }
                    }
                });
                for intid in &raise {
                    self.machine.with(|p, _| p.host_raise(boot_cpu, *intid));
                }
                return Ok(format!("doorbell {q}"));
            }
        }
        Ok(format!("mmio {ipa:#x}"))
    }
}
