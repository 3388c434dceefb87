// SPDX-License-Identifier: Apache-2.0

//! The management monitor: cVM lifecycle, translation tables, execution
//! contexts, measurement and the host command interface.

pub mod cvm;
mod exec;
mod io;
pub mod measurement;
pub mod tec;
pub mod ttt;

use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::attestation::{self, AttestationToken, KeyHierarchy, SealError, SealPolicy, SealedBlob, TokenClaims};
use crate::mem::{CvmId, GranuleIdx, GranuleState, MappingPolicy, MemError, Requestor, GRANULE_SIZE};
use crate::platform::{Platform, PlatformConfig};
use crate::shadow::{CostModel, PageProtection, ShadowSync};
use cvm::{CvmDescriptor, CvmParams, CvmState, ShadowPlacement, PLATFORM_FEATURES};
use io::IoState;
use measurement::{sha256, EventKind, MeasureEvent, MeasurementState};
pub use tec::{ExitInfo, ExitReason, Tec, TecEntry, TecId, TraceEvent};
use ttt::{Attrs, Entry};

pub const TMI_BASE: u64 = 0xC400_0150;
/// Delegation extension, only meaningful under the dynamic policy.
pub const TMI_GRANULE_DELEGATE: u64 = 0xC400_0180;
pub const TMI_GRANULE_UNDELEGATE: u64 = 0xC400_0181;
pub const PLATFORM_INFO: &[u8] = b"tmm-sim platform 1.0";
/// Largest page count accepted by the block commands.
pub const MAX_BLOCK_PAGES: u64 = 4096;

/// The host command set. Discriminants are offsets from [`TMI_BASE`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TmiCommand {
    DataCreate = 0,
    DataCreateUnknown,
    DataDestroy,
    DataBlockCreate,
    DataBlockCreateUnknown,
    DataBlockDestroy,
    ActivateCvm,
    CreateCvm,
    DestroyCvm,
    TecCreate,
    TecDestroy,
    TecEnter,
    CreateTtt,
    DestroyTtt,
    MapUnprotected,
    MapProtected,
    UnmapUnprotected,
    UnmapProtected,
    PsciComplete,
    GranuleDelegate = 0x30,
    GranuleUndelegate = 0x31,
}

impl TmiCommand {
    /// The standard command set (without the delegation extension).
    pub const STANDARD: [TmiCommand; 19] = [
        TmiCommand::DataCreate,
        TmiCommand::DataCreateUnknown,
        TmiCommand::DataDestroy,
        TmiCommand::DataBlockCreate,
        TmiCommand::DataBlockCreateUnknown,
        TmiCommand::DataBlockDestroy,
        TmiCommand::ActivateCvm,
        TmiCommand::CreateCvm,
        TmiCommand::DestroyCvm,
        TmiCommand::TecCreate,
        TmiCommand::TecDestroy,
        TmiCommand::TecEnter,
        TmiCommand::CreateTtt,
        TmiCommand::DestroyTtt,
        TmiCommand::MapUnprotected,
        TmiCommand::MapProtected,
        TmiCommand::UnmapUnprotected,
        TmiCommand::UnmapProtected,
        TmiCommand::PsciComplete,
    ];

    pub fn id(self) -> u64 {
        TMI_BASE + self as u64
    }

    pub fn from_id(id: u64) -> Option<TmiCommand> {
        Self::STANDARD
            .into_iter()
            .chain([TmiCommand::GranuleDelegate, TmiCommand::GranuleUndelegate])
            .find(|c| c.id() == id)
    }

    pub fn name(self) -> &'static str {
        use TmiCommand::*;
        match self {
            DataCreate => "data_create",
            DataCreateUnknown => "data_create_unknown",
            DataDestroy => "data_destroy",
            DataBlockCreate => "data_block_create",
            DataBlockCreateUnknown => "data_block_create_unknown",
            DataBlockDestroy => "data_block_destroy",
            ActivateCvm => "activate_cvm",
            CreateCvm => "create_cvm",
            DestroyCvm => "destroy_cvm",
            TecCreate => "tec_create",
            TecDestroy => "tec_destroy",
            TecEnter => "tec_enter",
            CreateTtt => "create_ttt",
            DestroyTtt => "destroy_ttt",
            MapUnprotected => "map_unprotected",
            MapProtected => "map_protected",
            UnmapUnprotected => "unmap_unprotected",
            UnmapProtected => "unmap_protected",
            PsciComplete => "psci_complete",
            GranuleDelegate => "granule_delegate",
            GranuleUndelegate => "granule_undelegate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TmiStatus {
    #[serde(rename = "TMI_SUCCESS")]
    Success = 0,
    #[serde(rename = "TMI_ERROR_INPUT")]
    ErrorInput = 1,
    #[serde(rename = "TMI_ERROR_STATE")]
    ErrorState = 2,
    #[serde(rename = "TMI_ERROR_MEMORY")]
    ErrorMemory = 3,
    #[serde(rename = "TMI_ERROR_POLICY")]
    ErrorPolicy = 4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TmiRequest {
    pub command: u64,
    pub args: [u64; 7],
}

impl TmiRequest {
    pub fn new(command: TmiCommand, args: &[u64]) -> TmiRequest {
        Self::raw(command.id(), args)
    }

    pub fn raw(command: u64, args: &[u64]) -> TmiRequest {
        let mut a = [0u64; 7];
        a[..args.len()].copy_from_slice(args);
        TmiRequest { command, args: a }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TmiResponse {
    pub status: TmiStatus,
    pub results: [u64; 4],
}

impl TmiResponse {
    pub fn is_ok(&self) -> bool {
        self.status == TmiStatus::Success
    }
}

/// A failed command: status plus an optional detail word in `results[0]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Fail {
    status: TmiStatus,
    detail: u64,
}

impl From<TmiStatus> for Fail {
    fn from(status: TmiStatus) -> Fail {
        Fail { status, detail: 0 }
    }
}

impl From<MemError> for Fail {
    fn from(e: MemError) -> Fail {
        match e {
            MemError::OutOfSecureMemory(_) | MemError::OutOfShadowMemory(_) => TmiStatus::ErrorMemory,
            MemError::PolicyMismatch(_) => TmiStatus::ErrorPolicy,
            MemError::WrongState { .. } => TmiStatus::ErrorState,
            _ => TmiStatus::ErrorInput,
        }
        .into()
    }
}

type TmiResult = Result<[u64; 4], Fail>;

const INPUT: Fail = Fail {
    status: TmiStatus::ErrorInput,
    detail: 0,
};
const STATE: Fail = Fail {
    status: TmiStatus::ErrorState,
    detail: 0,
};
const MEMORY: Fail = Fail {
    status: TmiStatus::ErrorMemory,
    detail: 0,
};

fn walk_fail(level: u8) -> Fail {
    Fail {
        status: TmiStatus::ErrorInput,
        detail: u64::from(level),
    }
}

/// Monitor-internal events, in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MonitorEvent {
    StateChange { cvm: CvmId, from: CvmState, to: CvmState },
    /// A physical interrupt arrived while a guest ran and was taken to the
    /// monitor as FIQ.
    FiqTaken { cpu: usize, intid: u32 },
    /// A secure interrupt serviced inside the monitor.
    SecureHandled { cpu: usize, intid: u32 },
    LrWritten { tec: TecId, slot: usize, intid: u32 },
    VirqHandled { tec: TecId, intid: u32 },
    Sync { cvm: CvmId, to_shadow: bool, pages: usize },
    IntegrityFailure { cvm: CvmId, page: u64 },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Coverage {
    pub tmi: BTreeMap<String, u64>,
    pub tsi: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TmmOptions {
    /// Fault injection: leave cVM memory unscrubbed on destroy.
    #[serde(default)]
    pub skip_zero_on_destroy: bool,
    /// Latency model used for transfer accounting.
    #[serde(skip, default = "CostModel::reference")]
    pub cost: CostModel,
}

impl Default for TmmOptions {
    fn default() -> Self {
        TmmOptions {
            skip_zero_on_destroy: false,
            cost: CostModel::reference(),
        }
    }
}

impl TmmOptions {
    pub fn with_cost(cost: CostModel) -> Self {
        TmmOptions {
            cost,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown cVM")]
    UnknownCvm,
    #[error("cVM is not active")]
    NotActive,
    #[error(transparent)]
    Seal(#[from] SealError),
}

#[derive(Clone)]
pub struct Tmm {
    cvms: BTreeMap<CvmId, CvmDescriptor>,
    tecs: BTreeMap<TecId, Tec>,
    /// Data granules that were unmapped but not destroyed.
    unmapped: BTreeMap<CvmId, BTreeSet<GranuleIdx>>,
    io: BTreeMap<CvmId, IoState>,
    protection: BTreeMap<CvmId, PageProtection>,
    next_cvm: u32,
    next_tec: u32,
    keys: KeyHierarchy,
    sync: ShadowSync,
    rng: ChaCha20Rng,
    events: Vec<MonitorEvent>,
    coverage: Coverage,
    options: TmmOptions,
}

impl std::fmt::Debug for Tmm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tmm")
            .field("cvms", &self.cvms.keys().collect::<Vec<_>>())
            .field("tecs", &self.tecs.keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl Tmm {
    pub fn boot(cfg: &PlatformConfig, options: TmmOptions) -> Tmm {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let mut nonce = [0u8; 32];
        rng.fill_bytes(&mut nonce);
        Tmm {
            cvms: BTreeMap::new(),
            tecs: BTreeMap::new(),
            unmapped: BTreeMap::new(),
            io: BTreeMap::new(),
            protection: BTreeMap::new(),
            next_cvm: 1,
            next_tec: 1,
            keys: attestation::derive_keys(&cfg.rot_seed, &cfg.firmware, &nonce),
            sync: ShadowSync::default(),
            rng,
            events: Vec::new(),
            coverage: Coverage::default(),
            options,
        }
    }

    pub fn keys(&self) -> &KeyHierarchy {
        &self.keys
    }

    pub fn cost(&self) -> &CostModel {
        &self.options.cost
    }

    pub fn cvm(&self, id: CvmId) -> Option<&CvmDescriptor> {
        self.cvms.get(&id)
    }

    pub fn cvms(&self) -> impl Iterator<Item = &CvmDescriptor> {
        self.cvms.values()
    }

    pub fn cvm_state(&self, id: CvmId) -> CvmState {
        self.cvms.get(&id).map_or(CvmState::Null, |c| c.state)
    }

    pub fn tec(&self, id: TecId) -> Option<&Tec> {
        self.tecs.get(&id)
    }

    pub fn tecs(&self) -> impl Iterator<Item = &Tec> {
        self.tecs.values()
    }

    pub fn events(&self) -> &[MonitorEvent] {
        &self.events
    }

    pub fn coverage(&self) -> &Coverage {
        &self.coverage
    }

    pub fn protection(&self, cvm: CvmId) -> Option<&PageProtection> {
        self.protection.get(&cvm)
    }

    pub(crate) fn fingerprint(&self, h: &mut impl Hasher) {
        self.cvms.hash(h);
        self.tecs.hash(h);
        self.unmapped.hash(h);
        self.io.hash(h);
        for (id, p) in &self.protection {
            (id, p.pages()).hash(h);
        }
        (self.next_cvm, self.next_tec, self.sync.in_flight()).hash(h);
    }

    /// Executes one command. Every request yields exactly one response.
    pub fn dispatch(&mut self, plat: &mut Platform, cpu: usize, req: &TmiRequest) -> TmiResponse {
        plat.ledger.record_tmi();
        let Some(cmd) = TmiCommand::from_id(req.command) else {
            return TmiResponse {
                status: TmiStatus::ErrorInput,
                results: [0; 4],
            };
        };
        *self.coverage.tmi.entry(cmd.name().to_string()).or_default() += 1;
        let a = req.args;
        let r = match cmd {
            TmiCommand::CreateCvm => self.create_cvm(plat, a[0], a[1], a[2]),
            TmiCommand::DataCreate => self.data_create(plat, cvm_arg(a[0]), a[1], Some(a[2]), true),
            TmiCommand::DataCreateUnknown => self.data_create(plat, cvm_arg(a[0]), a[1], None, false),
            TmiCommand::DataDestroy => self.data_destroy(plat, cvm_arg(a[0]), a[1]),
            TmiCommand::DataBlockCreate => {
                self.block_create(plat, cvm_arg(a[0]), a[1], a[2], Some(a[3]), true)
            }
            TmiCommand::DataBlockCreateUnknown => {
                self.block_create(plat, cvm_arg(a[0]), a[1], a[2], None, false)
            }
            TmiCommand::DataBlockDestroy => self.block_destroy(plat, cvm_arg(a[0]), a[1], a[2]),
            TmiCommand::ActivateCvm => self.activate(cvm_arg(a[0])),
            TmiCommand::DestroyCvm => self.destroy_cvm(plat, cvm_arg(a[0])),
            TmiCommand::TecCreate => self.tec_create(plat, cvm_arg(a[0]), a[1]),
            TmiCommand::TecDestroy => self.tec_destroy(plat, tec_arg(a[0])),
            TmiCommand::TecEnter => self.tec_enter(plat, cpu, tec_arg(a[0]), a[1], a[2]),
            TmiCommand::CreateTtt => self.create_ttt(plat, cvm_arg(a[0]), a[1], a[2]),
            TmiCommand::DestroyTtt => self.destroy_ttt(plat, cvm_arg(a[0]), a[1], a[2]),
            TmiCommand::MapUnprotected => self.map_unprotected(plat, cvm_arg(a[0]), a[1], a[2]),
            TmiCommand::MapProtected => self.map_protected(plat, cvm_arg(a[0]), a[1], a[2]),
            TmiCommand::UnmapUnprotected => self.unmap(plat, cvm_arg(a[0]), a[1], true),
            TmiCommand::UnmapProtected => self.unmap(plat, cvm_arg(a[0]), a[1], false),
            TmiCommand::PsciComplete => self.psci_complete(tec_arg(a[0]), tec_arg(a[1]), a[2]),
            TmiCommand::GranuleDelegate => self.delegate(plat, a[0], true),
            TmiCommand::GranuleUndelegate => self.delegate(plat, a[0], false),
        };
        match r {
            Ok(results) => TmiResponse {
                status: TmiStatus::Success,
                results,
            },
            Err(f) => TmiResponse {
                status: f.status,
                results: [f.detail, 0, 0, 0],
            },
        }
    }

    fn set_state(&mut self, id: CvmId, to: CvmState) {
        let c = self.cvms.get_mut(&id).expect("known cVM");
        let from = c.state;
        debug_assert!(CvmState::is_permitted(from, to));
        c.state = to;
        self.events.push(MonitorEvent::StateChange { cvm: id, from, to });
    }

    fn lookup(&self, id: CvmId) -> Result<&CvmDescriptor, Fail> {
        self.cvms.get(&id).ok_or(INPUT)
    }

    // ---- lifecycle ----------------------------------------------------

    fn create_cvm(&mut self, plat: &mut Platform, params_pa: u64, count: u64, shadow_pa: u64) -> TmiResult {
        let src = ns_granule(plat, params_pa)?;
        let bytes = plat.mem.read(Requestor::Tmm, src).map_err(|_| INPUT)?;
        let params = CvmParams::decode(bytes).ok_or(INPUT)?;
        let encoding = params.encode();
        let id = CvmId(self.next_cvm);
        let shadow = match plat.mem.policy() {
            MappingPolicy::Direct => {
                if shadow_pa != 0 || count < 2 || count > plat.mem.len() as u64 {
                    return Err(INPUT);
                }
                ShadowPlacement::Region(plat.mem.reserve_secure_region(id, count as usize)?)
            }
            MappingPolicy::Dynamic => {
                if plat.mem.delegated_free() < 2 {
                    return Err(MEMORY);
                }
                let pages = params.io_window_pages as usize;
                let base = if pages == 0 {
                    if shadow_pa != 0 {
                        return Err(INPUT);
                    }
                    GranuleIdx(0)
                } else {
                    let base = pa_granule(plat, shadow_pa)?;
                    if base.0 + pages > plat.mem.len() {
                        return Err(INPUT);
                    }
                    plat.mem.claim_shadow(base, pages).map_err(|_| INPUT)?;
                    base
                };
                ShadowPlacement::Window { base, count: pages }
            }
        };
        self.next_cvm += 1;
        let params_granule = alloc(plat, id, GranuleState::Params)?;
        plat.mem
            .write(Requestor::Tmm, params_granule, 0, &encoding)
            .expect("monitor access");
        let ttt_root = alloc(plat, id, GranuleState::Ttt)?;
        let (region_base, shadow_base) = match shadow {
            ShadowPlacement::Region(r) => (r.base.addr(), r.shadow_base().addr()),
            ShadowPlacement::Window { base, count } => (0, if count == 0 { 0 } else { base.addr() }),
        };
        self.cvms.insert(
            id,
            CvmDescriptor {
                id,
                state: CvmState::Null,
                params,
                shadow,
                params_granule,
                ttt_root,
                measurement: MeasurementState::new(&encoding),
                initial_measurement: None,
                rem: [[0; 32]; 4],
                tecs: Vec::new(),
            },
        );
        self.io.insert(id, IoState::new(params.io_queues));
        self.set_state(id, CvmState::New);
        Ok([u64::from(id.0), region_base, shadow_base, 0])
    }

    fn activate(&mut self, id: CvmId) -> TmiResult {
        let c = self.lookup(id)?;
        if c.state != CvmState::New || c.tecs.is_empty() {
            return Err(STATE);
        }
        let c = self.cvms.get_mut(&id).unwrap();
        c.measurement.seal();
        c.initial_measurement = Some(*c.measurement.current());
        self.set_state(id, CvmState::Active);
        Ok([0; 4])
    }

    fn destroy_cvm(&mut self, plat: &mut Platform, id: CvmId) -> TmiResult {
        let state = self.lookup(id)?.state;
        if state != CvmState::SystemOff {
            self.set_state(id, CvmState::SystemOff);
        }
        let scrub = !self.options.skip_zero_on_destroy;
        let c = self.cvms.remove(&id).expect("known cVM");
        for tec in &c.tecs {
            self.tecs.remove(tec);
        }
        match c.shadow {
            ShadowPlacement::Region(_) => {
                plat.mem.release_region_inner(id, scrub)?;
            }
            ShadowPlacement::Window { base, count } => {
                let owned: Vec<GranuleIdx> = plat
                    .mem
                    .iter()
                    .filter(|(_, g)| g.owner() == Some(id))
                    .map(|(i, _)| i)
                    .collect();
                for g in owned {
                    plat.mem.unassign(g, scrub);
                }
                plat.mem.unclaim_shadow(base, count);
            }
        }
        plat.ledger.record_tlb_flush();
        self.unmapped.remove(&id);
        self.io.remove(&id);
        self.protection.remove(&id);
        plat.sidecar.remove_cvm(id.0);
        self.events.push(MonitorEvent::StateChange {
            cvm: id,
            from: CvmState::SystemOff,
            to: CvmState::Null,
        });
        Ok([0; 4])
    }

    // ---- execution contexts -------------------------------------------

    fn tec_create(&mut self, plat: &mut Platform, id: CvmId, params_pa: u64) -> TmiResult {
        let c = self.lookup(id)?;
        if c.state != CvmState::New {
            return Err(STATE);
        }
        let src = ns_granule(plat, params_pa)?;
        let used: BTreeSet<u8> = c.tecs.iter().map(|t| self.tecs[t].index).collect();
        let index = (0..c.params.vcpu_count as u8)
            .find(|i| !used.contains(i))
            .ok_or(INPUT)?;
        let tec_params: [u8; 8] = plat.mem.granule(src).unwrap().contents()[..8].try_into().unwrap();
        let entry = u64::from_le_bytes(tec_params);
        let granule = alloc(plat, id, GranuleState::Tec)?;
        let tid = TecId(self.next_tec);
        self.next_tec += 1;
        let c = self.cvms.get_mut(&id).unwrap();
        c.measurement
            .extend(MeasureEvent {
                kind: EventKind::Tec,
                ipa: u64::from(index),
                digest: sha256(&tec_params),
            })
            .expect("unsealed in NEW");
        c.tecs.push(tid);
        self.tecs.insert(tid, Tec::new(tid, id, index, granule, entry));
        Ok([u64::from(tid.0), u64::from(index), 0, 0])
    }

    fn tec_destroy(&mut self, plat: &mut Platform, tid: TecId) -> TmiResult {
        let tec = self.tecs.get(&tid).ok_or(INPUT)?;
        let cvm = tec.cvm;
        if self.cvm_state(cvm) == CvmState::Active {
            return Err(STATE);
        }
        let tec = self.tecs.remove(&tid).unwrap();
        self.cvms.get_mut(&cvm).unwrap().tecs.retain(|t| *t != tid);
        plat.mem.unassign(tec.granule, true);
        Ok([0; 4])
    }

    fn psci_complete(&mut self, caller: TecId, target: TecId, outcome: u64) -> TmiResult {
        let c = self.tecs.get(&caller).ok_or(INPUT)?;
        let t = self.tecs.get(&target).ok_or(INPUT)?;
        let rec = c.pending_psci.ok_or(INPUT)?;
        if t.cvm != c.cvm || t.index != rec.target || target == caller {
            return Err(INPUT);
        }
        let accept = outcome == 0 && !t.runnable;
        let status = if accept { 0 } else { PSCI_DENIED };
        if accept {
            let t = self.tecs.get_mut(&target).unwrap();
            t.runnable = true;
            t.pc = rec.entry;
            t.gprs = [0; 31];
            t.compute_left = 0;
            t.wfi = false;
        }
        let c = self.tecs.get_mut(&caller).unwrap();
        c.pending_psci = None;
        c.gprs[0] = status;
        c.trace.push(TraceEvent::PsciDone {
            function: rec.function,
            status,
        });
        Ok([status, 0, 0, 0])
    }

    // ---- data granules --------------------------------------------------

    /// Checks that `ipa` can receive a new protected page and returns the
    /// level-3 table and the target granule.
    fn check_new_page(&self, plat: &Platform, c: &CvmDescriptor, ipa: u64) -> Result<(GranuleIdx, GranuleIdx), Fail> {
        if ipa % GRANULE_SIZE as u64 != 0 || !c.params.is_protected(ipa) {
            return Err(INPUT);
        }
        let table = ttt::table_at(&plat.mem, c.ttt_root, ipa, ttt::LEAF_LEVEL).map_err(walk_fail)?;
        if ttt::read_entry(&plat.mem, table, ttt::LEAF_LEVEL, ttt::index(ipa, ttt::LEAF_LEVEL)) != Entry::Invalid {
            return Err(INPUT);
        }
        let target = match c.shadow {
            ShadowPlacement::Region(_) => {
                let g = c.direct_target(ipa).ok_or(INPUT)?;
                if plat.mem.granule(g).unwrap().state() != GranuleState::SecureFree {
                    return Err(MEMORY);
                }
                g
            }
            ShadowPlacement::Window { .. } => plat.mem.find_free_for(c.id).ok_or(MEMORY)?,
        };
        Ok((table, target))
    }

    fn data_create(
        &mut self,
        plat: &mut Platform,
        id: CvmId,
        ipa: u64,
        src_pa: Option<u64>,
        measured: bool,
    ) -> TmiResult {
        let c = self.lookup(id)?;
        let allowed = match measured {
            true => c.state == CvmState::New,
            false => matches!(c.state, CvmState::New | CvmState::Active),
        };
        if !allowed {
            return Err(STATE);
        }
        let src = src_pa.map(|pa| ns_granule(plat, pa)).transpose()?;
        let (table, target) = self.check_new_page(plat, c, ipa)?;
        self.install_page(plat, id, ipa, table, target, src, measured);
        Ok([target.addr(), 0, 0, 0])
    }

    fn install_page(
        &mut self,
        plat: &mut Platform,
        id: CvmId,
        ipa: u64,
        table: GranuleIdx,
        target: GranuleIdx,
        src: Option<GranuleIdx>,
        measured: bool,
    ) {
        plat.mem.assign(target, id, GranuleState::Data).expect("checked target");
        if let Some(src) = src {
            let page = *plat.mem.read(Requestor::Tmm, src).expect("monitor access");
            plat.mem.write(Requestor::Tmm, target, 0, &page).expect("monitor access");
        }
        ttt::write_entry(
            &mut plat.mem,
            table,
            ttt::index(ipa, ttt::LEAF_LEVEL),
            Entry::Page {
                target,
                attrs: Attrs::PROTECTED,
            },
        );
        if measured {
            let digest = sha256(plat.mem.granule(target).unwrap().contents());
            self.cvms
                .get_mut(&id)
                .unwrap()
                .measurement
                .extend(MeasureEvent {
                    kind: EventKind::Data,
                    ipa,
                    digest,
                })
                .expect("unsealed in NEW");
        }
    }

    fn block_create(
        &mut self,
        plat: &mut Platform,
        id: CvmId,
        start: u64,
        count: u64,
        src_pa: Option<u64>,
        measured: bool,
    ) -> TmiResult {
        const PAGE: u64 = GRANULE_SIZE as u64;
        const BLOCK_PAGES: u64 = 512;
        let c = self.lookup(id)?;
        let allowed = match measured {
            true => c.state == CvmState::New,
            false => matches!(c.state, CvmState::New | CvmState::Active),
        };
        if !allowed {
            return Err(STATE);
        }
        if count == 0 || count > MAX_BLOCK_PAGES || start % PAGE != 0 {
            return Err(INPUT);
        }
        let end = start.checked_add(count * PAGE).ok_or(INPUT)?;
        if !c.params.is_protected(end - PAGE) {
            return Err(INPUT);
        }
        let srcs: Vec<Option<GranuleIdx>> = (0..count)
            .map(|i| src_pa.map(|pa| ns_granule(plat, pa + i * PAGE)).transpose())
            .collect::<Result<_, _>>()?;

        // Block entries: direct policy, 2 MiB aligned on both sides, and each
        // level-2 slot free with no level-3 table beneath it.
        let block_size = ttt::entry_size(2);
        let use_blocks = matches!(c.shadow, ShadowPlacement::Region(_))
            && start % block_size == 0
            && count % BLOCK_PAGES == 0
            && (0..count / BLOCK_PAGES).all(|b| {
                let ipa = start + b * block_size;
                let Some(target) = c.direct_target(ipa) else { return false };
                let targets_free = c.direct_target(ipa + block_size - PAGE).is_some()
                    && (0..BLOCK_PAGES).all(|p| {
                        plat.mem.granule(target.offset(p as usize)).unwrap().state()
                            == GranuleState::SecureFree
                    });
                target.0 % BLOCK_PAGES as usize == 0
                    && targets_free
                    && ttt::table_at(&plat.mem, c.ttt_root, ipa, 2).is_ok_and(|t| {
                        ttt::read_entry(&plat.mem, t, 2, ttt::index(ipa, 2)) == Entry::Invalid
                    })
            });

        let root = c.ttt_root;
        if use_blocks {
            for b in 0..count / BLOCK_PAGES {
                let ipa = start + b * block_size;
                let table = ttt::table_at(&plat.mem, root, ipa, 2).unwrap();
                let base = self.cvms[&id].direct_target(ipa).unwrap();
                for p in 0..BLOCK_PAGES {
                    let target = base.offset(p as usize);
                    plat.mem.assign(target, id, GranuleState::Data).expect("checked target");
                    let i = (b * BLOCK_PAGES + p) as usize;
                    self.fill_and_measure(plat, id, start + i as u64 * PAGE, target, srcs[i], measured);
                }
                ttt::write_entry(
                    &mut plat.mem,
                    table,
                    ttt::index(ipa, 2),
                    Entry::Block {
                        target: base,
                        attrs: Attrs::PROTECTED,
                    },
                );
            }
            return Ok([count, 0, 0, 0]);
        }

        let mut plan = Vec::with_capacity(count as usize);
        let mut dynamic_needed = 0usize;
        for i in 0..count {
            let ipa = start + i * PAGE;
            match c.shadow {
                ShadowPlacement::Region(_) => {
                    let (table, target) = self.check_new_page(plat, c, ipa)?;
                    plan.push((ipa, table, Some(target)));
                }
                ShadowPlacement::Window { .. } => {
                    let table = ttt::table_at(&plat.mem, c.ttt_root, ipa, ttt::LEAF_LEVEL).map_err(walk_fail)?;
                    if ttt::read_entry(&plat.mem, table, ttt::LEAF_LEVEL, ttt::index(ipa, ttt::LEAF_LEVEL)) != Entry::Invalid {
                        return Err(INPUT);
                    }
                    dynamic_needed += 1;
                    plan.push((ipa, table, None));
                }
            }
        }
        if dynamic_needed > plat.mem.delegated_free() {
            return Err(MEMORY);
        }
        for (i, (ipa, table, target)) in plan.into_iter().enumerate() {
            let target = target.unwrap_or_else(|| plat.mem.find_free_for(id).expect("checked pool"));
            self.install_page(plat, id, ipa, table, target, srcs[i], measured);
        }
        Ok([count, 0, 0, 0])
    }

    fn fill_and_measure(
        &mut self,
        plat: &mut Platform,
        id: CvmId,
        ipa: u64,
        target: GranuleIdx,
        src: Option<GranuleIdx>,
        measured: bool,
    ) {
        if let Some(src) = src {
            let page = *plat.mem.read(Requestor::Tmm, src).expect("monitor access");
            plat.mem.write(Requestor::Tmm, target, 0, &page).expect("monitor access");
        }
        if measured {
            let digest = sha256(plat.mem.granule(target).unwrap().contents());
            self.cvms
                .get_mut(&id)
                .unwrap()
                .measurement
                .extend(MeasureEvent {
                    kind: EventKind::Data,
                    ipa,
                    digest,
                })
                .expect("unsealed in NEW");
        }
    }

    fn data_destroy(&mut self, plat: &mut Platform, id: CvmId, ipa: u64) -> TmiResult {
        let c = self.lookup(id)?;
        if ipa % GRANULE_SIZE as u64 != 0 || !c.params.is_protected(ipa) {
            return Err(INPUT);
        }
        let w = ttt::walk(&plat.mem, c.ttt_root, ipa);
        let target = match w.entry {
            Entry::Page { target, attrs } if !attrs.ns => target,
            _ => return Err(walk_fail(w.level)),
        };
        ttt::write_entry(&mut plat.mem, w.table, w.index, Entry::Invalid);
        plat.mem.unassign(target, true);
        plat.ledger.record_tlb_flush();
        Ok([target.addr(), 0, 0, 0])
    }

    fn block_destroy(&mut self, plat: &mut Platform, id: CvmId, start: u64, count: u64) -> TmiResult {
        const PAGE: u64 = GRANULE_SIZE as u64;
        let c = self.lookup(id)?;
        if count == 0 || count > MAX_BLOCK_PAGES || start % PAGE != 0 {
            return Err(INPUT);
        }
        let end = start.checked_add(count * PAGE).ok_or(INPUT)?;
        if !c.params.is_protected(end - PAGE) {
            return Err(INPUT);
        }
        // Collect the leaves covering the range; blocks must lie entirely inside.
        let mut leaves = Vec::new();
        let mut ipa = start;
        while ipa < end {
            let w = ttt::walk(&plat.mem, c.ttt_root, ipa);
            match w.entry {
                Entry::Page { target, attrs } if !attrs.ns => {
                    leaves.push((w, vec![target]));
                    ipa += PAGE;
                }
                Entry::Block { target, attrs } if !attrs.ns => {
                    let size = ttt::entry_size(w.level);
                    if ipa % size != 0 || ipa + size > end {
                        return Err(INPUT);
                    }
                    let pages = (size / PAGE) as usize;
                    leaves.push((w, (0..pages).map(|p| target.offset(p)).collect()));
                    ipa += size;
                }
                _ => return Err(walk_fail(w.level)),
            }
        }
        for (w, targets) in leaves {
            ttt::write_entry(&mut plat.mem, w.table, w.index, Entry::Invalid);
            for t in targets {
                plat.mem.unassign(t, true);
            }
        }
        plat.ledger.record_tlb_flush();
        Ok([count, 0, 0, 0])
    }

    // ---- translation tables --------------------------------------------

    fn table_args(&self, id: CvmId, ipa: u64, level: u64) -> Result<(&CvmDescriptor, u8), Fail> {
        let c = self.lookup(id)?;
        if !(1..=3).contains(&level) {
            return Err(INPUT);
        }
        let level = level as u8;
        if ipa % ttt::entry_size(level - 1) != 0 || !c.params.in_ipa_space(ipa) {
            return Err(INPUT);
        }
        if !matches!(c.state, CvmState::New | CvmState::Active) {
            return Err(STATE);
        }
        Ok((c, level))
    }

    fn create_ttt(&mut self, plat: &mut Platform, id: CvmId, ipa: u64, level: u64) -> TmiResult {
        let (c, level) = self.table_args(id, ipa, level)?;
        let parent = ttt::table_at(&plat.mem, c.ttt_root, ipa, level - 1).map_err(walk_fail)?;
        let idx = ttt::index(ipa, level - 1);
        if ttt::read_entry(&plat.mem, parent, level - 1, idx) != Entry::Invalid {
            return Err(INPUT);
        }
        let g = alloc(plat, id, GranuleState::Ttt)?;
        ttt::write_entry(&mut plat.mem, parent, idx, Entry::Table(g));
        Ok([g.addr(), 0, 0, 0])
    }

    fn destroy_ttt(&mut self, plat: &mut Platform, id: CvmId, ipa: u64, level: u64) -> TmiResult {
        let (c, level) = self.table_args(id, ipa, level)?;
        let parent = ttt::table_at(&plat.mem, c.ttt_root, ipa, level - 1).map_err(walk_fail)?;
        let idx = ttt::index(ipa, level - 1);
        let Entry::Table(g) = ttt::read_entry(&plat.mem, parent, level - 1, idx) else {
            return Err(walk_fail(level - 1));
        };
        if !ttt::is_empty(&plat.mem, g) {
            return Err(STATE);
        }
        ttt::write_entry(&mut plat.mem, parent, idx, Entry::Invalid);
        plat.mem.unassign(g, true);
        plat.ledger.record_tlb_flush();
        Ok([g.addr(), 0, 0, 0])
    }

    fn leaf_slot(&self, plat: &Platform, c: &CvmDescriptor, ipa: u64) -> Result<(GranuleIdx, usize), Fail> {
        if ipa % GRANULE_SIZE as u64 != 0 || !c.params.in_ipa_space(ipa) {
            return Err(INPUT);
        }
        if !matches!(c.state, CvmState::New | CvmState::Active) {
            return Err(STATE);
        }
        let table = ttt::table_at(&plat.mem, c.ttt_root, ipa, ttt::LEAF_LEVEL).map_err(walk_fail)?;
        Ok((table, ttt::index(ipa, ttt::LEAF_LEVEL)))
    }

    fn map_protected(&mut self, plat: &mut Platform, id: CvmId, ipa: u64, target_pa: u64) -> TmiResult {
        let c = self.lookup(id)?;
        if !c.params.is_protected(ipa) {
            return Err(INPUT);
        }
        let (table, idx) = self.leaf_slot(plat, c, ipa)?;
        let target = pa_granule(plat, target_pa)?;
        let parked = self.unmapped.get(&id).is_some_and(|s| s.contains(&target));
        let fixed_ok = match c.shadow {
            ShadowPlacement::Region(_) => c.direct_target(ipa) == Some(target),
            ShadowPlacement::Window { .. } => true,
        };
        if !parked || !fixed_ok {
            return Err(INPUT);
        }
        if ttt::read_entry(&plat.mem, table, ttt::LEAF_LEVEL, idx) != Entry::Invalid {
            return Err(INPUT);
        }
        ttt::write_entry(
            &mut plat.mem,
            table,
            idx,
            Entry::Page {
                target,
                attrs: Attrs::PROTECTED,
            },
        );
        self.unmapped.get_mut(&id).unwrap().remove(&target);
        Ok([0; 4])
    }

    fn map_unprotected(&mut self, plat: &mut Platform, id: CvmId, ipa: u64, ns_pa: u64) -> TmiResult {
        let c = self.lookup(id)?;
        if c.params.is_protected(ipa) {
            return Err(INPUT);
        }
        let (table, idx) = self.leaf_slot(plat, c, ipa)?;
        let target = ns_granule(plat, ns_pa)?;
        if ttt::read_entry(&plat.mem, table, ttt::LEAF_LEVEL, idx) != Entry::Invalid {
            return Err(INPUT);
        }
        ttt::write_entry(
            &mut plat.mem,
            table,
            idx,
            Entry::Page {
                target,
                attrs: Attrs::SHARED,
            },
        );
        Ok([0; 4])
    }

    fn unmap(&mut self, plat: &mut Platform, id: CvmId, ipa: u64, unprotected: bool) -> TmiResult {
        let c = self.lookup(id)?;
        if c.params.is_protected(ipa) == unprotected {
            return Err(INPUT);
        }
        let (table, idx) = self.leaf_slot(plat, c, ipa)?;
        let Entry::Page { target, attrs } = ttt::read_entry(&plat.mem, table, ttt::LEAF_LEVEL, idx) else {
            return Err(INPUT);
        };
        if attrs.ns != unprotected {
            return Err(INPUT);
        }
        ttt::write_entry(&mut plat.mem, table, idx, Entry::Invalid);
        if !unprotected {
            self.unmapped.entry(id).or_default().insert(target);
        }
        plat.ledger.record_tlb_flush();
        Ok([target.addr(), 0, 0, 0])
    }

    fn delegate(&mut self, plat: &mut Platform, pa: u64, delegate: bool) -> TmiResult {
        if plat.mem.policy() != MappingPolicy::Dynamic {
            return Err(TmiStatus::ErrorPolicy.into());
        }
        let g = pa_granule(plat, pa)?;
        if delegate {
            plat.mem.delegate(g, &mut plat.ledger)?;
        } else {
            plat.mem.undelegate(g, &mut plat.ledger)?;
        }
        Ok([0; 4])
    }

    // ---- monitor services ----------------------------------------------

    /// Guest-visible value of feature register `reg`. Register 0 is the
    /// platform feature set filtered by the cVM's mask; other registers
    /// do not exist.
    pub fn read_feature_register(&self, id: CvmId, reg: u8) -> Result<u64, TmiStatus> {
        let c = self.cvms.get(&id).ok_or(TmiStatus::ErrorInput)?;
        if c.state != CvmState::Active || reg != 0 {
            return Err(TmiStatus::ErrorInput);
        }
        Ok(PLATFORM_FEATURES & c.params.feature_mask)
    }

    pub fn build_token(&self, id: CvmId, challenge: &[u8; 64]) -> Result<AttestationToken, ServiceError> {
        let c = self.cvms.get(&id).ok_or(ServiceError::UnknownCvm)?;
        if c.state != CvmState::Active {
            return Err(ServiceError::NotActive);
        }
        Ok(AttestationToken::build(
            &self.keys,
            TokenClaims {
                challenge: *challenge,
                measurement: c.measurement_value(),
                rem: c.rem,
                config_digest: *c.measurement.params_digest(),
                firmware_digest: *self.keys.firmware(),
                platform_info: PLATFORM_INFO.to_vec(),
            },
        ))
    }

    pub fn seal(&mut self, id: CvmId, plaintext: &[u8], policy: SealPolicy) -> Result<SealedBlob, ServiceError> {
        let c = self.cvms.get(&id).ok_or(ServiceError::UnknownCvm)?;
        if c.state != CvmState::Active {
            return Err(ServiceError::NotActive);
        }
        let mut nonce = [0u8; 12];
        self.rng.fill_bytes(&mut nonce);
        Ok(attestation::seal(&self.keys, policy, nonce, plaintext))
    }

    pub fn unseal(&self, id: CvmId, blob: &SealedBlob) -> Result<Vec<u8>, ServiceError> {
        let c = self.cvms.get(&id).ok_or(ServiceError::UnknownCvm)?;
        if c.state != CvmState::Active {
            return Err(ServiceError::NotActive);
        }
        Ok(attestation::unseal(&self.keys, &c.measurement_value(), blob)?)
    }

    /// Checks that every leaf of every cVM's tables targets a granule the
    /// cVM owns (protected) or a normal granule (shared), that protection
    /// matches the IPA side, and that no data granule is mapped twice.
    pub fn check_ttt_soundness(&self, plat: &Platform) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for c in self.cvms.values() {
            let (tables, leaves) = ttt::enumerate(&plat.mem, c.ttt_root);
            for t in &tables {
                let g = plat.mem.granule(t.granule).ok_or("table out of range")?;
                if g.state() != GranuleState::Ttt || g.owner() != Some(c.id) {
                    return Err(format!("{}: table {} not owned", c.id, t.granule));
                }
            }
            for l in &leaves {
                if l.attrs.ns != !c.params.is_protected(l.ipa) {
                    return Err(format!("{}: leaf {:#x} on wrong IPA side", c.id, l.ipa));
                }
                for p in 0..l.pages() as usize {
                    let t = l.target.offset(p);
                    let g = plat.mem.granule(t).ok_or("leaf out of range")?;
                    let ok = if l.attrs.ns {
                        g.state() == GranuleState::NsFree
                    } else {
                        g.state() == GranuleState::Data && g.owner() == Some(c.id) && seen.insert(t)
                    };
                    if !ok {
                        return Err(format!("{}: leaf {:#x} targets {} in {:?}", c.id, l.ipa, t, g.state()));
                    }
                }
            }
        }
        Ok(())
    }
}

/// PSCI `DENIED` as returned to the guest.
pub const PSCI_DENIED: u64 = (-3i64) as u64;

fn cvm_arg(v: u64) -> CvmId {
    CvmId(u32::try_from(v).unwrap_or(0))
}

fn tec_arg(v: u64) -> TecId {
    TecId(u32::try_from(v).unwrap_or(0))
}

fn pa_granule(plat: &Platform, pa: u64) -> Result<GranuleIdx, Fail> {
    if pa % GRANULE_SIZE as u64 != 0 {
        return Err(INPUT);
    }
    let g = GranuleIdx((pa / GRANULE_SIZE as u64) as usize);
    if g.0 >= plat.mem.len() {
        return Err(INPUT);
    }
    Ok(g)
}

/// A host-owned normal granule the monitor may read from.
fn ns_granule(plat: &Platform, pa: u64) -> Result<GranuleIdx, Fail> {
    let g = pa_granule(plat, pa)?;
    if plat.mem.granule(g).unwrap().state() != GranuleState::NsFree {
        return Err(INPUT);
    }
    Ok(g)
}

fn alloc(plat: &mut Platform, id: CvmId, state: GranuleState) -> Result<GranuleIdx, Fail> {
    let g = plat.mem.find_free_for(id).ok_or(MEMORY)?;
    plat.mem.assign(g, id, state)?;
    Ok(g)
}
