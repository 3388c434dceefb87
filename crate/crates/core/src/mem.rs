// SPDX-License-Identifier: Apache-2.0

//! Granule-level physical memory.
//!
//! Physical memory is an array of 4 KiB granules. Each granule carries a
//! world attribute (set by the TZASC layout, or by delegation under the
//! dynamic policy), a lifecycle state, an optional owning cVM and its bytes.
//! Every access goes through [`PhysicalMemory::check_access`], the physical
//! gate that the TZASC and the owner checks of the monitor together model.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::shadow::CostLedger;

/// Size of a granule in bytes.
pub const GRANULE_SIZE: usize = 4096;
/// log2 of [`GRANULE_SIZE`].
pub const GRANULE_SHIFT: u32 = 12;
/// Number of regions the address space controller can hold.
pub const TZASC_MAX_REGIONS: usize = 8;
/// Default physical memory size in granules (16 MiB).
pub const DEFAULT_GRANULES: usize = 4096;

static ZERO_PAGE: [u8; GRANULE_SIZE] = [0; GRANULE_SIZE];

/// Identifier of a confidential VM, assigned by the monitor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CvmId(pub u32);

impl fmt::Display for CvmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cvm{}", self.0)
    }
}

/// Index of a granule in physical memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GranuleIdx(pub usize);

impl GranuleIdx {
    pub fn offset(self, delta: usize) -> GranuleIdx {
        GranuleIdx(self.0 + delta)
    }

    /// Physical address of the first byte of this granule.
    pub fn addr(self) -> u64 {
        (self.0 as u64) << GRANULE_SHIFT
    }
}

impl fmt::Display for GranuleIdx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum World {
    Normal,
    Secure,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GranuleState {
    NsFree,
    NsShadow,
    SecureFree,
    Delegated,
    Data,
    Ttt,
    Tec,
    Params,
}

impl GranuleState {
    pub fn world(self) -> World {
        match self {
            GranuleState::NsFree | GranuleState::NsShadow => World::Normal,
            _ => World::Secure,
        }
    }

    /// States that hold monitor-managed cVM objects.
    pub fn is_assigned(self) -> bool {
        matches!(
            self,
            GranuleState::Data | GranuleState::Ttt | GranuleState::Tec | GranuleState::Params
        )
    }
}

/// How secure memory is handed to cVMs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MappingPolicy {
    /// A fixed secure region per cVM, mirrored by a fixed-offset shadow region.
    #[default]
    Direct,
    /// Granules are delegated one at a time by the host (CCA style).
    Dynamic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GstStatus {
    Undelegated,
    Delegated,
    Assigned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Requestor {
    Host,
    Tmm,
    Cvm(CvmId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessMode {
    Read,
    Write,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Access {
    Allowed,
    Fault,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TzascRegion {
    pub base: usize,
    pub count: usize,
    pub secure: bool,
}

/// Address space controller layout: at most eight sorted, disjoint regions.
/// Granules not covered by any region are normal-world.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TzascConfig {
    pub regions: Vec<TzascRegion>,
}

impl TzascConfig {
    /// One secure region at the bottom of memory, the rest normal.
    pub fn split(total: usize, secure: usize) -> Self {
        let mut regions = Vec::new();
        if secure > 0 {
            regions.push(TzascRegion {
                base: 0,
                count: secure,
                secure: true,
            });
        }
        if total > secure {
            regions.push(TzascRegion {
                base: secure,
                count: total - secure,
                secure: false,
            });
        }
        TzascConfig { regions }
    }

    pub fn validate(&self, total: usize) -> Result<(), MemError> {
        if self.regions.len() > TZASC_MAX_REGIONS {
            return Err(MemError::RegionLimitExceeded(self.regions.len()));
        }
        let mut end = 0usize;
        for (i, r) in self.regions.iter().enumerate() {
            if r.count == 0 || r.base.checked_add(r.count).map_or(true, |e| e > total) {
                return Err(MemError::RegionOutOfRange(i));
            }
            if i > 0 && r.base < end {
                return Err(MemError::OverlappingRegions(i));
            }
            end = r.base + r.count;
        }
        Ok(())
    }

    pub fn is_secure(&self, g: GranuleIdx) -> bool {
        self.regions
            .iter()
            .find(|r| g.0 >= r.base && g.0 < r.base + r.count)
            .is_some_and(|r| r.secure)
    }
}

/// A cVM's reserved secure region and its fixed-offset shadow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SecureRegion {
    pub cvm: CvmId,
    pub base: GranuleIdx,
    pub count: usize,
    /// Signed distance in granules from `base` to the shadow base.
    pub shadow_offset: isize,
}

impl SecureRegion {
    pub fn contains(&self, g: GranuleIdx) -> bool {
        g.0 >= self.base.0 && g.0 < self.base.0 + self.count
    }

    pub fn shadow_base(&self) -> GranuleIdx {
        GranuleIdx((self.base.0 as isize + self.shadow_offset) as usize)
    }

    pub fn shadow_of(&self, g: GranuleIdx) -> GranuleIdx {
        GranuleIdx((g.0 as isize + self.shadow_offset) as usize)
    }

    pub fn granules(&self) -> impl DoubleEndedIterator<Item = GranuleIdx> {
        let base = self.base.0;
        (base..base + self.count).map(GranuleIdx)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemError {
    #[error("{0} regions exceeds the limit of {TZASC_MAX_REGIONS}")]
    RegionLimitExceeded(usize),
    #[error("region {0} overlaps its predecessor or is out of order")]
    OverlappingRegions(usize),
    #[error("region {0} is empty or extends past the end of memory")]
    RegionOutOfRange(usize),
    #[error("address space controller can only be configured before any cVM exists")]
    NotInSetup,
    #[error("no contiguous run of {0} free secure granules")]
    OutOfSecureMemory(usize),
    #[error("no contiguous run of {0} free normal granules for the shadow")]
    OutOfShadowMemory(usize),
    #[error("unknown cVM {0}")]
    UnknownCvm(CvmId),
    #[error("{0} already has a secure region")]
    AlreadyReserved(CvmId),
    #[error("granule {granule} is in state {state:?}")]
    WrongState {
        granule: GranuleIdx,
        state: GranuleState,
    },
    #[error("operation not available under the {0:?} policy")]
    PolicyMismatch(MappingPolicy),
    #[error("granule {0} is out of range")]
    OutOfRange(GranuleIdx),
}

#[derive(Clone, Debug)]
pub struct Granule {
    world: World,
    state: GranuleState,
    owner: Option<CvmId>,
    data: Option<Box<[u8; GRANULE_SIZE]>>,
}

impl Granule {
    fn new(world: World) -> Self {
        let state = match world {
            World::Normal => GranuleState::NsFree,
            World::Secure => GranuleState::SecureFree,
        };
        Granule {
            world,
            state,
            owner: None,
            data: None,
        }
    }

    pub fn world(&self) -> World {
        self.world
    }

    pub fn state(&self) -> GranuleState {
        self.state
    }

    pub fn owner(&self) -> Option<CvmId> {
        self.owner
    }

    pub fn contents(&self) -> &[u8; GRANULE_SIZE] {
        self.data.as_deref().unwrap_or(&ZERO_PAGE)
    }

    pub fn is_zero(&self) -> bool {
        self.data.as_ref().map_or(true, |d| d.iter().all(|&b| b == 0))
    }

    fn contents_mut(&mut self) -> &mut [u8; GRANULE_SIZE] {
        self.data.get_or_insert_with(|| Box::new([0; GRANULE_SIZE]))
    }

    fn zero(&mut self) {
        self.data = None;
    }
}

/// Running tally of accesses made with [`Requestor::Host`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AccessAudit {
    pub host_accesses: u64,
    pub host_faults: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub granules: usize,
    pub tzasc: TzascConfig,
    #[serde(default)]
    pub policy: MappingPolicy,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            granules: DEFAULT_GRANULES,
            tzasc: TzascConfig::split(DEFAULT_GRANULES, DEFAULT_GRANULES / 2),
            policy: MappingPolicy::Direct,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PhysicalMemory {
    granules: Vec<Granule>,
    tzasc: TzascConfig,
    policy: MappingPolicy,
    regions: BTreeMap<CvmId, SecureRegion>,
    gst: Vec<GstStatus>,
    audit: AccessAudit,
}

impl PhysicalMemory {
    pub fn new(cfg: &MemoryConfig) -> Result<Self, MemError> {
        let mut mem = PhysicalMemory {
            granules: vec![Granule::new(World::Normal); cfg.granules],
            tzasc: TzascConfig::default(),
            policy: cfg.policy,
            regions: BTreeMap::new(),
            gst: Vec::new(),
            audit: AccessAudit::default(),
        };
        if cfg.policy == MappingPolicy::Dynamic {
            mem.gst = vec![GstStatus::Undelegated; cfg.granules];
        }
        mem.configure_tzasc(cfg.tzasc.clone())?;
        Ok(mem)
    }

    pub fn len(&self) -> usize {
        self.granules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.granules.is_empty()
    }

    pub fn policy(&self) -> MappingPolicy {
        self.policy
    }

    pub fn tzasc(&self) -> &TzascConfig {
        &self.tzasc
    }

    pub fn audit(&self) -> AccessAudit {
        self.audit
    }

    pub fn regions(&self) -> impl Iterator<Item = &SecureRegion> {
        self.regions.values()
    }

    pub fn region(&self, cvm: CvmId) -> Option<&SecureRegion> {
        self.regions.get(&cvm)
    }

    pub fn granule(&self, g: GranuleIdx) -> Option<&Granule> {
        self.granules.get(g.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (GranuleIdx, &Granule)> {
        self.granules.iter().enumerate().map(|(i, g)| (GranuleIdx(i), g))
    }

    pub fn gst(&self, g: GranuleIdx) -> Option<GstStatus> {
        self.gst.get(g.0).copied()
    }

    /// Recomputes every granule's world from `cfg`. Only legal while no
    /// granule belongs to a cVM.
    pub fn configure_tzasc(&mut self, cfg: TzascConfig) -> Result<(), MemError> {
        cfg.validate(self.granules.len())?;
        let busy = !self.regions.is_empty()
            || self
                .granules
                .iter()
                .any(|g| g.owner.is_some() || !matches!(g.state, GranuleState::NsFree | GranuleState::SecureFree));
        if busy {
            return Err(MemError::NotInSetup);
        }
        for (i, g) in self.granules.iter_mut().enumerate() {
            let world = if cfg.is_secure(GranuleIdx(i)) {
                World::Secure
            } else {
                World::Normal
            };
            *g = Granule::new(world);
        }
        self.tzasc = cfg;
        Ok(())
    }

    /// The physical gate. Host accesses to secure memory fault, the monitor
    /// may touch anything, and a cVM may touch normal memory (reachable only
    /// through an explicit unprotected mapping) or secure granules it owns.
    pub fn check_access(&self, who: Requestor, g: GranuleIdx, _mode: AccessMode) -> Access {
        let Some(granule) = self.granules.get(g.0) else {
            return Access::Fault;
        };
        let ok = match who {
            Requestor::Tmm => true,
            Requestor::Host => granule.world == World::Normal,
            Requestor::Cvm(id) => match granule.world {
                World::Normal => true,
                World::Secure => granule.owner == Some(id),
            },
        };
        if ok {
            Access::Allowed
        } else {
            Access::Fault
        }
    }

    fn gate(&mut self, who: Requestor, g: GranuleIdx, mode: AccessMode) -> Result<(), Access> {
        let access = self.check_access(who, g, mode);
        if who == Requestor::Host {
            self.audit.host_accesses += 1;
            if access == Access::Fault {
                self.audit.host_faults += 1;
            }
        }
        match access {
            Access::Allowed => Ok(()),
            Access::Fault => Err(Access::Fault),
        }
    }

    pub fn read(&mut self, who: Requestor, g: GranuleIdx) -> Result<&[u8; GRANULE_SIZE], Access> {
        self.gate(who, g, AccessMode::Read)?;
        Ok(self.granules[g.0].contents())
    }

    pub fn read_bytes(
        &mut self,
        who: Requestor,
        g: GranuleIdx,
        offset: usize,
        len: usize,
    ) -> Result<Vec<u8>, Access> {
        if offset + len > GRANULE_SIZE {
            return Err(Access::Fault);
        }
        Ok(self.read(who, g)?[offset..offset + len].to_vec())
    }

    pub fn write(
        &mut self,
        who: Requestor,
        g: GranuleIdx,
        offset: usize,
        bytes: &[u8],
    ) -> Result<(), Access> {
        if offset + bytes.len() > GRANULE_SIZE {
            return Err(Access::Fault);
        }
        self.gate(who, g, AccessMode::Write)?;
        let granule = &mut self.granules[g.0];
        if granule.data.is_none() && bytes.iter().all(|&b| b == 0) {
            return Ok(());
        }
        granule.contents_mut()[offset..offset + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    /// Reserves the lowest contiguous run of `count` unowned secure granules
    /// and the lowest run of `count` free normal granules as its shadow.
    pub fn reserve_secure_region(
        &mut self,
        cvm: CvmId,
        count: usize,
    ) -> Result<SecureRegion, MemError> {
        if self.policy != MappingPolicy::Direct {
            return Err(MemError::PolicyMismatch(self.policy));
        }
        if self.regions.contains_key(&cvm) {
            return Err(MemError::AlreadyReserved(cvm));
        }
        let base = self
            .first_fit(count, |g| g.state == GranuleState::SecureFree && g.owner.is_none())
            .ok_or(MemError::OutOfSecureMemory(count))?;
        let shadow = self
            .first_fit(count, |g| g.state == GranuleState::NsFree)
            .ok_or(MemError::OutOfShadowMemory(count))?;
        let region = SecureRegion {
            cvm,
            base,
            count,
            shadow_offset: shadow.0 as isize - base.0 as isize,
        };
        for g in region.granules() {
            self.granules[g.0].owner = Some(cvm);
            self.granules[region.shadow_of(g).0].state = GranuleState::NsShadow;
        }
        self.regions.insert(cvm, region);
        Ok(region)
    }

    /// Zeroes and disowns every granule of the region; the shadow returns to
    /// the free normal pool.
    pub fn release_secure_region(&mut self, cvm: CvmId) -> Result<(), MemError> {
        self.release_region_inner(cvm, true)
    }

    pub(crate) fn release_region_inner(&mut self, cvm: CvmId, scrub: bool) -> Result<(), MemError> {
        let region = self.regions.remove(&cvm).ok_or(MemError::UnknownCvm(cvm))?;
        for g in region.granules() {
            let granule = &mut self.granules[g.0];
            if scrub {
                granule.zero();
            }
            granule.owner = None;
            granule.state = GranuleState::SecureFree;
            let shadow = &mut self.granules[region.shadow_of(g).0];
            shadow.state = GranuleState::NsFree;
        }
        Ok(())
    }

    fn first_fit(&self, count: usize, free: impl Fn(&Granule) -> bool) -> Option<GranuleIdx> {
        if count == 0 {
            return None;
        }
        let mut run = 0;
        for (i, g) in self.granules.iter().enumerate() {
            if free(g) {
                run += 1;
                if run == count {
                    return Some(GranuleIdx(i + 1 - count));
                }
            } else {
                run = 0;
            }
        }
        None
    }

    /// Finds a free contiguous run of normal granules (used by the host to
    /// place staging buffers and dynamic-policy shadows).
    pub fn find_ns_free_run(&self, count: usize) -> Option<GranuleIdx> {
        self.first_fit(count, |g| g.state == GranuleState::NsFree)
    }

    /// Marks host-chosen normal granules as shadow memory (dynamic policy).
    pub(crate) fn claim_shadow(&mut self, base: GranuleIdx, count: usize) -> Result<(), MemError> {
        for i in 0..count {
            let g = base.offset(i);
            let granule = self.granules.get(g.0).ok_or(MemError::OutOfRange(g))?;
            if granule.state != GranuleState::NsFree {
                return Err(MemError::WrongState {
                    granule: g,
                    state: granule.state,
                });
            }
        }
        for i in 0..count {
            self.granules[base.0 + i].state = GranuleState::NsShadow;
        }
        Ok(())
    }

    pub(crate) fn unclaim_shadow(&mut self, base: GranuleIdx, count: usize) {
        for i in 0..count {
            if let Some(g) = self.granules.get_mut(base.0 + i) {
                if g.state == GranuleState::NsShadow {
                    g.state = GranuleState::NsFree;
                }
            }
        }
    }

    pub fn delegate(&mut self, g: GranuleIdx, ledger: &mut CostLedger) -> Result<(), MemError> {
        if self.policy != MappingPolicy::Dynamic {
            return Err(MemError::PolicyMismatch(self.policy));
        }
        let granule = self.granules.get_mut(g.0).ok_or(MemError::OutOfRange(g))?;
        if granule.state != GranuleState::NsFree {
            return Err(MemError::WrongState {
                granule: g,
                state: granule.state,
            });
        }
        granule.zero();
        granule.state = GranuleState::Delegated;
        granule.world = World::Secure;
        self.gst[g.0] = GstStatus::Delegated;
        ledger.record_delegation();
        Ok(())
    }

    /// Returns a delegated granule to the normal world. The monitor zeroes
    /// the contents before the world flips.
    pub fn undelegate(&mut self, g: GranuleIdx, ledger: &mut CostLedger) -> Result<(), MemError> {
        if self.policy != MappingPolicy::Dynamic {
            return Err(MemError::PolicyMismatch(self.policy));
        }
        let granule = self.granules.get_mut(g.0).ok_or(MemError::OutOfRange(g))?;
        if granule.state != GranuleState::Delegated {
            return Err(MemError::WrongState {
                granule: g,
                state: granule.state,
            });
        }
        granule.zero();
        granule.state = GranuleState::NsFree;
        granule.world = World::Normal;
        self.gst[g.0] = GstStatus::Undelegated;
        ledger.record_delegation();
        Ok(())
    }

    /// Moves a free granule into a monitor-object state for `cvm`.
    /// Direct: the granule must be a SecureFree granule of the cVM's region.
    /// Dynamic: it must be Delegated and unowned.
    pub(crate) fn assign(
        &mut self,
        g: GranuleIdx,
        cvm: CvmId,
        state: GranuleState,
    ) -> Result<(), MemError> {
        debug_assert!(state.is_assigned());
        let policy = self.policy;
        let granule = self.granules.get_mut(g.0).ok_or(MemError::OutOfRange(g))?;
        let ok = match policy {
            MappingPolicy::Direct => {
                granule.state == GranuleState::SecureFree && granule.owner == Some(cvm)
            }
            MappingPolicy::Dynamic => {
                granule.state == GranuleState::Delegated && granule.owner.is_none()
            }
        };
        if !ok {
            return Err(MemError::WrongState {
                granule: g,
                state: granule.state,
            });
        }
        granule.state = state;
        granule.owner = Some(cvm);
        if policy == MappingPolicy::Dynamic {
            self.gst[g.0] = GstStatus::Assigned;
        }
        Ok(())
    }

    /// Zeroes an assigned granule and returns it to the cVM's free pool
    /// (direct) or to the delegated pool (dynamic).
    pub(crate) fn unassign(&mut self, g: GranuleIdx, scrub: bool) {
        let policy = self.policy;
        let granule = &mut self.granules[g.0];
        debug_assert!(granule.state.is_assigned());
        if scrub {
            granule.zero();
        }
        match policy {
            MappingPolicy::Direct => granule.state = GranuleState::SecureFree,
            MappingPolicy::Dynamic => {
                granule.state = GranuleState::Delegated;
                granule.owner = None;
                self.gst[g.0] = GstStatus::Delegated;
            }
        }
    }

    /// Lowest free granule available to `cvm` for object allocation,
    /// searching from the top of its region (direct) or from the bottom of
    /// the delegated pool (dynamic).
    pub(crate) fn find_free_for(&self, cvm: CvmId) -> Option<GranuleIdx> {
        match self.policy {
            MappingPolicy::Direct => {
                let region = self.regions.get(&cvm)?;
                region
                    .granules()
                    .rev()
                    .find(|g| self.granules[g.0].state == GranuleState::SecureFree)
            }
            MappingPolicy::Dynamic => self
                .iter()
                .find(|(_, g)| g.state == GranuleState::Delegated && g.owner.is_none())
                .map(|(i, _)| i),
        }
    }

    /// Number of delegated, unassigned granules (dynamic policy).
    pub fn delegated_free(&self) -> usize {
        self.granules
            .iter()
            .filter(|g| g.state == GranuleState::Delegated && g.owner.is_none())
            .count()
    }

    /// Feeds the full granule table into `h`.
    pub fn fingerprint(&self, h: &mut impl std::hash::Hasher) {
        use std::hash::Hash;
        for (i, g) in self.granules.iter().enumerate() {
            (i, g.world, g.state, g.owner).hash(h);
            if !g.is_zero() {
                g.contents().hash(h);
            }
        }
        self.tzasc.hash(h);
        self.regions.hash(h);
        self.gst.hash(h);
    }

    /// Checks the structural invariants of the granule table, returning a
    /// description of the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (i, g) in self.iter() {
            if g.world != g.state.world() {
                return Err(format!("{i}: world {:?} but state {:?}", g.world, g.state));
            }
            let owned_states = match self.policy {
                MappingPolicy::Direct => g.state.is_assigned() || g.state == GranuleState::SecureFree,
                MappingPolicy::Dynamic => g.state.is_assigned(),
            };
            if g.state.is_assigned() && g.owner.is_none() {
                return Err(format!("{i}: {:?} without owner", g.state));
            }
            if g.owner.is_some() && !owned_states {
                return Err(format!("{i}: owner set in state {:?}", g.state));
            }
            let free_secure = matches!(g.state, GranuleState::SecureFree | GranuleState::Delegated);
            if free_secure && !g.is_zero() {
                return Err(format!("{i}: free secure granule holds stale data"));
            }
            if let Some(owner) = g.owner {
                if self.policy == MappingPolicy::Direct
                    && !self.regions.get(&owner).is_some_and(|r| r.contains(i))
                {
                    return Err(format!("{i}: owned by {owner} outside its region"));
                }
            }
            if self.check_access(Requestor::Host, i, AccessMode::Read) == Access::Allowed
                && g.world == World::Secure
            {
                return Err(format!("{i}: host can reach secure memory"));
            }
            if self.policy == MappingPolicy::Direct && g.world == World::Secure {
                if !self.tzasc.is_secure(i) {
                    return Err(format!("{i}: secure granule outside a secure TZASC region"));
                }
            }
        }
        let regions: Vec<_> = self.regions.values().collect();
        for (a, ra) in regions.iter().enumerate() {
            for rb in &regions[a + 1..] {
                let disjoint = ra.base.0 + ra.count <= rb.base.0 || rb.base.0 + rb.count <= ra.base.0;
                if !disjoint {
                    return Err(format!("regions of {} and {} overlap", ra.cvm, rb.cvm));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mem(total: usize, secure: usize) -> PhysicalMemory {
        PhysicalMemory::new(&MemoryConfig {
            granules: total,
            tzasc: TzascConfig::split(total, secure),
            policy: MappingPolicy::Direct,
        })
        .unwrap()
    }

    fn dynamic(total: usize) -> PhysicalMemory {
        PhysicalMemory::new(&MemoryConfig {
            granules: total,
            tzasc: TzascConfig::split(total, 16),
            policy: MappingPolicy::Dynamic,
        })
        .unwrap()
    }

    #[test]
    fn tzasc_readback() {
        let m = mem(1024, 256);
        assert_eq!(m.granule(GranuleIdx(10)).unwrap().world(), World::Secure);
        assert_eq!(m.granule(GranuleIdx(300)).unwrap().world(), World::Normal);
    }

    #[test]
    fn tzasc_region_limit() {
        let mut m = mem(1024, 256);
        let regions = (0..9)
            .map(|i| TzascRegion {
                base: i * 100,
                count: 100,
                secure: i % 2 == 0,
            })
            .collect();
        assert_eq!(
            m.configure_tzasc(TzascConfig { regions }),
            Err(MemError::RegionLimitExceeded(9))
        );
    }

    #[test]
    fn tzasc_single_normal_region() {
        let mut m = mem(1024, 256);
        m.configure_tzasc(TzascConfig {
            regions: vec![TzascRegion {
                base: 0,
                count: 1024,
                secure: false,
            }],
        })
        .unwrap();
        assert!(m.iter().all(|(_, g)| g.world() == World::Normal));
    }

    #[test]
    fn tzasc_overlap_rejected() {
        let mut m = mem(1024, 256);
        let cfg = TzascConfig {
            regions: vec![
                TzascRegion { base: 0, count: 100, secure: true },
                TzascRegion { base: 50, count: 100, secure: false },
            ],
        };
        assert_eq!(m.configure_tzasc(cfg), Err(MemError::OverlappingRegions(1)));
    }

    #[test]
    fn tzasc_locked_after_reservation() {
        let mut m = mem(1024, 256);
        m.reserve_secure_region(CvmId(1), 4).unwrap();
        assert_eq!(
            m.configure_tzasc(TzascConfig::split(1024, 512)),
            Err(MemError::NotInSetup)
        );
    }

    #[test]
    fn access_gate() {
        let mut m = mem(1024, 256);
        let r = m.reserve_secure_region(CvmId(1), 8).unwrap();
        m.assign(r.base, CvmId(1), GranuleState::Data).unwrap();
        assert_eq!(m.check_access(Requestor::Host, r.base, AccessMode::Read), Access::Fault);
        assert_eq!(
            m.check_access(Requestor::Host, GranuleIdx(600), AccessMode::Read),
            Access::Allowed
        );
        assert_eq!(
            m.check_access(Requestor::Cvm(CvmId(2)), r.base, AccessMode::Write),
            Access::Fault
        );
        assert_eq!(
            m.check_access(Requestor::Cvm(CvmId(1)), r.base, AccessMode::Write),
            Access::Allowed
        );
        assert_eq!(m.check_access(Requestor::Tmm, r.base, AccessMode::Write), Access::Allowed);
        assert!(m.read(Requestor::Host, r.base).is_err());
        assert_eq!(m.audit().host_faults, 1);
    }

    #[test]
    fn reserve_first_fit() {
        let mut m = mem(1024, 256);
        let r = m.reserve_secure_region(CvmId(1), 64).unwrap();
        assert_eq!(r.base, GranuleIdx(0));
        assert_eq!(r.count, 64);
        assert_eq!(r.shadow_base(), GranuleIdx(256));
        for g in r.granules() {
            assert_eq!(m.granule(r.shadow_of(g)).unwrap().state(), GranuleState::NsShadow);
            assert_eq!(m.granule(r.shadow_of(g)).unwrap().world(), World::Normal);
        }
        assert_eq!(
            m.reserve_secure_region(CvmId(2), 1000),
            Err(MemError::OutOfSecureMemory(1000))
        );
    }

    #[test]
    fn back_to_back_regions_disjoint() {
        let mut m = mem(1024, 256);
        let a = m.reserve_secure_region(CvmId(1), 64).unwrap();
        let b = m.reserve_secure_region(CvmId(2), 64).unwrap();
        assert!(a.granules().all(|g| !b.contains(g)));
        assert!(a.granules().all(|g| !b.contains(a.shadow_of(g))));
        m.check_invariants().unwrap();
    }

    #[test]
    fn shadow_exhaustion() {
        let mut m = mem(300, 256);
        assert_eq!(
            m.reserve_secure_region(CvmId(1), 100),
            Err(MemError::OutOfShadowMemory(100))
        );
    }

    #[test]
    fn release_zeroes_and_reuse_sees_zero() {
        let mut m = mem(1024, 256);
        let r = m.reserve_secure_region(CvmId(1), 16).unwrap();
        for g in r.granules() {
            m.write(Requestor::Tmm, g, 0, &[0xAA; GRANULE_SIZE]).unwrap();
        }
        m.release_secure_region(CvmId(1)).unwrap();
        for g in r.granules() {
            assert_eq!(m.read(Requestor::Tmm, g).unwrap(), &[0u8; GRANULE_SIZE]);
            assert_eq!(m.granule(g).unwrap().owner(), None);
            assert_eq!(m.granule(r.shadow_of(g)).unwrap().state(), GranuleState::NsFree);
        }
        let r2 = m.reserve_secure_region(CvmId(2), 16).unwrap();
        assert_eq!(r2.base, r.base);
        let scan = r2
            .granules()
            .flat_map(|g| m.granule(g).unwrap().contents().to_vec())
            .all(|b| b == 0);
        assert!(scan);
        assert_eq!(m.release_secure_region(CvmId(9)), Err(MemError::UnknownCvm(CvmId(9))));
    }

    #[test]
    fn delegation_flow() {
        let mut m = dynamic(64);
        let mut ledger = CostLedger::default();
        let g = GranuleIdx(20);
        m.delegate(g, &mut ledger).unwrap();
        assert_eq!(m.gst(g), Some(GstStatus::Delegated));
        assert_eq!(m.granule(g).unwrap().world(), World::Secure);
        assert_eq!(ledger.counters().tlb_flush, 1);
        assert_eq!(ledger.counters().world_switch, 1);
        m.assign(g, CvmId(1), GranuleState::Data).unwrap();
        assert_eq!(m.gst(g), Some(GstStatus::Assigned));
        assert!(matches!(m.undelegate(g, &mut ledger), Err(MemError::WrongState { .. })));
        m.unassign(g, true);
        m.undelegate(g, &mut ledger).unwrap();
        assert_eq!(m.gst(g), Some(GstStatus::Undelegated));
        assert_eq!(ledger.counters().tlb_flush, 2);
        m.check_invariants().unwrap();
    }

    #[test]
    fn delegate_under_direct_rejected() {
        let mut m = mem(64, 16);
        let mut ledger = CostLedger::default();
        assert_eq!(
            m.delegate(GranuleIdx(30), &mut ledger),
            Err(MemError::PolicyMismatch(MappingPolicy::Direct))
        );
    }

    #[test]
    fn many_cvms_in_one_tzasc_region() {
        let mut m = mem(4096, 2048);
        for id in 0..32 {
            m.reserve_secure_region(CvmId(id), 32).unwrap();
        }
        assert_eq!(m.tzasc().regions.len(), 2);
        assert_eq!(m.regions().count(), 32);
        m.check_invariants().unwrap();
    }
}
