// SPDX-License-Identifier: Apache-2.0

//! Secure/shadow memory transfers under the two mapping policies, the cost
//! ledger, and optional page protection for shadowed I/O pages.

pub mod cost;
mod ledger;
pub mod protect;

use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

pub use cost::{CostError, CostModel, LatencyConstants};
pub use ledger::{CostLedger, Counters};
pub use protect::{PageProtection, TagSidecar};

use crate::mem::{CvmId, GranuleIdx, GranuleState, MappingPolicy, PhysicalMemory, Requestor, GRANULE_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Direction {
    SecureToShadow,
    ShadowToSecure,
}

/// A secure page and the normal-world page that shadows it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct TransferPage {
    pub ipa_page: u64,
    pub secure: GranuleIdx,
    pub shadow: GranuleIdx,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TransferRegion {
    pub cvm: CvmId,
    pub pages: Vec<TransferPage>,
}

impl TransferRegion {
    fn key(&self) -> (CvmId, u64) {
        (self.cvm, self.pages.first().map_or(0, |p| p.ipa_page))
    }
}

/// Handle for one transfer. Under the dynamic policy it stands for the
/// temporary mapping of the shadow pages into the monitor, which must be
/// torn down with [`ShadowSync::complete`] before the region is reused.
#[derive(Debug, PartialEq, Eq)]
#[must_use]
pub struct TransferToken {
    key: (CvmId, u64),
    mapping: Option<MappingPolicy>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TransferStats {
    pub bytes: u64,
    pub pages: usize,
    pub transformed: usize,
    pub integrity_failures: usize,
    pub latency_us: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SyncError {
    #[error("page {0:#x} is outside the cVM's shadowed memory")]
    RegionOutOfBounds(u64),
    #[error("a dynamic transfer on this region is still mapped")]
    TokenLeak,
}

#[derive(Clone, Debug, Default)]
pub struct ShadowSync {
    in_flight: BTreeSet<(CvmId, u64)>,
}

impl ShadowSync {
    pub fn begin(
        &mut self,
        region: &TransferRegion,
        policy: MappingPolicy,
    ) -> Result<TransferToken, SyncError> {
        let key = region.key();
        match policy {
            MappingPolicy::Direct => Ok(TransferToken { key, mapping: None }),
            MappingPolicy::Dynamic => {
                if !self.in_flight.insert(key) {
                    return Err(SyncError::TokenLeak);
                }
                Ok(TransferToken {
                    key,
                    mapping: Some(policy),
                })
            }
        }
    }

    pub fn complete(&mut self, token: TransferToken) {
        if token.mapping.is_some() {
            self.in_flight.remove(&token.key);
        }
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    fn validate(mem: &PhysicalMemory, region: &TransferRegion) -> Result<(), SyncError> {
        for p in &region.pages {
            let secure_ok = mem
                .granule(p.secure)
                .is_some_and(|g| g.state() == GranuleState::Data && g.owner() == Some(region.cvm));
            let shadow_ok = mem
                .granule(p.shadow)
                .is_some_and(|g| g.state() == GranuleState::NsShadow);
            if !secure_ok || !shadow_ok {
                return Err(SyncError::RegionOutOfBounds(p.ipa_page));
            }
        }
        Ok(())
    }

    /// Copies every page of `region` in `direction`, applying page
    /// protection where configured, and records the transfer.
    #[allow(clippy::too_many_arguments)]
    pub fn sync(
        &mut self,
        mem: &mut PhysicalMemory,
        ledger: &mut CostLedger,
        cost: &CostModel,
        direction: Direction,
        region: &TransferRegion,
        policy: MappingPolicy,
        protection: Option<&PageProtection>,
        sidecar: &mut TagSidecar,
    ) -> Result<TransferStats, SyncError> {
        Self::validate(mem, region)?;
        let token = self.begin(region, policy)?;
        let mut stats = TransferStats::default();
        for p in &region.pages {
            let prot = protection.filter(|pp| pp.is_protected(p.ipa_page));
            match direction {
                Direction::SecureToShadow => {
                    let mut page = *mem.read(Requestor::Tmm, p.secure).expect("monitor access");
                    if let Some(pp) = prot {
                        pp.encrypt(p.ipa_page, &mut page);
                        sidecar.insert(region.cvm.0, p.ipa_page, pp.tag(p.ipa_page, &page));
                        stats.transformed += 1;
                    }
                    mem.write(Requestor::Tmm, p.shadow, 0, &page).expect("monitor access");
                }
                Direction::ShadowToSecure => {
                    let mut page = *mem.read(Requestor::Tmm, p.shadow).expect("monitor access");
                    if let Some(pp) = prot {
                        let tag_ok = sidecar
                            .get(region.cvm.0, p.ipa_page)
                            .is_some_and(|t| pp.verify(p.ipa_page, &page, t));
                        if !tag_ok {
                            stats.integrity_failures += 1;
                            stats.bytes += GRANULE_SIZE as u64;
                            stats.pages += 1;
                            continue;
                        }
                        pp.decrypt(p.ipa_page, &mut page);
                        stats.transformed += 1;
                    }
                    mem.write(Requestor::Tmm, p.secure, 0, &page).expect("monitor access");
                }
            }
            stats.bytes += GRANULE_SIZE as u64;
            stats.pages += 1;
        }
        let copy_us = cost.copy_cost(stats.bytes).unwrap_or(0.0);
        let before = ledger.clone();
        ledger.record_transfer(policy, stats.bytes, copy_us);
        if let Ok(k) = cost.constants() {
            stats.latency_us = ledger.since(&before).simulated_latency(&k);
        }
        self.complete(token);
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mem::{MemoryConfig, TzascConfig};

    fn setup() -> (PhysicalMemory, TransferRegion) {
        let mut mem = PhysicalMemory::new(&MemoryConfig {
            granules: 64,
            tzasc: TzascConfig::split(64, 32),
            policy: MappingPolicy::Direct,
        })
        .unwrap();
        let r = mem.reserve_secure_region(CvmId(1), 4).unwrap();
        let mut pages = Vec::new();
        for (i, g) in r.granules().enumerate() {
            mem.assign(g, CvmId(1), GranuleState::Data).unwrap();
            mem.write(Requestor::Tmm, g, 0, &[i as u8 + 1; 64]).unwrap();
            pages.push(TransferPage {
                ipa_page: i as u64,
                secure: g,
                shadow: r.shadow_of(g),
            });
        }
        (mem, TransferRegion { cvm: CvmId(1), pages })
    }

    fn run(policy: MappingPolicy) -> (PhysicalMemory, CostLedger) {
        let (mut mem, region) = setup();
        let mut ledger = CostLedger::default();
        let mut sync = ShadowSync::default();
        let mut sidecar = TagSidecar::default();
        let one = TransferRegion {
            cvm: region.cvm,
            pages: region.pages[..1].to_vec(),
        };
        sync.sync(
            &mut mem,
            &mut ledger,
            &CostModel::reference(),
            Direction::SecureToShadow,
            &one,
            policy,
            None,
            &mut sidecar,
        )
        .unwrap();
        (mem, ledger)
    }

    #[test]
    fn direct_has_no_mapping_events() {
        let (_, ledger) = run(MappingPolicy::Direct);
        let c = ledger.counters();
        assert_eq!((c.stage2_map, c.stage2_unmap, c.tlb_flush), (0, 0, 0));
        assert_eq!(c.bytes_copied, 4096);
    }

    #[test]
    fn dynamic_maps_and_flushes() {
        let (_, ledger) = run(MappingPolicy::Dynamic);
        let c = ledger.counters();
        assert_eq!((c.stage2_map, c.stage2_unmap, c.tlb_flush), (1, 1, 1));
    }

    #[test]
    fn policies_agree_on_content() {
        let (a, _) = run(MappingPolicy::Direct);
        let (b, _) = run(MappingPolicy::Dynamic);
        for (g, ga) in a.iter() {
            assert_eq!(ga.contents(), b.granule(g).unwrap().contents());
        }
    }

    #[test]
    fn token_leak_detected() {
        let (_, region) = setup();
        let mut sync = ShadowSync::default();
        let t = sync.begin(&region, MappingPolicy::Dynamic).unwrap();
        assert_eq!(sync.begin(&region, MappingPolicy::Dynamic), Err(SyncError::TokenLeak));
        sync.complete(t);
        let t = sync.begin(&region, MappingPolicy::Dynamic).unwrap();
        sync.complete(t);
        let d1 = sync.begin(&region, MappingPolicy::Direct).unwrap();
        let d2 = sync.begin(&region, MappingPolicy::Direct).unwrap();
        sync.complete(d1);
        sync.complete(d2);
    }

    #[test]
    fn out_of_bounds_page() {
        let (mut mem, mut region) = setup();
        region.pages[0].shadow = GranuleIdx(0);
        let err = ShadowSync::default()
            .sync(
                &mut mem,
                &mut CostLedger::default(),
                &CostModel::reference(),
                Direction::SecureToShadow,
                &region,
                MappingPolicy::Direct,
                None,
                &mut TagSidecar::default(),
            )
            .unwrap_err();
        assert_eq!(err, SyncError::RegionOutOfBounds(0));
    }

    #[test]
    fn protected_round_trip_and_tamper() {
        let (mut mem, region) = setup();
        let mut ledger = CostLedger::default();
        let cost = CostModel::reference();
        let mut sync = ShadowSync::default();
        let mut sidecar = TagSidecar::default();
        let mut prot = PageProtection::new(&[7; 32]);
        prot.protect([0, 1]);
        let plain0 = *mem.granule(region.pages[0].secure).unwrap().contents();
        let out = sync
            .sync(&mut mem, &mut ledger, &cost, Direction::SecureToShadow, &region,
                MappingPolicy::Direct, Some(&prot), &mut sidecar)
            .unwrap();
        assert_eq!(out.transformed, 2);
        let shadow0 = *mem.granule(region.pages[0].shadow).unwrap().contents();
        assert_ne!(shadow0, plain0);
        // Unprotected pages pass through verbatim.
        assert_eq!(
            mem.granule(region.pages[2].shadow).unwrap().contents(),
            mem.granule(region.pages[2].secure).unwrap().contents()
        );
        // Scribble over secure page 0 so the inbound copy is observable.
        mem.write(Requestor::Tmm, region.pages[0].secure, 0, &[0xEE; 16]).unwrap();
        // Tamper with shadow page 1.
        mem.write(Requestor::Host, region.pages[1].shadow, 100, &[0x55]).unwrap();
        let plain1 = *mem.granule(region.pages[1].secure).unwrap().contents();
        let back = sync
            .sync(&mut mem, &mut ledger, &cost, Direction::ShadowToSecure, &region,
                MappingPolicy::Direct, Some(&prot), &mut sidecar)
            .unwrap();
        assert_eq!(back.integrity_failures, 1);
        assert_eq!(mem.granule(region.pages[0].secure).unwrap().contents(), &plain0);
        assert_eq!(mem.granule(region.pages[1].secure).unwrap().contents(), &plain1);
        assert_eq!(ledger.counters().bytes_copied, 2 * 4 * 4096);
    }
}
