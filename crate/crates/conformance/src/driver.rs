// SPDX-License-Identifier: Apache-2.0

//! Command-level driver used by the cases and the fuzzer: issues TMIs
//! directly and stages host pages from the top of normal memory down.

use std::cell::Cell;

use tmm_sim::mem::{CvmId, GranuleIdx, MappingPolicy, MemoryConfig, TzascConfig, GRANULE_SIZE};
use tmm_sim::platform::PlatformConfig;
use tmm_sim::machine::Machine;
use tmm_sim::tmm::cvm::CvmParams;
use tmm_sim::tmm::{TecId, TmiCommand, TmiResponse, TmiStatus};

pub const PAGE: u64 = GRANULE_SIZE as u64;

pub fn platform(granules: usize, secure: usize, policy: MappingPolicy) -> PlatformConfig {
    PlatformConfig {
        memory: MemoryConfig {
            granules,
            tzasc: match policy {
                MappingPolicy::Direct => TzascConfig::split(granules, secure),
                MappingPolicy::Dynamic => TzascConfig::split(granules, 0),
            },
            policy,
        },
        ..PlatformConfig::default()
    }
}

pub struct Rig {
    pub m: Machine,
    next_ns: Cell<usize>,
    floor: usize,
}

impl Rig {
    pub fn new(m: Machine) -> Rig {
        let (top, floor) = m.with(|p, _| {
            let t = &p.mem();
            let floor = t
                .iter()
                .filter(|(_, g)| g.world() == tmm_sim::mem::World::Secure)
                .map(|(i, _)| i.0 + 1)
                .max()
                .unwrap_or(0);
            (t.len(), floor)
        });
        Rig {
            m,
            next_ns: Cell::new(top),
            floor,
        }
    }

    pub fn call(&self, cmd: TmiCommand, args: &[u64]) -> TmiResponse {
        self.m.call(0, cmd, args)
    }

    pub fn expect(&self, cmd: TmiCommand, args: &[u64], want: TmiStatus) -> Result<[u64; 4], String> {
        let r = self.call(cmd, args);
        if r.status != want {
            return Err(format!("{} {:x?}: {:?} (expected {want:?})", cmd.name(), args, r.status));
        }
        Ok(r.results)
    }

    pub fn ok(&self, cmd: TmiCommand, args: &[u64]) -> Result<[u64; 4], String> {
        self.expect(cmd, args, TmiStatus::Success)
    }

    pub fn policy(&self) -> MappingPolicy {
        self.m.with(|p, _| p.mem().policy())
    }

    /// `n` contiguous normal granules, never handed out twice.
    pub fn ns_run(&self, n: usize) -> Result<GranuleIdx, String> {
        let top = self.next_ns.get();
        if top < self.floor + n {
            return Err("driver ran out of normal memory".into());
        }
        self.next_ns.set(top - n);
        Ok(GranuleIdx(top - n))
    }

    pub fn ns(&self) -> Result<GranuleIdx, String> {
        self.ns_run(1)
    }

    pub fn write(&self, g: GranuleIdx, bytes: &[u8]) -> Result<(), String> {
        self.m
            .with(|p, _| p.host_write(g, 0, bytes))
            .map_err(|_| format!("host write to {g} faulted"))
    }

    pub fn delegate(&self, n: usize) -> Result<(), String> {
        for _ in 0..n {
            let g = self.ns()?;
            self.ok(TmiCommand::GranuleDelegate, &[g.addr()])?;
        }
        Ok(())
    }

    /// Creates a cVM; `count` is the region size under the direct policy and
    /// the number of granules delegated up front under the dynamic one.
    pub fn create(&self, params: &CvmParams, count: usize) -> Result<CvmId, String> {
        let g = self.ns()?;
        self.write(g, &params.encode())?;
        let mut shadow = 0;
        if self.policy() == MappingPolicy::Dynamic {
            if params.io_window_pages > 0 {
                shadow = self.ns_run(params.io_window_pages as usize)?.addr();
            }
            self.delegate(count)?;
        }
        let r = self.ok(TmiCommand::CreateCvm, &[g.addr(), count as u64, shadow])?;
        Ok(CvmId(r[0] as u32))
    }

    /// Any missing tables down to the leaf level for `ipa`.
    pub fn tables(&self, cvm: CvmId, ipa: u64) -> Result<(), String> {
        for level in 1..=3u64 {
            let span = 1u64 << (12 + 9 * (4 - level));
            let r = self.call(TmiCommand::CreateTtt, &[u64::from(cvm.0), ipa / span * span, level]);
            if !matches!(r.status, TmiStatus::Success | TmiStatus::ErrorInput) {
                return Err(format!("create_ttt level {level}: {:?}", r.status));
            }
        }
        Ok(())
    }

    pub fn data(&self, cvm: CvmId, ipa: u64, bytes: &[u8]) -> Result<GranuleIdx, String> {
        let src = self.ns()?;
        self.write(src, bytes)?;
        self.tables(cvm, ipa)?;
        self.ok(TmiCommand::DataCreate, &[u64::from(cvm.0), ipa, src.addr()])?;
        Ok(src)
    }

    pub fn tec(&self, cvm: CvmId, pc: u64) -> Result<TecId, String> {
        let g = self.ns()?;
        self.write(g, &pc.to_le_bytes())?;
        Ok(TecId(self.ok(TmiCommand::TecCreate, &[u64::from(cvm.0), g.addr()])?[0] as u32))
    }
}
