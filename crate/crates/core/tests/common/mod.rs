// SPDX-License-Identifier: Apache-2.0
#![allow(dead_code)]

use std::cell::Cell;

use tmm_sim::machine::Machine;
use tmm_sim::mem::{CvmId, GranuleIdx, MappingPolicy, MemoryConfig, TzascConfig, GRANULE_SIZE};
use tmm_sim::platform::PlatformConfig;
use tmm_sim::tmm::cvm::CvmParams;
use tmm_sim::tmm::{TecId, TmiCommand, TmiResponse, TmiStatus, TmmOptions};

pub const PAGE: u64 = GRANULE_SIZE as u64;

pub fn config(granules: usize, secure: usize, policy: MappingPolicy) -> PlatformConfig {
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

/// Drives the monitor directly at the command level.
pub struct Rig {
    pub m: Machine,
    next_ns: Cell<usize>,
}

impl Rig {
    pub fn new(cfg: &PlatformConfig, opts: TmmOptions) -> Rig {
        let m = Machine::new(cfg, opts).unwrap();
        Rig {
            m,
            next_ns: Cell::new(cfg.memory.granules),
        }
    }

    pub fn direct() -> Rig {
        Rig::new(&config(2048, 1024, MappingPolicy::Direct), TmmOptions::default())
    }

    pub fn dynamic() -> Rig {
        Rig::new(&config(2048, 0, MappingPolicy::Dynamic), TmmOptions::default())
    }

    pub fn call(&self, cmd: TmiCommand, args: &[u64]) -> TmiResponse {
        self.m.call(0, cmd, args)
    }

    #[track_caller]
    pub fn ok(&self, cmd: TmiCommand, args: &[u64]) -> [u64; 4] {
        let r = self.call(cmd, args);
        assert_eq!(r.status, TmiStatus::Success, "{} {:x?}", cmd.name(), args);
        r.results
    }

    #[track_caller]
    pub fn status(&self, cmd: TmiCommand, args: &[u64]) -> TmiStatus {
        self.call(cmd, args).status
    }

    /// A fresh normal granule, taken from the top of memory.
    pub fn ns(&self) -> GranuleIdx {
        let g = self.next_ns.get() - 1;
        self.next_ns.set(g);
        GranuleIdx(g)
    }

    /// `n` contiguous normal granules.
    pub fn ns_run(&self, n: usize) -> GranuleIdx {
        let g = self.next_ns.get() - n;
        self.next_ns.set(g);
        GranuleIdx(g)
    }

    pub fn write(&self, g: GranuleIdx, offset: usize, bytes: &[u8]) {
        self.m.with(|p, _| p.host_write(g, offset, bytes)).unwrap();
    }

    pub fn create(&self, params: &CvmParams, count: u64) -> CvmId {
        let g = self.ns();
        self.write(g, 0, &params.encode());
        let shadow = if self.policy() == MappingPolicy::Dynamic && params.io_window_pages > 0 {
            self.ns_run(params.io_window_pages as usize).addr()
        } else {
            0
        };
        if self.policy() == MappingPolicy::Dynamic {
            self.delegate(count as usize);
        }
        CvmId(self.ok(TmiCommand::CreateCvm, &[g.addr(), count, shadow])[0] as u32)
    }

    pub fn delegate(&self, n: usize) {
        for _ in 0..n {
            let g = self.ns();
            self.ok(TmiCommand::GranuleDelegate, &[g.addr()]);
        }
    }

    pub fn policy(&self) -> MappingPolicy {
        self.m.with(|p, _| p.mem().policy())
    }

    /// Creates any missing table on the walk to `ipa`'s leaf.
    pub fn tables(&self, cvm: CvmId, ipa: u64) {
        for level in 1..=3u64 {
            let span = 1u64 << (12 + 9 * (4 - level));
            let r = self.call(TmiCommand::CreateTtt, &[u64::from(cvm.0), ipa / span * span, level]);
            assert!(matches!(r.status, TmiStatus::Success | TmiStatus::ErrorInput), "{r:?}");
        }
    }

    pub fn data(&self, cvm: CvmId, ipa: u64, bytes: &[u8]) {
        let src = self.ns();
        self.write(src, 0, bytes);
        self.tables(cvm, ipa);
        self.ok(TmiCommand::DataCreate, &[u64::from(cvm.0), ipa, src.addr()]);
    }

    pub fn tec(&self, cvm: CvmId, pc: u64) -> TecId {
        let g = self.ns();
        self.write(g, 0, &pc.to_le_bytes());
        TecId(self.ok(TmiCommand::TecCreate, &[u64::from(cvm.0), g.addr()])[0] as u32)
    }

    pub fn measurement(&self, cvm: CvmId) -> [u8; 32] {
        self.m.with(|_, t| t.cvm(cvm).unwrap().measurement_value())
    }
}

pub fn boot(spec: &tmm_sim::host::CvmSpec) -> (tmm_sim::host::HostSim, CvmId) {
    boot_with(&PlatformConfig::default(), TmmOptions::default(), spec)
}

pub fn boot_with(
    cfg: &PlatformConfig,
    opts: TmmOptions,
    spec: &tmm_sim::host::CvmSpec,
) -> (tmm_sim::host::HostSim, CvmId) {
    let m = Machine::new(cfg, opts).unwrap();
    let mut host = tmm_sim::host::HostSim::new(m, tmm_sim::host::HostPolicy::default());
    let id = host.boot_cvm(spec).unwrap();
    (host, id)
}
