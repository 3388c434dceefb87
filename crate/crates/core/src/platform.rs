// SPDX-License-Identifier: Apache-2.0

//! The physical platform shared by the host and the monitor: memory, the
//! interrupt controller, a tick clock with programmable interrupt sources,
//! and the cost ledger.
//!
//! Every mutation the host makes goes through a `host_*` method and is
//! journaled so a recorded command trace can be replayed.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::mem::{
    Access, GranuleIdx, MemError, MemoryConfig, PhysicalMemory, Requestor, GRANULE_SIZE,
};
use crate::shadow::{CostLedger, TagSidecar};

/// Secure physical timer; group 0, always handled inside the monitor.
pub const SECURE_TIMER_INTID: u32 = 29;
/// Non-secure virtual timer interrupt.
pub const VTIMER_INTID: u32 = 27;
/// SGI used by the host to kick a CPU out of a running guest.
pub const KICK_SGI: u32 = 15;
pub const MAX_CPUS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    /// Secure group 0.
    G0,
    /// Non-secure group 1.
    G1,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize)]
pub struct Gic {
    pending: BTreeSet<(usize, u32)>,
    g0: BTreeSet<u32>,
}

impl Gic {
    pub fn group(&self, intid: u32) -> Group {
        if self.g0.contains(&intid) {
            Group::G0
        } else {
            Group::G1
        }
    }

    pub fn is_pending(&self, cpu: usize, intid: u32) -> bool {
        self.pending.contains(&(cpu, intid))
    }

    /// Lowest pending interrupt on `cpu`.
    pub fn highest_pending(&self, cpu: usize) -> Option<u32> {
        self.pending
            .range((cpu, 0)..(cpu + 1, 0))
            .next()
            .map(|&(_, i)| i)
    }

    pub fn pending(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.pending.iter().copied()
    }

    fn raise(&mut self, cpu: usize, intid: u32) {
        self.pending.insert((cpu, intid));
    }

    fn ack(&mut self, cpu: usize, intid: u32) -> bool {
        self.pending.remove(&(cpu, intid))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HostAction {
    Write {
        pa: u64,
        offset: u16,
        #[serde(with = "hex_string")]
        bytes: Vec<u8>,
    },
    Raise { cpu: usize, intid: u32 },
    Ack { cpu: usize, intid: u32 },
    Schedule { tick: u64, cpu: usize, intid: u32 },
    Idle { until: u64 },
}

mod hex_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlatformConfig {
    #[serde(default)]
    pub memory: MemoryConfig,
    #[serde(default = "default_cpus")]
    pub cpus: usize,
    /// Seed for the per-boot nonce and other platform randomness.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rot", with = "hex_array")]
    pub rot_seed: [u8; 32],
    #[serde(default = "default_firmware", with = "hex_array")]
    pub firmware: [u8; 32],
}

fn default_cpus() -> usize {
    2
}

fn default_rot() -> [u8; 32] {
    [0x5A; 32]
}

fn default_firmware() -> [u8; 32] {
    crate::tmm::measurement::sha256(b"tmm-sim firmware 1.0")
}

mod hex_array {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let v = hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)?;
        v.try_into()
            .map_err(|_| serde::de::Error::custom("expected 32 bytes"))
    }
}

impl Default for PlatformConfig {
    fn default() -> Self {
        PlatformConfig {
            memory: MemoryConfig::default(),
            cpus: default_cpus(),
            seed: 0,
            rot_seed: default_rot(),
            firmware: default_firmware(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Platform {
    pub(crate) mem: PhysicalMemory,
    pub(crate) gic: Gic,
    clock: u64,
    schedule: BTreeMap<u64, Vec<(usize, u32)>>,
    pub(crate) ledger: CostLedger,
    pub(crate) sidecar: TagSidecar,
    journal: Vec<HostAction>,
    cpus: usize,
}

impl Platform {
    pub fn new(cfg: &PlatformConfig) -> Result<Platform, MemError> {
        let mut gic = Gic::default();
        gic.g0.insert(SECURE_TIMER_INTID);
        Ok(Platform {
            mem: PhysicalMemory::new(&cfg.memory)?,
            gic,
            clock: 0,
            schedule: BTreeMap::new(),
            ledger: CostLedger::default(),
            sidecar: TagSidecar::default(),
            journal: Vec::new(),
            cpus: cfg.cpus.clamp(1, MAX_CPUS),
        })
    }

    pub fn mem(&self) -> &PhysicalMemory {
        &self.mem
    }

    pub fn gic(&self) -> &Gic {
        &self.gic
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut CostLedger {
        &mut self.ledger
    }

    pub fn sidecar(&self) -> &TagSidecar {
        &self.sidecar
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn cpus(&self) -> usize {
        self.cpus
    }

    pub fn next_scheduled(&self) -> Option<u64> {
        self.schedule.keys().next().copied()
    }

    pub(crate) fn take_journal(&mut self) -> Vec<HostAction> {
        std::mem::take(&mut self.journal)
    }

    /// Applies a journaled action (trace replay).
    pub fn apply(&mut self, action: &HostAction) {
        match action {
            HostAction::Write { pa, offset, bytes } => {
                let _ = self.host_write(GranuleIdx((*pa / GRANULE_SIZE as u64) as usize), usize::from(*offset), bytes);
            }
            HostAction::Raise { cpu, intid } => self.host_raise(*cpu, *intid),
            HostAction::Ack { cpu, intid } => {
                self.host_ack(*cpu, *intid);
            }
            HostAction::Schedule { tick, cpu, intid } => self.host_schedule(*tick, *cpu, *intid),
            HostAction::Idle { until } => self.host_idle_until(*until),
        }
    }

    pub fn host_read(&mut self, g: GranuleIdx) -> Result<[u8; GRANULE_SIZE], Access> {
        self.mem.read(Requestor::Host, g).copied()
    }

    pub fn host_write(&mut self, g: GranuleIdx, offset: usize, bytes: &[u8]) -> Result<(), Access> {
        self.journal.push(HostAction::Write {
            pa: g.addr(),
            offset: offset as u16,
            bytes: bytes.to_vec(),
        });
        self.mem.write(Requestor::Host, g, offset, bytes)
    }

    /// Asserts a physical interrupt (as a device would).
    pub fn host_raise(&mut self, cpu: usize, intid: u32) {
        self.journal.push(HostAction::Raise { cpu, intid });
        self.gic.raise(cpu % self.cpus, intid);
    }

    /// Acknowledges and deactivates a physical interrupt.
    pub fn host_ack(&mut self, cpu: usize, intid: u32) -> bool {
        self.journal.push(HostAction::Ack { cpu, intid });
        self.gic.ack(cpu, intid)
    }

    /// Programs an interrupt to fire when the clock reaches `tick`.
    pub fn host_schedule(&mut self, tick: u64, cpu: usize, intid: u32) {
        self.journal.push(HostAction::Schedule { tick, cpu, intid });
        self.schedule.entry(tick).or_default().push((cpu % self.cpus, intid));
        self.fire();
    }

    /// Lets time pass while no guest runs.
    pub fn host_idle_until(&mut self, until: u64) {
        self.journal.push(HostAction::Idle { until });
        self.clock = self.clock.max(until);
        self.fire();
    }

    pub(crate) fn tick(&mut self, n: u64) {
        self.clock += n;
        self.fire();
    }

    fn fire(&mut self) {
        while let Some(entry) = self.schedule.first_entry() {
            if *entry.key() > self.clock {
                break;
            }
            for (cpu, intid) in entry.remove() {
                self.gic.raise(cpu, intid);
            }
        }
    }

    pub(crate) fn monitor_ack(&mut self, cpu: usize, intid: u32) {
        self.gic.ack(cpu, intid);
    }

    pub(crate) fn fingerprint(&self, h: &mut impl Hasher) {
        self.mem.fingerprint(h);
        self.gic.hash(h);
        self.clock.hash(h);
        self.schedule.hash(h);
        self.sidecar.hash(h);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_fires_on_clock() {
        let mut p = Platform::new(&PlatformConfig::default()).unwrap();
        p.host_schedule(10, 1, VTIMER_INTID);
        p.tick(9);
        assert!(!p.gic.is_pending(1, VTIMER_INTID));
        p.tick(1);
        assert_eq!(p.gic.highest_pending(1), Some(VTIMER_INTID));
        assert_eq!(p.gic.highest_pending(0), None);
        assert!(p.host_ack(1, VTIMER_INTID));
        assert_eq!(p.take_journal().len(), 2);
    }

    #[test]
    fn config_serde_defaults() {
        let cfg: PlatformConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, PlatformConfig::default());
    }
}
