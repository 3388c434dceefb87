// SPDX-License-Identifier: Apache-2.0

//! Execution contexts and the host-visible entry/exit records.
//!
//! The host passes a run page (a normal granule) to `tec_enter`. Offset 0
//! holds the entry record the host fills in, offset [`EXIT_OFFSET`] the exit
//! record the monitor writes back. Both are sequences of u64 little-endian
//! words.
//!
//! Entry: `flags` (bit 0: the last MMIO abort was emulated), `mmio_value`,
//! `results[7]` (host call results), `lr[4]`.
//! Exit: `reason`, `ipa`, `flags` (bit 0: write), `value`, `args[7]`,
//! `psci_function`, `psci_target`, `psci_entry`, `lr[4]`.
//! A list register word is 0 when empty, else `1 << 63 | intid`.

use serde::{Deserialize, Serialize};

use crate::guest::PsciFunction;
use crate::mem::{CvmId, GranuleIdx};
use crate::tsi::{TokenRetrieval, TsiFunction, TsiStatus};

pub const EXIT_OFFSET: usize = 0x800;
pub const ENTRY_WORDS: usize = 13;
pub const EXIT_WORDS: usize = 18;
pub const NUM_LRS: usize = 4;
pub const ENTRY_EMULATED_MMIO: u64 = 1;
const LR_VALID: u64 = 1 << 63;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TecId(pub u32);

impl std::fmt::Display for TecId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "tec{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExitReason {
    Irq = 0,
    HostCall = 1,
    Psci = 2,
    DataAbort = 3,
    SystemOff = 4,
    Quantum = 5,
    /// The guest is idle waiting for an interrupt.
    Wfi = 6,
}

impl ExitReason {
    pub fn from_code(c: u64) -> Option<ExitReason> {
        use ExitReason::*;
        [Irq, HostCall, Psci, DataAbort, SystemOff, Quantum, Wfi]
            .into_iter()
            .find(|r| *r as u64 == c)
    }
}

pub fn encode_lr(lr: Option<u32>) -> u64 {
    lr.map_or(0, |i| LR_VALID | u64::from(i))
}

pub fn decode_lr(w: u64) -> Option<u32> {
    (w & LR_VALID != 0).then_some(w as u32)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TecEntry {
    pub emulated_mmio: bool,
    pub mmio_value: u64,
    pub results: [u64; 7],
    pub lrs: [Option<u32>; NUM_LRS],
}

impl TecEntry {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = vec![u64::from(self.emulated_mmio), self.mmio_value];
        w.extend_from_slice(&self.results);
        w.extend(self.lrs.iter().map(|l| encode_lr(*l)));
        w.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn decode(b: &[u8]) -> TecEntry {
        let w = words(b, ENTRY_WORDS);
        TecEntry {
            emulated_mmio: w[0] & ENTRY_EMULATED_MMIO != 0,
            mmio_value: w[1],
            results: w[2..9].try_into().unwrap(),
            lrs: [decode_lr(w[9]), decode_lr(w[10]), decode_lr(w[11]), decode_lr(w[12])],
        }
    }
}

fn words(b: &[u8], n: usize) -> Vec<u64> {
    (0..n)
        .map(|i| u64::from_le_bytes(b[i * 8..i * 8 + 8].try_into().unwrap()))
        .collect()
}

/// What the host learns about an exit. Only these fields leave the monitor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExitInfo {
    pub reason: ExitReason,
    pub ipa: u64,
    pub is_write: bool,
    pub value: u64,
    pub args: [u64; 7],
    pub psci_function: u64,
    pub psci_target: u64,
    pub psci_entry: u64,
    pub lrs: [Option<u32>; NUM_LRS],
}

impl ExitInfo {
    pub fn new(reason: ExitReason) -> ExitInfo {
        ExitInfo {
            reason,
            ipa: 0,
            is_write: false,
            value: 0,
            args: [0; 7],
            psci_function: 0,
            psci_target: 0,
            psci_entry: 0,
            lrs: [None; NUM_LRS],
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = vec![self.reason as u64, self.ipa, u64::from(self.is_write), self.value];
        w.extend_from_slice(&self.args);
        w.extend_from_slice(&[self.psci_function, self.psci_target, self.psci_entry]);
        w.extend(self.lrs.iter().map(|l| encode_lr(*l)));
        w.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn decode(b: &[u8]) -> Option<ExitInfo> {
        let w = words(b, EXIT_WORDS);
        Some(ExitInfo {
            reason: ExitReason::from_code(w[0])?,
            ipa: w[1],
            is_write: w[2] & 1 != 0,
            value: w[3],
            args: w[4..11].try_into().unwrap(),
            psci_function: w[11],
            psci_target: w[12],
            psci_entry: w[13],
            lrs: [decode_lr(w[14]), decode_lr(w[15]), decode_lr(w[16]), decode_lr(w[17])],
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct PsciRecord {
    pub function: PsciFunction,
    pub target: u8,
    pub entry: u64,
}

/// An access that left the guest; completed or retried on the next entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct PendingAbort {
    pub ipa: u64,
    pub is_write: bool,
    /// Length of the faulting instruction, skipped when the host emulated it.
    pub len: u64,
    /// Register receiving an emulated load.
    pub dest: Option<u8>,
}

/// Observable guest behaviour, kept for tests and reports.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEvent {
    Virq(u32),
    Read { ipa: u64, bytes: Vec<u8> },
    Mmio { ipa: u64, value: u64 },
    HostCallReturn([u64; 7]),
    Tsi {
        function: TsiFunction,
        status: TsiStatus,
        results: [u64; 4],
    },
    Feature { reg: u8, value: u64 },
    PsciDone { function: PsciFunction, status: u64 },
    Protect { ok: bool },
    Mark(u64),
    Fault { ipa: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Tec {
    pub id: TecId,
    pub cvm: CvmId,
    pub index: u8,
    pub granule: GranuleIdx,
    pub runnable: bool,
    pub gprs: [u64; 31],
    pub pc: u64,
    pub compute_left: u64,
    pub pending_host_call: bool,
    pub pending_psci: Option<PsciRecord>,
    pub pending_abort: Option<PendingAbort>,
    pub lrs: [Option<u32>; NUM_LRS],
    pub wfi: bool,
    pub retrieval: Option<TokenRetrieval>,
    pub trace: Vec<TraceEvent>,
}

impl Tec {
    pub(crate) fn new(id: TecId, cvm: CvmId, index: u8, granule: GranuleIdx, pc: u64) -> Tec {
        Tec {
            id,
            cvm,
            index,
            granule,
            runnable: index == 0,
            gprs: [0; 31],
            pc,
            compute_left: 0,
            pending_host_call: false,
            pending_psci: None,
            pending_abort: None,
            lrs: [None; NUM_LRS],
            wfi: false,
            retrieval: None,
            trace: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip() {
        let e = TecEntry {
            emulated_mmio: true,
            mmio_value: 5,
            results: [1, 2, 3, 4, 5, 6, 7],
            lrs: [Some(27), None, Some(0), None],
        };
        assert_eq!(TecEntry::decode(&e.encode()), e);
        let mut x = ExitInfo::new(ExitReason::DataAbort);
        x.ipa = 0x1000;
        x.is_write = true;
        x.lrs[1] = Some(40);
        assert_eq!(x.encode().len(), EXIT_WORDS * 8);
        assert_eq!(ExitInfo::decode(&x.encode()), Some(x));
    }
}
