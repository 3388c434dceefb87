// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use super::cost::LatencyConstants;
use crate::mem::MappingPolicy;

/// Event counters. All counters only ever grow within a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Normal/secure world-switch round trips.
    pub world_switch: u64,
    pub tlb_flush: u64,
    pub stage2_map: u64,
    pub stage2_unmap: u64,
    pub tmi_calls: u64,
    /// Two per round trip: the host's SMC in and the monitor's SMC back out.
    pub smc_calls: u64,
    pub bytes_copied: u64,
    /// `tmi_tec_enter` calls that ran guest code and came back with an exit.
    pub cvm_exits: u64,
    /// Exits whose handling was interrupt emulation.
    pub irq_round_trips: u64,
    /// Shadow transfers (one per sync call).
    pub transfers: u64,
    /// Delegate/undelegate calls (dynamic policy).
    pub delegations: u64,
}

/// Counts the events that make up the cost of a run. Simulated latency is
/// `sum(counter * constant) + accumulated copy cost`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    counters: Counters,
    copy_us: f64,
}

impl CostLedger {
    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn copy_us(&self) -> f64 {
        self.copy_us
    }

    pub(crate) fn record_tmi(&mut self) {
        self.counters.tmi_calls += 1;
        self.counters.world_switch += 1;
        self.counters.smc_calls += 2;
    }

    pub(crate) fn record_exit(&mut self) {
        self.counters.cvm_exits += 1;
    }

    /// The granule protection table lives in EL3, so every delegation change
    /// costs an extra world switch and a TLB invalidation.
    pub(crate) fn record_delegation(&mut self) {
        self.counters.delegations += 1;
        self.counters.world_switch += 1;
        self.counters.tlb_flush += 1;
    }

    pub(crate) fn record_tlb_flush(&mut self) {
        self.counters.tlb_flush += 1;
    }

    pub fn record_irq_round_trip(&mut self) {
        self.counters.irq_round_trips += 1;
    }

    pub(crate) fn record_transfer(&mut self, policy: MappingPolicy, bytes: u64, copy_us: f64) {
        self.counters.transfers += 1;
        self.counters.bytes_copied += bytes;
        self.copy_us += copy_us;
        if policy == MappingPolicy::Dynamic {
            self.counters.stage2_map += 1;
            self.counters.stage2_unmap += 1;
            self.counters.tlb_flush += 1;
        }
    }

    /// Simulated latency of everything recorded so far, in microseconds.
    pub fn simulated_latency(&self, k: &LatencyConstants) -> f64 {
        let c = &self.counters;
        c.world_switch as f64 * k.world_switch_us
            + c.cvm_exits as f64 * (k.tec_context_copy_us + k.guest_trap_us + k.exit_residual_us)
            + c.tlb_flush as f64 * k.tlb_flush_us
            + c.stage2_map as f64 * k.stage2_map_us
            + c.stage2_unmap as f64 * k.stage2_unmap_us
            + self.copy_us
    }

    /// Counter-wise difference `self - earlier`.
    pub fn since(&self, earlier: &CostLedger) -> CostLedger {
        let a = &self.counters;
        let b = &earlier.counters;
        CostLedger {
            counters: Counters {
                world_switch: a.world_switch - b.world_switch,
                tlb_flush: a.tlb_flush - b.tlb_flush,
                stage2_map: a.stage2_map - b.stage2_map,
                stage2_unmap: a.stage2_unmap - b.stage2_unmap,
                tmi_calls: a.tmi_calls - b.tmi_calls,
                smc_calls: a.smc_calls - b.smc_calls,
                bytes_copied: a.bytes_copied - b.bytes_copied,
                cvm_exits: a.cvm_exits - b.cvm_exits,
                irq_round_trips: a.irq_round_trips - b.irq_round_trips,
                transfers: a.transfers - b.transfers,
                delegations: a.delegations - b.delegations,
            },
            copy_us: self.copy_us - earlier.copy_us,
        }
    }
}
