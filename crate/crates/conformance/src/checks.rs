// SPDX-License-Identifier: Apache-2.0

//! Whole-run checks shared by scenarios, cases and the fuzzer.

use std::collections::BTreeMap;

use tmm_sim::host::HostEvent;
use tmm_sim::machine::Machine;
use tmm_sim::tmm::{ExitReason, MonitorEvent, TecId, TraceEvent};
use tmm_sim::tsi::{TsiFunction, TsiStatus};

/// Memory invariants plus translation-table soundness.
pub fn machine_invariants(m: &Machine) -> Result<(), String> {
    m.with(|p, t| {
        p.mem().check_invariants()?;
        t.check_ttt_soundness(p)
    })
}

/// Interrupt delivery rules: every vIRQ a guest handled went through a list
/// register written before it, and every physical interrupt taken while a
/// guest ran reached the host as an IRQ exit. Returns the violations.
pub fn delivery_violations(monitor: &[MonitorEvent], host: &[HostEvent]) -> Vec<String> {
    let mut out = Vec::new();
    let mut written: BTreeMap<(TecId, u32), usize> = BTreeMap::new();
    for e in monitor {
        match e {
            MonitorEvent::LrWritten { tec, intid, .. } => *written.entry((*tec, *intid)).or_default() += 1,
            MonitorEvent::VirqHandled { tec, intid } => match written.get_mut(&(*tec, *intid)) {
                Some(n) if *n > 0 => *n -= 1,
                _ => out.push(format!("{tec} handled vIRQ {intid} with no list register write")),
            },
            _ => {}
        }
    }
    let taken = monitor.iter().filter(|e| matches!(e, MonitorEvent::FiqTaken { .. })).count();
    let irq_exits = host
        .iter()
        .filter(|e| matches!(e, HostEvent::Exit { info, .. } if info.reason == ExitReason::Irq))
        .count();
    if taken != irq_exits {
        out.push(format!("{taken} interrupts taken but {irq_exits} IRQ exits reported"));
    }
    out
}

/// Token bytes a guest retrieved and then read back, from its trace.
pub fn token_from_trace(trace: &[TraceEvent]) -> Option<Vec<u8>> {
    let done = trace.iter().rposition(|e| {
        matches!(
            e,
            TraceEvent::Tsi {
                function: TsiFunction::AttestationTokenContinue,
                status: TsiStatus::Success,
                ..
            }
        )
    })?;
    let TraceEvent::Tsi { results, .. } = &trace[done] else { unreachable!() };
    let total = results[1] as usize;
    trace[done..].iter().find_map(|e| match e {
        TraceEvent::Read { bytes, .. } if bytes.len() >= total => Some(bytes[..total].to_vec()),
        _ => None,
    })
}
