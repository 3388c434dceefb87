// SPDX-License-Identifier: Apache-2.0

mod common;

use std::collections::BTreeSet;

use common::boot;
use tmm_sim::guest::{Instr, PsciFunction};
use tmm_sim::host::{CvmSpec, HostEvent, HostPolicy, HostSim, Injection, VcpuSpec};
use tmm_sim::machine::Machine;
use tmm_sim::platform::{SECURE_TIMER_INTID, VTIMER_INTID};
use tmm_sim::tmm::{ExitReason, MonitorEvent, TraceEvent};

fn spec(programs: Vec<Vec<Instr>>) -> CvmSpec {
    let mut s = CvmSpec::single(vec![]);
    s.vcpus = programs
        .into_iter()
        .map(|program| VcpuSpec { entry: None, program })
        .collect();
    s
}

fn monitor_events(host: &HostSim) -> Vec<MonitorEvent> {
    host.machine().with(|_, t| t.events().to_vec())
}

/// Nothing the host raised ever reaches a guest except through a list
/// register the monitor wrote first, and every FIQ the monitor took either
/// became an IRQ exit or was handled as secure.
fn check_delivery(host: &HostSim) {
    let ev = monitor_events(host);
    let mut written = BTreeSet::new();
    for e in &ev {
        match e {
            MonitorEvent::LrWritten { tec, intid, .. } => {
                written.insert((*tec, *intid));
            }
            MonitorEvent::VirqHandled { tec, intid } => {
                assert!(written.remove(&(*tec, *intid)), "vIRQ {intid} without a list register");
            }
            _ => {}
        }
    }
    let fiqs = ev.iter().filter(|e| matches!(e, MonitorEvent::FiqTaken { .. })).count();
    let irq_exits = host
        .events()
        .iter()
        .filter(|e| matches!(e, HostEvent::Exit { info, .. } if info.reason == ExitReason::Irq))
        .count();
    assert_eq!(fiqs, irq_exits);
}

#[test]
fn timer_wakes_waiting_vcpu() {
    let (mut host, id) = boot(&spec(vec![vec![Instr::Wfi, Instr::Mark(1), Instr::Halt]]));
    host.schedule_interrupt(500, 0, VTIMER_INTID);
    let r = host.run(id, 100).unwrap();
    assert!(r.halted);
    assert_eq!(r.traces[&0], vec![TraceEvent::Virq(VTIMER_INTID), TraceEvent::Mark(1)]);
    assert_eq!(r.exits.get("wfi"), Some(&1));
    check_delivery(&host);
}

#[test]
fn timer_during_compute_exits_as_irq() {
    let (mut host, id) = boot(&spec(vec![vec![Instr::Compute(300), Instr::Mark(2), Instr::Halt]]));
    let now = host.machine().with(|p, _| p.clock());
    host.schedule_interrupt(now + 100, 0, VTIMER_INTID);
    let r = host.run(id, 100).unwrap();
    assert!(r.halted);
    assert_eq!(r.exits.get("irq"), Some(&1));
    assert_eq!(r.irq_round_trips, 1);
    assert!(r.traces[&0].contains(&TraceEvent::Virq(VTIMER_INTID)));
    assert!(monitor_events(&host).iter().any(|e| matches!(e, MonitorEvent::FiqTaken { intid, .. } if *intid == VTIMER_INTID)));
    check_delivery(&host);
}

#[test]
fn secure_timer_never_leaves_the_monitor() {
    let (mut host, id) = boot(&spec(vec![vec![Instr::Compute(300), Instr::Mark(3), Instr::Halt]]));
    let now = host.machine().with(|p, _| p.clock());
    host.schedule_interrupt(now + 50, 0, SECURE_TIMER_INTID);
    let r = host.run(id, 100).unwrap();
    assert!(r.halted);
    assert_eq!(r.exits.get("irq"), None);
    assert_eq!(r.traces[&0], vec![TraceEvent::Mark(3)]);
    let ev = monitor_events(&host);
    assert!(ev.iter().any(|e| matches!(e, MonitorEvent::SecureHandled { intid, .. } if *intid == SECURE_TIMER_INTID)));
    assert!(!ev.iter().any(|e| matches!(e, MonitorEvent::FiqTaken { .. })));
}

fn ipi_spec() -> CvmSpec {
    spec(vec![
        vec![
            Instr::Psci {
                function: PsciFunction::CpuOn,
                target: 1,
                entry: 0x10000,
            },
            Instr::SendIpi { target: 1, intid: 5 },
            Instr::Psci {
                function: PsciFunction::CpuOff,
                target: 0,
                entry: 0,
            },
        ],
        vec![Instr::Compute(5_000), Instr::Mark(9), Instr::Halt],
    ])
}

#[test]
fn ipi_costs_two_round_trips() {
    let s = ipi_spec();
    let (mut host, id) = boot(&s);
    let r = host.run(id, 100).unwrap();
    assert!(r.halted, "{r:?}");
    assert_eq!(r.irq_round_trips, 2);
    let t1 = &r.traces[&1];
    assert_eq!(t1.first(), Some(&TraceEvent::Virq(5)));
    assert_eq!(t1.last(), Some(&TraceEvent::Mark(9)));
    check_delivery(&host);
}

#[test]
fn cpu_on_brings_up_second_vcpu() {
    let (mut host, id) = boot(&spec(vec![
        vec![
            Instr::Psci {
                function: PsciFunction::CpuOn,
                target: 1,
                entry: 0x10000,
            },
            Instr::Psci {
                function: PsciFunction::CpuOff,
                target: 0,
                entry: 0,
            },
        ],
        vec![Instr::Mark(11), Instr::Halt],
    ]));
    let tecs = host.tec_ids(id);
    let runnable = |h: &HostSim, i: usize| h.machine().with(|_, t| t.tec(tecs[i]).unwrap().runnable);
    assert!(runnable(&host, 0));
    assert!(!runnable(&host, 1));
    let r = host.run(id, 100).unwrap();
    assert!(r.halted);
    assert!(r.traces[&0].iter().any(|e| matches!(e, TraceEvent::PsciDone { function: PsciFunction::CpuOn, status: 0 })));
    assert_eq!(r.traces[&1], vec![TraceEvent::Mark(11)]);
}

#[test]
fn cpu_on_self_is_refused() {
    let (mut host, id) = boot(&spec(vec![vec![
        Instr::Psci {
            function: PsciFunction::CpuOn,
            target: 0,
            entry: 0,
        },
        Instr::Halt,
    ]]));
    let r = host.run(id, 10).unwrap();
    assert!(r.halted);
    assert_eq!(r.exits.get("psci"), None);
}

#[test]
fn dropped_interrupt_deadlocks_without_violation() {
    let m = Machine::new(&Default::default(), Default::default()).unwrap();
    let policy = HostPolicy {
        injection: Injection::Drop(BTreeSet::from([VTIMER_INTID])),
        ..HostPolicy::default()
    };
    let mut host = HostSim::new(m, policy);
    let id = host.boot_cvm(&spec(vec![vec![Instr::Wfi, Instr::Mark(1), Instr::Halt]])).unwrap();
    host.schedule_interrupt(200, 0, VTIMER_INTID);
    let r = host.run(id, 100).unwrap();
    assert!(r.deadlock && !r.halted);
    assert!(r.traces[&0].is_empty());
    host.machine().with(|p, t| {
        p.mem().check_invariants().unwrap();
        t.check_ttt_soundness(p).unwrap();
    });
    check_delivery(&host);
}

/// More pending vIRQs than list registers: the host keeps the overflow and
/// every one is delivered eventually, each through a list register.
#[test]
fn list_register_overflow_is_retained() {
    let (mut host, id) = boot(&spec(vec![vec![Instr::Compute(3_000), Instr::Mark(1), Instr::Halt]]));
    let now = host.machine().with(|p, _| p.clock());
    let ids = [40u32, 41, 42, 43, 44, 45];
    for (i, intid) in ids.iter().enumerate() {
        host.schedule_interrupt(now + 10 + i as u64, 0, *intid);
    }
    let r = host.run(id, 200).unwrap();
    assert!(r.halted);
    let got: BTreeSet<u32> = r.traces[&0]
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Virq(i) => Some(*i),
            _ => None,
        })
        .collect();
    assert_eq!(got, BTreeSet::from(ids));
    check_delivery(&host);
}
