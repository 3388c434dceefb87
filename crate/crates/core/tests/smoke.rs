// SPDX-License-Identifier: Apache-2.0

use tmm_sim::guest::Instr;
use tmm_sim::host::{CvmSpec, HostEvent, HostPolicy, HostSim};
use tmm_sim::machine::Machine;
use tmm_sim::platform::PlatformConfig;
use tmm_sim::tmm::{TmmOptions, TraceEvent};

#[test]
fn boot_run_halt() {
    let m = Machine::new(&PlatformConfig::default(), TmmOptions::default()).unwrap();
    let mut host = HostSim::new(m.clone(), HostPolicy::default());
    let id = host
        .boot_cvm(&CvmSpec::single(vec![Instr::Mark(7), Instr::Compute(50), Instr::Mark(8), Instr::Halt]))
        .unwrap();
    let steps: Vec<u8> = host
        .events()
        .iter()
        .filter_map(|e| match e {
            HostEvent::BootStep { step, .. } => Some(*step),
            _ => None,
        })
        .collect();
    assert_eq!(steps, [1, 2, 3, 4]);
    let r = host.run(id, 100).unwrap();
    assert!(r.halted, "{r:?}");
    assert_eq!(r.traces[&0], [TraceEvent::Mark(7), TraceEvent::Mark(8)]);
    m.with(|p, _| p.mem().check_invariants()).unwrap();
}
