// SPDX-License-Identifier: Apache-2.0

mod common;

use common::{boot_with, Rig, PAGE};
use tmm_sim::guest::Instr;
use tmm_sim::host::{CvmSpec, HostEvent, HostPolicy, HostSim};
use tmm_sim::machine::Machine;
use tmm_sim::mem::{Access, AccessMode, CvmId, GranuleIdx, Requestor, World, TZASC_MAX_REGIONS};
use tmm_sim::platform::PlatformConfig;
use tmm_sim::tmm::cvm::{CvmParams, CvmState};
use tmm_sim::tmm::{TmiCommand, TmiStatus, TmmOptions};

fn small(mark: u64) -> CvmSpec {
    CvmSpec::single(vec![
        Instr::MemWrite {
            ipa: 0x3000,
            bytes: vec![mark as u8; 128],
        },
        Instr::Mark(mark),
        Instr::Wfi,
    ])
}

#[test]
fn thirty_two_cvms_share_one_secure_region() {
    let m = Machine::new(&PlatformConfig::default(), TmmOptions::default()).unwrap();
    let mut host = HostSim::new(m.clone(), HostPolicy::default());
    let ids: Vec<CvmId> = (0..32).map(|i| host.boot_cvm(&small(i)).unwrap()).collect();
    m.with(|p, t| {
        assert_eq!(p.mem().tzasc().regions.len(), 2);
        assert!(p.mem().tzasc().regions.len() <= TZASC_MAX_REGIONS);
        for id in &ids {
            assert_eq!(t.cvm_state(*id), CvmState::Active);
        }
        p.mem().check_invariants().unwrap();
    });
    for id in &ids {
        host.run(*id, 20).unwrap();
    }
    m.with(|p, t| {
        p.mem().check_invariants().unwrap();
        t.check_ttt_soundness(p).unwrap();
        // No cVM can touch another's memory.
        for (g, granule) in p.mem().iter() {
            let Some(owner) = granule.owner() else { continue };
            for id in ids.iter().filter(|id| **id != owner) {
                assert_eq!(p.mem().check_access(Requestor::Cvm(*id), g, AccessMode::Read), Access::Fault);
            }
            assert_eq!(p.mem().check_access(Requestor::Host, g, AccessMode::Read), Access::Fault);
        }
    });
}

#[test]
fn host_cannot_read_or_write_secure_memory() {
    let m = Machine::new(&PlatformConfig::default(), TmmOptions::default()).unwrap();
    let mut host = HostSim::new(m.clone(), HostPolicy::default());
    let id = host.boot_cvm(&small(7)).unwrap();
    host.run(id, 20).unwrap();
    m.with(|p, _| {
        let secure: Vec<GranuleIdx> = p
            .mem()
            .iter()
            .filter(|(_, g)| g.world() == World::Secure)
            .map(|(i, _)| i)
            .collect();
        assert!(!secure.is_empty());
        let before = p.mem().audit();
        for g in &secure {
            assert!(p.host_read(*g).is_err());
            assert!(p.host_write(*g, 0, &[1]).is_err());
        }
        let after = p.mem().audit();
        assert_eq!(after.host_faults - before.host_faults, 2 * secure.len() as u64);
        p.mem().check_invariants().unwrap();
    });
}

/// The host cannot hand the monitor secure memory as a source or target.
#[test]
fn host_supplied_addresses_are_checked() {
    let rig = Rig::direct();
    let a = rig.create(&CvmParams::default(), 64);
    let b = rig.create(&CvmParams::default(), 64);
    rig.data(a, 0, b"secret");
    let a_page = rig.m.with(|p, t| {
        tmm_sim::tmm::ttt::translate(p.mem(), t.cvm(a).unwrap().ttt_root, 0).unwrap().0
    });
    rig.tables(b, 0);
    for cmd in [TmiCommand::DataCreate] {
        let st = rig.status(cmd, &[u64::from(b.0), 0, a_page.addr()]);
        assert_ne!(st, TmiStatus::Success);
    }
    let st = rig.status(TmiCommand::MapProtected, &[u64::from(b.0), 0x1000, a_page.addr()]);
    assert_ne!(st, TmiStatus::Success);
    let st = rig.status(TmiCommand::MapUnprotected, &[u64::from(b.0), 0x2000, a_page.addr()]);
    assert_ne!(st, TmiStatus::Success);
    rig.m.with(|p, t| {
        p.mem().check_invariants().unwrap();
        t.check_ttt_soundness(p).unwrap();
    });
}

fn destroy_leaves(opts: TmmOptions) -> Result<(), String> {
    let (mut host, id) = boot_with(&PlatformConfig::default(), opts, &small(0x5a));
    let r = host.run(id, 20).unwrap();
    assert!(r.deadlock);
    host.destroy(id).unwrap();
    host.machine().with(|p, t| {
        assert_eq!(t.cvm_state(id), CvmState::Null);
        p.mem().check_invariants()
    })
}

#[test]
fn destroy_zeroes_everything() {
    destroy_leaves(TmmOptions::default()).unwrap();
}

#[test]
fn skipping_zeroing_is_detected() {
    let opts = TmmOptions {
        skip_zero_on_destroy: true,
        ..TmmOptions::default()
    };
    let e = destroy_leaves(opts).unwrap_err();
    assert!(e.contains("stale"), "{e}");
}

#[test]
fn destroy_walks_states() {
    let (mut host, id) = boot_with(&PlatformConfig::default(), TmmOptions::default(), &small(1));
    host.run(id, 5).unwrap();
    host.destroy(id).unwrap();
    let states: Vec<_> = host.machine().with(|_, t| {
        t.events()
            .iter()
            .filter_map(|e| match e {
                tmm_sim::tmm::MonitorEvent::StateChange { cvm, from, to } if *cvm == id => Some((*from, *to)),
                _ => None,
            })
            .collect()
    });
    use CvmState::*;
    assert_eq!(states, vec![(Null, New), (New, Active), (Active, SystemOff), (SystemOff, Null)]);
}

fn exits_of(program: Vec<Instr>) -> Vec<tmm_sim::tmm::ExitInfo> {
    let (mut host, id) = boot_with(&PlatformConfig::default(), TmmOptions::default(), &CvmSpec::single(program));
    host.run(id, 20).unwrap();
    host.events()
        .iter()
        .filter_map(|e| match e {
            HostEvent::Exit { info, .. } => Some(*info),
            _ => None,
        })
        .collect()
}

/// Registers outside the sanctioned exit fields never show up in what the
/// host sees.
#[test]
fn exit_information_is_scrubbed() {
    let program = |secret: u64| {
        let mut p: Vec<Instr> = (7..31).map(|reg| Instr::SetReg { reg, value: secret ^ u64::from(reg) }).collect();
        p.push(Instr::HostCall([1, 2, 3, 4, 5, 6, 7]));
        p.push(Instr::MmioRead { ipa: 0xFC10_0000 });
        p.push(Instr::Wfi);
        p
    };
    let a = exits_of(program(0xdead_beef_0000_0000));
    let b = exits_of(program(0x1234_5678_9abc_def0));
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
    for e in &a {
        let words = e.encode();
        assert!(!words.windows(8).any(|w| w == 0xdead_beef_0000_0007u64.to_le_bytes()));
    }
}

#[test]
fn region_sizes_are_enforced() {
    let rig = Rig::direct();
    let id = rig.create(&CvmParams::default(), 16);
    let region_pages = rig.m.with(|p, _| p.mem().region(id).unwrap().count) as u64;
    rig.tables(id, 0);
    // Beyond the region there is no backing for direct placement.
    let beyond = (region_pages + 1) * PAGE;
    rig.tables(id, beyond);
    let st = rig.status(TmiCommand::DataCreateUnknown, &[u64::from(id.0), beyond]);
    assert_ne!(st, TmiStatus::Success);
}
