// SPDX-License-Identifier: Apache-2.0

mod common;

use common::{Rig, PAGE};
use tmm_sim::tmm::cvm::{CvmParams, CvmState};
use tmm_sim::tmm::{TmiCommand, TmiRequest, TmiStatus};

fn state(rig: &Rig, id: tmm_sim::mem::CvmId) -> CvmState {
    rig.m.with(|_, t| t.cvm_state(id))
}

#[test]
fn activation_needs_a_tec() {
    let rig = Rig::direct();
    let id = rig.create(&CvmParams::default(), 32);
    assert_eq!(state(&rig, id), CvmState::New);
    assert_eq!(rig.status(TmiCommand::ActivateCvm, &[u64::from(id.0)]), TmiStatus::ErrorState);
    rig.tec(id, 0);
    rig.ok(TmiCommand::ActivateCvm, &[u64::from(id.0)]);
    assert_eq!(state(&rig, id), CvmState::Active);
    assert_eq!(rig.status(TmiCommand::ActivateCvm, &[u64::from(id.0)]), TmiStatus::ErrorState);
}

#[test]
fn second_tec_starts_stopped() {
    let rig = Rig::direct();
    let mut p = CvmParams::default();
    p.vcpu_count = 2;
    let id = rig.create(&p, 32);
    let t0 = rig.tec(id, 0);
    let t1 = rig.tec(id, 0x10000);
    rig.ok(TmiCommand::ActivateCvm, &[u64::from(id.0)]);
    rig.m.with(|_, t| {
        assert!(t.tec(t0).unwrap().runnable);
        assert!(!t.tec(t1).unwrap().runnable);
    });
    // Too many vCPUs for the parameters.
    let rig = Rig::direct();
    let id = rig.create(&CvmParams::default(), 32);
    rig.tec(id, 0);
    let g = rig.ns();
    assert_ne!(rig.status(TmiCommand::TecCreate, &[u64::from(id.0), g.addr()]), TmiStatus::Success);
}

#[test]
fn active_cvm_rejects_build_commands() {
    let rig = Rig::direct();
    let id = rig.create(&CvmParams::default(), 48);
    let tec = rig.tec(id, 0);
    rig.data(id, 0, &[1]);
    rig.ok(TmiCommand::ActivateCvm, &[u64::from(id.0)]);
    let src = rig.ns();
    rig.tables(id, PAGE);
    assert_eq!(
        rig.status(TmiCommand::DataCreate, &[u64::from(id.0), PAGE, src.addr()]),
        TmiStatus::ErrorState
    );
    let g = rig.ns();
    assert_eq!(rig.status(TmiCommand::TecCreate, &[u64::from(id.0), g.addr()]), TmiStatus::ErrorState);
    assert_eq!(rig.status(TmiCommand::TecDestroy, &[u64::from(tec.0)]), TmiStatus::ErrorState);
    // Unmeasured population is still allowed after activation.
    rig.ok(TmiCommand::DataCreateUnknown, &[u64::from(id.0), PAGE]);
}

#[test]
fn destroy_from_new_and_unknown_ids() {
    let rig = Rig::direct();
    let id = rig.create(&CvmParams::default(), 32);
    rig.data(id, 0, &[5; 10]);
    rig.ok(TmiCommand::DestroyCvm, &[u64::from(id.0)]);
    assert_eq!(state(&rig, id), CvmState::Null);
    assert_eq!(rig.status(TmiCommand::DestroyCvm, &[u64::from(id.0)]), TmiStatus::ErrorInput);
    rig.m.with(|p, _| p.mem().check_invariants()).unwrap();
    // The region is reusable.
    let again = rig.create(&CvmParams::default(), 32);
    assert_ne!(again, id);
}

#[test]
fn unknown_command_and_bad_arguments() {
    let rig = Rig::direct();
    let r = rig.m.tmi(0, &TmiRequest::raw(0xC400_0000, &[]));
    assert_eq!(r.status, TmiStatus::ErrorInput);
    let g = rig.ns();
    rig.write(g, 0, &[0xff; 40]);
    assert_eq!(rig.status(TmiCommand::CreateCvm, &[g.addr(), 32, 0]), TmiStatus::ErrorInput);
    // Misaligned and out-of-range addresses.
    let id = rig.create(&CvmParams::default(), 32);
    assert_eq!(rig.status(TmiCommand::DataCreateUnknown, &[u64::from(id.0), 0x123]), TmiStatus::ErrorInput);
    assert_eq!(rig.status(TmiCommand::CreateCvm, &[u64::MAX, 32, 0]), TmiStatus::ErrorInput);
}

#[test]
fn delegation_is_a_dynamic_policy_command() {
    let rig = Rig::direct();
    let g = rig.ns();
    assert_eq!(rig.status(TmiCommand::GranuleDelegate, &[g.addr()]), TmiStatus::ErrorPolicy);
    let rig = Rig::dynamic();
    let g = rig.ns();
    rig.ok(TmiCommand::GranuleDelegate, &[g.addr()]);
    assert_eq!(rig.status(TmiCommand::GranuleDelegate, &[g.addr()]), TmiStatus::ErrorState);
    assert!(rig.m.with(|p, _| p.host_read(g)).is_err());
    rig.ok(TmiCommand::GranuleUndelegate, &[g.addr()]);
    assert!(rig.m.with(|p, _| p.host_read(g)).is_ok());
}

#[test]
fn table_levels() {
    let rig = Rig::direct();
    let id = rig.create(&CvmParams::default(), 48);
    let c = u64::from(id.0);
    // Level 3 before its parent: the walk stops at level 1.
    let r = rig.call(TmiCommand::CreateTtt, &[c, 0x4000_0000, 3]);
    assert_eq!(r.status, TmiStatus::ErrorInput);
    assert_eq!(rig.status(TmiCommand::CreateTtt, &[c, 0, 0]), TmiStatus::ErrorInput);
    assert_eq!(rig.status(TmiCommand::CreateTtt, &[c, 0, 4]), TmiStatus::ErrorInput);
    assert_eq!(rig.status(TmiCommand::CreateTtt, &[c, 0x1000, 1]), TmiStatus::ErrorInput);
    rig.ok(TmiCommand::CreateTtt, &[c, 0, 1]);
    assert_eq!(rig.status(TmiCommand::CreateTtt, &[c, 0, 1]), TmiStatus::ErrorInput);
    rig.ok(TmiCommand::CreateTtt, &[c, 0, 2]);
    rig.ok(TmiCommand::CreateTtt, &[c, 0, 3]);
    rig.ok(TmiCommand::DataCreateUnknown, &[c, 0]);
    // Non-empty tables stay.
    assert_eq!(rig.status(TmiCommand::DestroyTtt, &[c, 0, 3]), TmiStatus::ErrorState);
    rig.ok(TmiCommand::DataDestroy, &[c, 0]);
    rig.ok(TmiCommand::DestroyTtt, &[c, 0, 3]);
    rig.ok(TmiCommand::DestroyTtt, &[c, 0, 2]);
    rig.ok(TmiCommand::DestroyTtt, &[c, 0, 1]);
    rig.m.with(|p, t| {
        p.mem().check_invariants().unwrap();
        t.check_ttt_soundness(p).unwrap();
    });
}

#[test]
fn unprotected_mappings() {
    let rig = Rig::direct();
    let id = rig.create(&CvmParams::default(), 48);
    let c = u64::from(id.0);
    let shared_ipa = 1u64 << 31;
    rig.tables(id, shared_ipa);
    let g = rig.ns();
    rig.ok(TmiCommand::MapUnprotected, &[c, shared_ipa, g.addr()]);
    assert_eq!(rig.status(TmiCommand::MapUnprotected, &[c, shared_ipa, g.addr()]), TmiStatus::ErrorInput);
    // Protected addresses take no normal-world target.
    rig.tables(id, 0);
    assert_ne!(rig.status(TmiCommand::MapUnprotected, &[c, 0, g.addr()]), TmiStatus::Success);
    rig.ok(TmiCommand::UnmapUnprotected, &[c, shared_ipa]);
    rig.m.with(|p, t| t.check_ttt_soundness(p)).unwrap();
}
