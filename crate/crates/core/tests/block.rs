// SPDX-License-Identifier: Apache-2.0

mod common;

use common::{config, Rig, PAGE};
use tmm_sim::mem::{CvmId, MappingPolicy};
use tmm_sim::tmm::cvm::CvmParams;
use tmm_sim::tmm::ttt::{self, enumerate};
use tmm_sim::tmm::{TmiCommand, TmiStatus, TmmOptions};

const START: u64 = 0x200000;

fn rig(policy: MappingPolicy) -> Rig {
    Rig::new(&config(4096, 2048, policy), TmmOptions::default())
}

fn page_bytes(i: u64) -> Vec<u8> {
    (0..64).map(|k| (i * 31 + k) as u8).collect()
}

/// Creates the cVM and stages `n` source pages; identical on every rig.
fn setup(rig: &Rig, n: u64, l3: bool) -> (CvmId, u64) {
    let id = rig.create(&CvmParams::default(), 1200);
    if rig.policy() == MappingPolicy::Dynamic {
        rig.delegate(n as usize + 4);
    }
    for p in (0..n).step_by(512) {
        let ipa = START + p * PAGE;
        if l3 {
            rig.tables(id, ipa);
        } else {
            for level in 1..=2u64 {
                let span = 1u64 << (12 + 9 * (4 - level));
                let _ = rig.call(TmiCommand::CreateTtt, &[u64::from(id.0), ipa / span * span, level]);
            }
        }
    }
    let src = rig.ns_run(n as usize);
    for i in 0..n {
        rig.write(src.offset(i as usize), 0, &page_bytes(i));
    }
    (id, src.addr())
}

fn tmi_calls(rig: &Rig) -> u64 {
    rig.m.with(|p, _| p.ledger().counters().tmi_calls)
}

fn check_equivalent(policy: MappingPolicy, n: u64) {
    let a = rig(policy);
    let b = rig(policy);
    let (ia, src_a) = setup(&a, n, true);
    let (ib, src_b) = setup(&b, n, true);
    assert_eq!(a.m.fingerprint(), b.m.fingerprint());

    let before = tmi_calls(&a);
    a.ok(TmiCommand::DataBlockCreate, &[u64::from(ia.0), START, n, src_a]);
    assert_eq!(tmi_calls(&a) - before, 1);

    let before = tmi_calls(&b);
    for i in 0..n {
        b.ok(TmiCommand::DataCreate, &[u64::from(ib.0), START + i * PAGE, src_b + i * PAGE]);
    }
    assert_eq!(tmi_calls(&b) - before, n);

    assert_eq!(a.measurement(ia), b.measurement(ib));
    let maps = |r: &Rig, id| {
        r.m.with(|p, t| enumerate(p.mem(), t.cvm(id).unwrap().ttt_root).1)
    };
    assert_eq!(maps(&a, ia), maps(&b, ib));
    // Memory, tables and monitor state all agree.
    assert_eq!(a.m.fingerprint(), b.m.fingerprint(), "{policy:?} n={n}");
}

#[test]
fn block_matches_repeated_single_direct() {
    for n in [1, 2, 512] {
        check_equivalent(MappingPolicy::Direct, n);
    }
}

#[test]
fn block_matches_repeated_single_dynamic() {
    for n in [1, 2, 512] {
        check_equivalent(MappingPolicy::Dynamic, n);
    }
}

/// With no level-3 table underneath, an aligned direct-policy range becomes a
/// single block entry that translates exactly like the page mappings.
#[test]
fn aligned_range_uses_block_entry() {
    let a = rig(MappingPolicy::Direct);
    let b = rig(MappingPolicy::Direct);
    let (ia, src_a) = setup(&a, 512, false);
    let (ib, src_b) = setup(&b, 512, true);
    a.ok(TmiCommand::DataBlockCreate, &[u64::from(ia.0), START, 512, src_a]);
    for i in 0..512 {
        b.ok(TmiCommand::DataCreate, &[u64::from(ib.0), START + i * PAGE, src_b + i * PAGE]);
    }
    let leaves = a.m.with(|p, t| enumerate(p.mem(), t.cvm(ia).unwrap().ttt_root).1);
    assert_eq!(leaves.len(), 1);
    assert_eq!(leaves[0].level, 2);
    assert_eq!(leaves[0].pages(), 512);
    assert_eq!(a.measurement(ia), b.measurement(ib));
    for i in 0..512 {
        let ipa = START + i * PAGE;
        let ta = a.m.with(|p, t| ttt::translate(p.mem(), t.cvm(ia).unwrap().ttt_root, ipa));
        let tb = b.m.with(|p, t| ttt::translate(p.mem(), t.cvm(ib).unwrap().ttt_root, ipa));
        assert_eq!(ta, tb);
        let (g, _) = ta.unwrap();
        let bytes = a.m.with(|p, _| p.mem().granule(g).unwrap().contents()[..64].to_vec());
        assert_eq!(bytes, page_bytes(i));
    }
    a.m.with(|p, t| t.check_ttt_soundness(p)).unwrap();
}

#[test]
fn failure_leaves_nothing_behind() {
    let a = rig(MappingPolicy::Direct);
    let (id, src) = setup(&a, 4, true);
    // Occupy the third page so the range conflicts part way through.
    a.ok(TmiCommand::DataCreate, &[u64::from(id.0), START + 2 * PAGE, src]);
    let before = a.m.fingerprint();
    let r = a.call(TmiCommand::DataBlockCreate, &[u64::from(id.0), START, 4, src]);
    assert_ne!(r.status, TmiStatus::Success);
    assert_eq!(a.m.fingerprint(), before);
}
