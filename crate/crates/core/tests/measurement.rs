// SPDX-License-Identifier: Apache-2.0

mod common;

use std::collections::BTreeMap;

use common::{Rig, PAGE};
use proptest::prelude::*;
use sha2::{Digest, Sha256};
use tmm_sim::guest::Instr;
use tmm_sim::host::{CvmSpec, HostPolicy, HostSim};
use tmm_sim::tmm::cvm::{CvmParams, PLATFORM_FEATURES};
use tmm_sim::tmm::{TmiCommand, TraceEvent};
use tmm_sim::tsi::{unpack_words, TsiFunction};

/// Independent fold over the documented encoding.
fn oracle(params: &CvmParams, pages: &BTreeMap<u64, Vec<u8>>, pcs: &[u64], tecs_first: bool) -> [u8; 32] {
    let mut enc = Vec::new();
    enc.push(params.ipa_width);
    enc.push(params.hash_algo);
    enc.extend(params.vcpu_count.to_le_bytes());
    enc.extend([0u8; 4]);
    enc.extend(params.protected_ipa_limit.to_le_bytes());
    enc.extend(params.feature_mask.to_le_bytes());
    enc.extend(params.io_window_base.to_le_bytes());
    enc.extend(params.io_window_pages.to_le_bytes());
    enc.extend(params.io_queues.to_le_bytes());
    assert_eq!(enc.len(), 40);
    let mut m: [u8; 32] = Sha256::digest(&enc).into();
    let mut fold = |kind: u8, ipa: u64, digest: [u8; 32]| {
        let mut h = Sha256::new();
        h.update(m);
        h.update([kind]);
        h.update(ipa.to_le_bytes());
        h.update(digest);
        m = h.finalize().into();
    };
    let mut events = Vec::new();
    for (page, bytes) in pages {
        let mut full = bytes.clone();
        full.resize(PAGE as usize, 0);
        events.push((1u8, page * PAGE, <[u8; 32]>::from(Sha256::digest(&full))));
    }
    let tecs = pcs
        .iter()
        .enumerate()
        .map(|(i, pc)| (2u8, i as u64, <[u8; 32]>::from(Sha256::digest(pc.to_le_bytes()))));
    if tecs_first {
        events.splice(0..0, tecs);
    } else {
        events.extend(tecs);
    }
    for (kind, ipa, digest) in events {
        fold(kind, ipa, digest);
    }
    m
}

fn build(params: &CvmParams, pages: &BTreeMap<u64, Vec<u8>>, pcs: &[u64]) -> [u8; 32] {
    let rig = Rig::direct();
    let id = rig.create(params, 160);
    for (page, bytes) in pages {
        rig.data(id, page * PAGE, bytes);
    }
    for pc in pcs {
        rig.tec(id, *pc);
    }
    rig.ok(TmiCommand::ActivateCvm, &[u64::from(id.0)]);
    rig.measurement(id)
}

fn arb_case() -> impl Strategy<Value = (CvmParams, BTreeMap<u64, Vec<u8>>, Vec<u64>)> {
    (
        32u8..=40,
        any::<u64>(),
        prop::collection::btree_map(0u64..128, prop::collection::vec(any::<u8>(), 1..200), 1..6),
        prop::collection::vec(any::<u64>(), 1..=3),
    )
        .prop_map(|(width, mask, pages, pcs)| {
            let params = CvmParams {
                ipa_width: width,
                vcpu_count: pcs.len() as u16,
                feature_mask: mask & PLATFORM_FEATURES,
                ..CvmParams::default()
            };
            (params, pages, pcs)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn initial_measurement_matches_oracle((params, pages, pcs) in arb_case()) {
        prop_assert_eq!(build(&params, &pages, &pcs), oracle(&params, &pages, &pcs, false));
    }

    #[test]
    fn single_byte_perturbation_changes_digest(
        (params, pages, pcs) in arb_case(),
        pick in any::<prop::sample::Index>(),
        byte in any::<prop::sample::Index>(),
        delta in 1u8..=255,
    ) {
        let base = build(&params, &pages, &pcs);
        let mut changed = pages.clone();
        let key = *pick.get(&pages.keys().copied().collect::<Vec<_>>());
        let v = changed.get_mut(&key).unwrap();
        let i = byte.index(v.len());
        v[i] = v[i].wrapping_add(delta);
        prop_assert_ne!(build(&params, &changed, &pcs), base);
    }
}

#[test]
fn identical_boots_agree() {
    let pages = BTreeMap::from([(3u64, vec![1, 2, 3]), (9, vec![9; 100])]);
    let p = CvmParams::default();
    assert_eq!(build(&p, &pages, &[0x1000]), build(&p, &pages, &[0x1000]));
    assert_ne!(build(&p, &pages, &[0x1000]), build(&p, &pages, &[0x2000]));
}

#[test]
fn create_without_measuring() {
    let rig = Rig::direct();
    let id = rig.create(&CvmParams::default(), 64);
    let before = rig.measurement(id);
    rig.tables(id, 0x5000);
    rig.ok(TmiCommand::DataCreateUnknown, &[u64::from(id.0), 0x5000]);
    assert_eq!(rig.measurement(id), before);
}

/// The value a guest reads back is the activated measurement, and it stays
/// fixed while the guest runs.
#[test]
fn guest_reads_initial_measurement() {
    let program = vec![
        Instr::Tsi {
            function: TsiFunction::MeasurementRead,
            args: [0; 4],
            data: vec![],
        },
        Instr::Halt,
    ];
    let spec = CvmSpec::single(program);
    let m = tmm_sim::machine::Machine::new(&Default::default(), Default::default()).unwrap();
    let mut host = HostSim::new(m.clone(), HostPolicy::default());
    let id = host.boot_cvm(&spec).unwrap();
    let expected = m.with(|_, t| t.cvm(id).unwrap().measurement_value());

    let pages: BTreeMap<u64, Vec<u8>> = spec
        .image_pages()
        .unwrap()
        .into_iter()
        .map(|(k, v)| (k, v.to_vec()))
        .collect();
    let params = CvmParams {
        vcpu_count: 1,
        ..spec.params
    };
    assert_eq!(expected, oracle(&params, &pages, &[0], true));

    let r = host.run(id, 10).unwrap();
    let got = r.traces[&0].iter().find_map(|e| match e {
        TraceEvent::Tsi { results, .. } => Some(unpack_words(results)),
        _ => None,
    });
    assert_eq!(got, Some(expected));
}
