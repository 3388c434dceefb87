// SPDX-License-Identifier: Apache-2.0

mod common;

use common::{boot, boot_with};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmm_sim::attestation::{verify_token, RejectReason, SealError, SealPolicy, Verdict};
use tmm_sim::guest::Instr;
use tmm_sim::host::{CvmSpec, ImageSegment};
use tmm_sim::mem::CvmId;
use tmm_sim::platform::PlatformConfig;
use tmm_sim::tmm::{ServiceError, TraceEvent, TmmOptions};
use tmm_sim::tsi::{TsiFunction, TsiStatus};

const BUFFER: u64 = 0x8000;

fn retrieving(challenge: [u8; 64], chunk: u16) -> CvmSpec {
    CvmSpec::single(vec![
        Instr::MemWrite {
            ipa: BUFFER,
            bytes: vec![0],
        },
        Instr::RetrieveToken {
            challenge: challenge.to_vec(),
            buffer: BUFFER,
            chunk,
        },
        Instr::MemRead { ipa: BUFFER, len: 4096 },
        Instr::Halt,
    ])
}

/// Runs the guest and returns the token bytes it ended up holding.
fn guest_token(spec: &CvmSpec) -> (Vec<u8>, [u8; 32], [u8; 32]) {
    let (mut host, id) = boot(spec);
    let (measurement, rak) = host
        .machine()
        .with(|_, t| (t.cvm(id).unwrap().measurement_value(), t.keys().rak_public()));
    let r = host.run(id, 10_000).unwrap();
    assert!(r.halted, "{:?} {:?}", r, host.events().iter().rev().take(5).collect::<Vec<_>>());
    let trace = &r.traces[&0];
    let total = trace
        .iter()
        .rev()
        .find_map(|e| match e {
            TraceEvent::Tsi {
                function: TsiFunction::AttestationTokenContinue,
                status: TsiStatus::Success,
                results,
            } => Some(results[1] as usize),
            _ => None,
        })
        .expect("retrieval completed");
    let bytes = trace
        .iter()
        .find_map(|e| match e {
            TraceEvent::Read { bytes, .. } => Some(bytes[..total].to_vec()),
            _ => None,
        })
        .unwrap();
    (bytes, measurement, rak)
}

#[test]
fn honest_token_accepted() {
    let challenge = [0x5a; 64];
    let (bytes, measurement, rak) = guest_token(&retrieving(challenge, 256));
    assert_eq!(verify_token(&bytes, &rak, &measurement, &challenge), Verdict::Accept);
    assert_eq!(
        verify_token(&bytes, &rak, &measurement, &[0; 64]),
        Verdict::Reject(RejectReason::ChallengeMismatch)
    );
}

#[test]
fn one_byte_image_difference_rejects() {
    let challenge = [7; 64];
    let mut a = retrieving(challenge, 512);
    a.image.push(ImageSegment {
        ipa: 0x6000,
        bytes: vec![1, 2, 3],
    });
    let mut b = a.clone();
    b.image[0].bytes[1] = 0xff;
    let (_, expected_a, _) = guest_token(&a);
    let (bytes_b, _, rak) = guest_token(&b);
    assert_eq!(
        verify_token(&bytes_b, &rak, &expected_a, &challenge),
        Verdict::Reject(RejectReason::MeasurementMismatch)
    );
}

#[test]
fn bit_flips_reject() {
    let challenge = [1; 64];
    let (bytes, measurement, rak) = guest_token(&retrieving(challenge, 4096));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10_000 {
        let mut t = bytes.clone();
        let bit = rng.gen_range(0..t.len() * 8);
        t[bit / 8] ^= 1 << (bit % 8);
        assert_ne!(verify_token(&t, &rak, &measurement, &challenge), Verdict::Accept, "bit {bit}");
    }
}

#[test]
fn other_platform_chain_rejects() {
    let challenge = [3; 64];
    let (bytes, measurement, _) = guest_token(&retrieving(challenge, 64));
    let other = PlatformConfig {
        rot_seed: [0xee; 32],
        ..PlatformConfig::default()
    };
    let (host, _) = boot_with(&other, TmmOptions::default(), &retrieving(challenge, 64));
    let rak = host.machine().with(|_, t| t.keys().rak_public());
    assert_eq!(
        verify_token(&bytes, &rak, &measurement, &challenge),
        Verdict::Reject(RejectReason::Chain)
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn chunk_size_does_not_change_token(chunk in 1u16..=4096, c in any::<u8>()) {
        let challenge = [c; 64];
        let spec = retrieving(challenge, chunk);
        let (bytes, _, _) = guest_token(&spec);
        let (host, id) = boot(&spec);
        let direct = host.machine().with(|_, t| t.build_token(id, &challenge).unwrap().encode());
        prop_assert_eq!(bytes, direct);
    }
}

#[test]
fn chunk_extremes() {
    let challenge = [9; 64];
    for chunk in [1, 4096] {
        let spec = retrieving(challenge, chunk);
        let (bytes, _, _) = guest_token(&spec);
        let (host, id) = boot(&spec);
        let direct = host.machine().with(|_, t| t.build_token(id, &challenge).unwrap().encode());
        assert_eq!(bytes, direct, "chunk {chunk}");
    }
}

fn two_cvms(cfg: &PlatformConfig) -> (tmm_sim::host::HostSim, CvmId, CvmId) {
    let m = tmm_sim::machine::Machine::new(cfg, TmmOptions::default()).unwrap();
    let mut host = tmm_sim::host::HostSim::new(m, Default::default());
    let a = host.boot_cvm(&CvmSpec::single(vec![Instr::Mark(1)])).unwrap();
    let b = host.boot_cvm(&CvmSpec::single(vec![Instr::Mark(2)])).unwrap();
    (host, a, b)
}

#[test]
fn seal_policies() {
    let (host, a, b) = two_cvms(&PlatformConfig::default());
    let m = host.machine();
    let (fw, ma) = m.with(|_, t| (*t.keys().firmware(), t.cvm(a).unwrap().measurement_value()));

    let bound = SealPolicy {
        required_measurement: Some(ma),
        required_firmware: fw,
    };
    let blob = m.with(|_, t| t.seal(a, b"secret", bound)).unwrap();
    assert_eq!(m.with(|_, t| t.unseal(a, &blob)).unwrap(), b"secret");
    assert!(matches!(
        m.with(|_, t| t.unseal(b, &blob)),
        Err(ServiceError::Seal(SealError::PolicyMismatch))
    ));

    let fw_only = SealPolicy {
        required_measurement: None,
        required_firmware: fw,
    };
    let blob = m.with(|_, t| t.seal(a, b"shared", fw_only)).unwrap();
    assert_eq!(m.with(|_, t| t.unseal(b, &blob)).unwrap(), b"shared");

    // Same seed, different firmware: nothing unseals.
    let other = PlatformConfig {
        firmware: [0x42; 32],
        ..PlatformConfig::default()
    };
    let (host2, a2, _) = two_cvms(&other);
    assert!(host2.machine().with(|_, t| t.unseal(a2, &blob)).is_err());

    // Same seed and firmware on a later boot: firmware-bound blob still opens.
    let (host3, a3, _) = two_cvms(&PlatformConfig::default());
    assert_eq!(host3.machine().with(|_, t| t.unseal(a3, &blob)).unwrap(), b"shared");

    let mut tampered = blob.clone();
    tampered.ciphertext[0] ^= 1;
    assert!(matches!(
        m.with(|_, t| t.unseal(a, &tampered)),
        Err(ServiceError::Seal(SealError::TagFailure))
    ));
}

/// Each power cycle (a new platform seed) brings a new identity key under the
/// same root.
#[test]
fn fresh_identity_per_boot() {
    let keys = |seed| {
        let cfg = PlatformConfig {
            seed,
            ..PlatformConfig::default()
        };
        let (h, _, _) = two_cvms(&cfg);
        h.machine()
            .with(|_, t| (t.keys().aik_public(), t.keys().rak_public(), t.keys().aik_cert().clone()))
    };
    let k1 = keys(1);
    let k2 = keys(2);
    assert_eq!(k1.1, k2.1);
    assert_ne!(k1.0, k2.0);
    assert_eq!(keys(1).0, k1.0);
    let rak = ed25519_dalek::VerifyingKey::from_bytes(&k1.1).unwrap();
    assert!(k1.2.verify(&rak) && k2.2.verify(&rak));
}
