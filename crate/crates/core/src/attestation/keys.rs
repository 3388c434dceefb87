// SPDX-License-Identifier: Apache-2.0

use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use hkdf::Hkdf;
use serde::Serialize;
use sha2::Sha256;

/// Encoded certificate length: kind, subject key, firmware digest, signature.
pub const CERT_LEN: usize = 1 + 32 + 32 + 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum CertKind {
    /// Self-signed root attestation key.
    Root = 1,
    /// Per-boot attestation identity key, signed by the root.
    Aik = 2,
}

/// A minimal certificate binding a subject key to a firmware digest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Cert {
    pub kind: CertKind,
    pub subject: [u8; 32],
    pub firmware: [u8; 32],
    pub signature: [u8; 64],
}

impl Cert {
    fn tbs(kind: CertKind, subject: &[u8; 32], firmware: &[u8; 32]) -> Vec<u8> {
        let mut m = b"tmm-cert".to_vec();
        m.push(kind as u8);
        m.extend_from_slice(subject);
        m.extend_from_slice(firmware);
        m
    }

    pub fn issue(kind: CertKind, subject: &VerifyingKey, firmware: &[u8; 32], issuer: &SigningKey) -> Cert {
        let subject = subject.to_bytes();
        let signature = issuer.sign(&Self::tbs(kind, &subject, firmware)).to_bytes();
        Cert {
            kind,
            subject,
            firmware: *firmware,
            signature,
        }
    }

    pub fn verify(&self, issuer: &VerifyingKey) -> bool {
        issuer
            .verify_strict(
                &Self::tbs(self.kind, &self.subject, &self.firmware),
                &Signature::from_bytes(&self.signature),
            )
            .is_ok()
    }

    pub fn encode(&self) -> [u8; CERT_LEN] {
        let mut out = [0u8; CERT_LEN];
        out[0] = self.kind as u8;
        out[1..33].copy_from_slice(&self.subject);
        out[33..65].copy_from_slice(&self.firmware);
        out[65..].copy_from_slice(&self.signature);
        out
    }

    pub fn decode(b: &[u8]) -> Option<Cert> {
        if b.len() != CERT_LEN {
            return None;
        }
        let kind = match b[0] {
            1 => CertKind::Root,
            2 => CertKind::Aik,
            _ => return None,
        };
        Some(Cert {
            kind,
            subject: b[1..33].try_into().unwrap(),
            firmware: b[33..65].try_into().unwrap(),
            signature: b[65..].try_into().unwrap(),
        })
    }
}

/// Keys derived at boot.
///
/// Derivation (HKDF-SHA256): `PRK = Extract(salt = firmware, ikm = rot_seed)`;
/// storage root = `Expand(PRK, "storage")`; root attestation key seed =
/// `Expand(PRK, "attest")`; AIK seed = `Expand(Extract(salt = boot_nonce,
/// ikm = RAK seed), "aik")`.
#[derive(Clone)]
pub struct KeyHierarchy {
    firmware: [u8; 32],
    storage_root: [u8; 32],
    rak: SigningKey,
    aik: SigningKey,
    aik_cert: Cert,
    rak_cert: Cert,
}

impl std::fmt::Debug for KeyHierarchy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyHierarchy")
            .field("firmware", &hex::encode(self.firmware))
            .field("rak", &hex::encode(self.rak_public()))
            .finish_non_exhaustive()
    }
}

fn expand(hk: &Hkdf<Sha256>, label: &[u8]) -> [u8; 32] {
    let mut out = [0u8; 32];
    hk.expand(label, &mut out).expect("32 bytes is a valid HKDF length");
    out
}

pub fn derive_keys(rot_seed: &[u8; 32], firmware: &[u8; 32], boot_nonce: &[u8; 32]) -> KeyHierarchy {
    let hk = Hkdf::<Sha256>::new(Some(firmware), rot_seed);
    let storage_root = expand(&hk, b"storage");
    let rak_seed = expand(&hk, b"attest");
    let aik_seed = expand(&Hkdf::<Sha256>::new(Some(boot_nonce), &rak_seed), b"aik");
    let rak = SigningKey::from_bytes(&rak_seed);
    let aik = SigningKey::from_bytes(&aik_seed);
    let aik_cert = Cert::issue(CertKind::Aik, &aik.verifying_key(), firmware, &rak);
    let rak_cert = Cert::issue(CertKind::Root, &rak.verifying_key(), firmware, &rak);
    KeyHierarchy {
        firmware: *firmware,
        storage_root,
        rak,
        aik,
        aik_cert,
        rak_cert,
    }
}

impl KeyHierarchy {
    pub fn firmware(&self) -> &[u8; 32] {
        &self.firmware
    }

    pub fn storage_root(&self) -> &[u8; 32] {
        &self.storage_root
    }

    pub fn rak_public(&self) -> [u8; 32] {
        self.rak.verifying_key().to_bytes()
    }

    pub fn aik_public(&self) -> [u8; 32] {
        self.aik.verifying_key().to_bytes()
    }

    pub fn aik_cert(&self) -> &Cert {
        &self.aik_cert
    }

    pub fn rak_cert(&self) -> &Cert {
        &self.rak_cert
    }

    pub(crate) fn sign(&self, msg: &[u8]) -> [u8; 64] {
        self.aik.sign(msg).to_bytes()
    }

    /// Sub-key for a named purpose, bound to the storage root.
    pub fn derive_storage_key(&self, label: &[u8]) -> [u8; 32] {
        let hk = Hkdf::<Sha256>::new(None, &self.storage_root);
        expand(&hk, label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roots_depend_on_seed_and_firmware_only() {
        let a = derive_keys(&[1; 32], &[2; 32], &[3; 32]);
        let b = derive_keys(&[1; 32], &[2; 32], &[4; 32]);
        assert_eq!(a.storage_root(), b.storage_root());
        assert_eq!(a.rak_public(), b.rak_public());
        assert_ne!(a.aik_public(), b.aik_public());
        let rak = VerifyingKey::from_bytes(&a.rak_public()).unwrap();
        assert!(a.aik_cert().verify(&rak));
        assert!(b.aik_cert().verify(&rak));

        let c = derive_keys(&[1; 32], &[9; 32], &[3; 32]);
        assert_ne!(a.storage_root(), c.storage_root());
        assert_ne!(a.rak_public(), c.rak_public());
    }

    #[test]
    fn cert_codec() {
        let k = derive_keys(&[1; 32], &[2; 32], &[3; 32]);
        let c = *k.aik_cert();
        assert_eq!(Cert::decode(&c.encode()), Some(c));
        assert_eq!(Cert::decode(&[0; CERT_LEN]), None);
    }
}
