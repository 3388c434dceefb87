// SPDX-License-Identifier: Apache-2.0

//! Policy-bound sealed storage.
//!
//! The sealing key is `HKDF-Expand(PRK(storage root), "seal" || policy)`,
//! encryption is AES-256-GCM with the policy encoding as associated data.
//! Blob encoding: policy (65 bytes: flag, measurement, firmware), nonce
//! (12 bytes), u32 little-endian ciphertext length, ciphertext with tag.

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::keys::KeyHierarchy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SealPolicy {
    /// When set, only a cVM with this initial measurement may unseal.
    pub required_measurement: Option<[u8; 32]>,
    pub required_firmware: [u8; 32],
}

impl SealPolicy {
    pub fn encode(&self) -> [u8; 65] {
        let mut out = [0u8; 65];
        if let Some(m) = self.required_measurement {
            out[0] = 1;
            out[1..33].copy_from_slice(&m);
        }
        out[33..].copy_from_slice(&self.required_firmware);
        out
    }

    fn decode(b: &[u8]) -> Option<SealPolicy> {
        let required_measurement = match b[0] {
            0 if b[1..33].iter().all(|&x| x == 0) => None,
            1 => Some(b[1..33].try_into().unwrap()),
            _ => return None,
        };
        Some(SealPolicy {
            required_measurement,
            required_firmware: b[33..65].try_into().unwrap(),
        })
    }

    pub fn holds(&self, firmware: &[u8; 32], measurement: &[u8; 32]) -> bool {
        self.required_firmware == *firmware
            && self.required_measurement.map_or(true, |m| m == *measurement)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SealedBlob {
    pub policy: SealPolicy,
    pub nonce: [u8; 12],
    pub ciphertext: Vec<u8>,
}

impl SealedBlob {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.policy.encode().to_vec();
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn decode(b: &[u8]) -> Option<SealedBlob> {
        if b.len() < 81 {
            return None;
        }
        let policy = SealPolicy::decode(&b[..65])?;
        let nonce = b[65..77].try_into().unwrap();
        let len = u32::from_le_bytes(b[77..81].try_into().unwrap()) as usize;
        if b.len() != 81 + len {
            return None;
        }
        Some(SealedBlob {
            policy,
            nonce,
            ciphertext: b[81..].to_vec(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum SealError {
    #[error("sealing policy does not hold for this cVM or platform")]
    PolicyMismatch,
    #[error("sealed blob failed authentication")]
    TagFailure,
}

fn cipher(keys: &KeyHierarchy, policy: &SealPolicy) -> Aes256Gcm {
    let mut label = b"seal".to_vec();
    label.extend_from_slice(&policy.encode());
    let key = keys.derive_storage_key(&label);
    Aes256Gcm::new_from_slice(&key).expect("32-byte key")
}

pub fn seal(keys: &KeyHierarchy, policy: SealPolicy, nonce: [u8; 12], plaintext: &[u8]) -> SealedBlob {
    let aad = policy.encode();
    let ciphertext = cipher(keys, &policy)
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: plaintext, aad: &aad })
        .expect("in-memory encryption cannot fail");
    SealedBlob {
        policy,
        nonce,
        ciphertext,
    }
}

/// Checks the policy against the current firmware and cVM measurement,
/// then decrypts.
pub fn unseal(keys: &KeyHierarchy, measurement: &[u8; 32], blob: &SealedBlob) -> Result<Vec<u8>, SealError> {
    if !blob.policy.holds(keys.firmware(), measurement) {
        return Err(SealError::PolicyMismatch);
    }
    let aad = blob.policy.encode();
    cipher(keys, &blob.policy)
        .decrypt(
            Nonce::from_slice(&blob.nonce),
            Payload {
                msg: &blob.ciphertext,
                aad: &aad,
            },
        )
        .map_err(|_| SealError::TagFailure)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attestation::derive_keys;

    #[test]
    fn round_trip_and_policies() {
        let keys = derive_keys(&[1; 32], &[2; 32], &[3; 32]);
        let policy = SealPolicy {
            required_measurement: Some([5; 32]),
            required_firmware: [2; 32],
        };
        let blob = seal(&keys, policy, [0; 12], b"secret");
        assert_eq!(SealedBlob::decode(&blob.encode()), Some(blob.clone()));
        assert_eq!(unseal(&keys, &[5; 32], &blob).unwrap(), b"secret");
        assert_eq!(unseal(&keys, &[6; 32], &blob), Err(SealError::PolicyMismatch));

        let updated = derive_keys(&[1; 32], &[7; 32], &[3; 32]);
        assert_eq!(unseal(&updated, &[5; 32], &blob), Err(SealError::PolicyMismatch));

        let mut bad = blob.clone();
        bad.ciphertext[0] ^= 1;
        assert_eq!(unseal(&keys, &[5; 32], &bad), Err(SealError::TagFailure));
    }
}
