// SPDX-License-Identifier: Apache-2.0

//! Attestation tokens.
//!
//! Encoding: a sequence of length-prefixed fields (u32 little-endian length,
//! then the bytes) in this order: challenge (64), cVM measurement (32),
//! REM slots 1-4 (32 each), config digest (32), firmware digest (32),
//! platform info (<= 256), AIK certificate, root certificate, signature (64).
//! The signature is an Ed25519 signature by the AIK over every byte that
//! precedes the signature field.

use ed25519_dalek::{Signature, VerifyingKey};
use serde::Serialize;

use super::keys::{Cert, CertKind, KeyHierarchy, CERT_LEN};

pub const CHALLENGE_LEN: usize = 64;
const MAX_PLATFORM_INFO: usize = 256;

/// The attested content of a token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenClaims {
    pub challenge: [u8; CHALLENGE_LEN],
    pub measurement: [u8; 32],
    pub rem: [[u8; 32]; 4],
    pub config_digest: [u8; 32],
    pub firmware_digest: [u8; 32],
    pub platform_info: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttestationToken {
    pub claims: TokenClaims,
    pub aik_cert: Cert,
    pub rak_cert: Cert,
    pub signature: [u8; 64],
}

fn field(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn signed_part(claims: &TokenClaims, aik: &Cert, rak: &Cert) -> Vec<u8> {
    let mut out = Vec::with_capacity(700);
    field(&mut out, &claims.challenge);
    field(&mut out, &claims.measurement);
    for slot in &claims.rem {
        field(&mut out, slot);
    }
    field(&mut out, &claims.config_digest);
    field(&mut out, &claims.firmware_digest);
    field(&mut out, &claims.platform_info);
    field(&mut out, &aik.encode());
    field(&mut out, &rak.encode());
    out
}

impl AttestationToken {
    pub fn build(keys: &KeyHierarchy, claims: TokenClaims) -> AttestationToken {
        let signature = keys.sign(&signed_part(&claims, keys.aik_cert(), keys.rak_cert()));
        AttestationToken {
            claims,
            aik_cert: *keys.aik_cert(),
            rak_cert: *keys.rak_cert(),
            signature,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = signed_part(&self.claims, &self.aik_cert, &self.rak_cert);
        field(&mut out, &self.signature);
        out
    }

    /// Strict decoding: every field must have its exact length and nothing
    /// may follow the signature.
    pub fn decode(bytes: &[u8]) -> Option<(AttestationToken, usize)> {
        let at = std::cell::Cell::new(0usize);
        let next = |want: Option<usize>| -> Option<&[u8]> {
            let pos = at.get();
            let len = u32::from_le_bytes(bytes.get(pos..pos + 4)?.try_into().ok()?) as usize;
            if want.is_some_and(|w| w != len) || len > MAX_PLATFORM_INFO.max(CERT_LEN) {
                return None;
            }
            let start = pos + 4;
            let b = bytes.get(start..start + len)?;
            at.set(start + len);
            Some(b)
        };
        let fixed32 = |b: &[u8]| -> [u8; 32] { b.try_into().unwrap() };
        let challenge: [u8; CHALLENGE_LEN] = next(Some(CHALLENGE_LEN))?.try_into().unwrap();
        let measurement = fixed32(next(Some(32))?);
        let mut rem = [[0u8; 32]; 4];
        for slot in &mut rem {
            *slot = fixed32(next(Some(32))?);
        }
        let config_digest = fixed32(next(Some(32))?);
        let firmware_digest = fixed32(next(Some(32))?);
        let info = next(None)?;
        if info.len() > MAX_PLATFORM_INFO {
            return None;
        }
        let platform_info = info.to_vec();
        let aik_cert = Cert::decode(next(Some(CERT_LEN))?)?;
        let rak_cert = Cert::decode(next(Some(CERT_LEN))?)?;
        let signed_len = at.get();
        let signature: [u8; 64] = next(Some(64))?.try_into().unwrap();
        if at.get() != bytes.len() {
            return None;
        }
        Some((
            AttestationToken {
                claims: TokenClaims {
                    challenge,
                    measurement,
                    rem,
                    config_digest,
                    firmware_digest,
                    platform_info,
                },
                aik_cert,
                rak_cert,
                signature,
            },
            signed_len,
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Malformed,
    Chain,
    Signature,
    MeasurementMismatch,
    ChallengeMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

/// Checks structure, certificate chain and signature, returning the token.
pub fn verify_evidence(bytes: &[u8], trusted_rak: &[u8; 32]) -> Result<AttestationToken, RejectReason> {
    let (token, signed_len) = AttestationToken::decode(bytes).ok_or(RejectReason::Malformed)?;
    let rak = VerifyingKey::from_bytes(trusted_rak).map_err(|_| RejectReason::Chain)?;
    let fw = &token.claims.firmware_digest;
    let chain_ok = token.rak_cert.kind == CertKind::Root
        && token.rak_cert.subject == *trusted_rak
        && token.rak_cert.firmware == *fw
        && token.rak_cert.verify(&rak)
        && token.aik_cert.kind == CertKind::Aik
        && token.aik_cert.firmware == *fw
        && token.aik_cert.verify(&rak);
    if !chain_ok {
        return Err(RejectReason::Chain);
    }
    let aik = VerifyingKey::from_bytes(&token.aik_cert.subject).map_err(|_| RejectReason::Chain)?;
    aik.verify_strict(&bytes[..signed_len], &Signature::from_bytes(&token.signature))
        .map_err(|_| RejectReason::Signature)?;
    Ok(token)
}

pub fn verify_token(
    bytes: &[u8],
    trusted_rak: &[u8; 32],
    expected_measurement: &[u8; 32],
    challenge: &[u8; CHALLENGE_LEN],
) -> Verdict {
    match verify_evidence(bytes, trusted_rak) {
        Err(r) => Verdict::Reject(r),
        Ok(t) if t.claims.measurement != *expected_measurement => {
            Verdict::Reject(RejectReason::MeasurementMismatch)
        }
        Ok(t) if t.claims.challenge != *challenge => Verdict::Reject(RejectReason::ChallengeMismatch),
        Ok(_) => Verdict::Accept,
    }
}
