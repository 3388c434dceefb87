// SPDX-License-Identifier: Apache-2.0

//! Root of trust, key hierarchy, attestation tokens and sealed storage.

mod keys;
mod seal;
mod token;

pub use keys::{derive_keys, Cert, CertKind, KeyHierarchy, CERT_LEN};
pub use seal::{seal, unseal, SealError, SealPolicy, SealedBlob};
pub use token::{
    verify_evidence, verify_token, AttestationToken, RejectReason, TokenClaims, Verdict,
    CHALLENGE_LEN,
};
