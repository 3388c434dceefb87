// SPDX-License-Identifier: Apache-2.0

//! The guest-facing service interface: function codes, status codes and
//! the state of an in-progress token retrieval. The calls themselves are
//! executed by the monitor while it interprets the guest.

use serde::{Deserialize, Serialize};

pub const TSI_VERSION: (u64, u64) = (1, 0);
/// Highest measurement index a guest may read; 0 is the initial value.
pub const MAX_MEASUREMENT_INDEX: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TsiFunction {
    Version = 0,
    CvmConfig = 1,
    MeasurementRead = 2,
    MeasurementExtend = 3,
    AttestationTokenInit = 4,
    AttestationTokenContinue = 5,
    HostCall = 6,
}

impl TsiFunction {
    pub const ALL: [TsiFunction; 7] = [
        TsiFunction::Version,
        TsiFunction::CvmConfig,
        TsiFunction::MeasurementRead,
        TsiFunction::MeasurementExtend,
        TsiFunction::AttestationTokenInit,
        TsiFunction::AttestationTokenContinue,
        TsiFunction::HostCall,
    ];

    pub fn from_code(c: u8) -> Option<TsiFunction> {
        Self::ALL.get(usize::from(c)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TsiFunction::Version => "version",
            TsiFunction::CvmConfig => "cvm_config",
            TsiFunction::MeasurementRead => "measurement_read",
            TsiFunction::MeasurementExtend => "measurement_extend",
            TsiFunction::AttestationTokenInit => "attestation_token_init",
            TsiFunction::AttestationTokenContinue => "attestation_token_continue",
            TsiFunction::HostCall => "host_call",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TsiStatus {
    Success = 0,
    ErrorInput = 1,
    ErrorState = 2,
    Incomplete = 3,
}

/// A token being copied out to the guest.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct TokenRetrieval {
    #[serde(with = "challenge_hex")]
    pub challenge: [u8; 64],
    pub bytes: Vec<u8>,
    pub cursor: usize,
}

mod challenge_hex {
    use serde::Serializer;

    pub fn serialize<S: Serializer>(b: &[u8; 64], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }
}

impl TokenRetrieval {
    pub fn is_mid_flight(&self) -> bool {
        self.cursor > 0 && self.cursor < self.bytes.len()
    }

    pub fn is_done(&self) -> bool {
        self.cursor >= self.bytes.len()
    }

    /// Takes the next chunk of at most `max` bytes.
    pub fn next_chunk(&mut self, max: usize) -> &[u8] {
        let start = self.cursor;
        let end = (start + max).min(self.bytes.len());
        self.cursor = end;
        &self.bytes[start..end]
    }
}

/// Packs up to 32 bytes into four little-endian result words.
pub fn pack_words(bytes: &[u8]) -> [u64; 4] {
    let mut out = [0u64; 4];
    for (i, c) in bytes.chunks(8).take(4).enumerate() {
        let mut w = [0u8; 8];
        w[..c.len()].copy_from_slice(c);
        out[i] = u64::from_le_bytes(w);
    }
    out
}

pub fn unpack_words(words: &[u64; 4]) -> [u8; 32] {
    let mut out = [0u8; 32];
    for (i, w) in words.iter().enumerate() {
        out[i * 8..i * 8 + 8].copy_from_slice(&w.to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_round_trip() {
        for f in TsiFunction::ALL {
            assert_eq!(TsiFunction::from_code(f as u8), Some(f));
        }
        assert_eq!(TsiFunction::from_code(7), None);
    }

    #[test]
    fn chunking() {
        let mut r = TokenRetrieval {
            challenge: [0; 64],
            bytes: (0..10).collect(),
            cursor: 0,
        };
        assert_eq!(r.next_chunk(4), &[0, 1, 2, 3]);
        assert!(r.is_mid_flight());
        assert_eq!(r.next_chunk(100).len(), 6);
        assert!(r.is_done() && !r.is_mid_flight());
    }

    #[test]
    fn words() {
        let b: [u8; 32] = std::array::from_fn(|i| i as u8);
        assert_eq!(unpack_words(&pack_words(&b)), b);
    }
}
