// SPDX-License-Identifier: Apache-2.0

//! Hash-chain measurement of a cVM's construction.
//!
//! The chain starts from `H(params encoding)` and each event folds in as
//! `current' = H(current || kind || ipa_le64 || content_digest)` where
//! `kind` is one byte ([`EventKind::Data`] = 1, [`EventKind::Tec`] = 2).
//! For TEC events the `ipa` field carries the TEC's vCPU index.

use serde::Serialize;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub type Digest = [u8; 32];

pub fn sha256(bytes: &[u8]) -> Digest {
    Sha256::digest(bytes).into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum EventKind {
    Data = 1,
    Tec = 2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct MeasureEvent {
    pub kind: EventKind,
    pub ipa: u64,
    pub digest: Digest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("measurement log is sealed")]
pub struct Sealed;

pub fn extend_digest(current: &Digest, event: &MeasureEvent) -> Digest {
    let mut h = Sha256::new();
    h.update(current);
    h.update([event.kind as u8]);
    h.update(event.ipa.to_le_bytes());
    h.update(event.digest);
    h.finalize().into()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct MeasurementState {
    initial: Digest,
    current: Digest,
    log: Vec<MeasureEvent>,
    sealed: bool,
}

impl MeasurementState {
    pub fn new(params_encoding: &[u8]) -> Self {
        let initial = sha256(params_encoding);
        MeasurementState {
            initial,
            current: initial,
            log: Vec::new(),
            sealed: false,
        }
    }

    /// Digest of the parameters the chain started from.
    pub fn params_digest(&self) -> &Digest {
        &self.initial
    }

    pub fn current(&self) -> &Digest {
        &self.current
    }

    pub fn log(&self) -> &[MeasureEvent] {
        &self.log
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn extend(&mut self, event: MeasureEvent) -> Result<(), Sealed> {
        if self.sealed {
            return Err(Sealed);
        }
        self.current = extend_digest(&self.current, &event);
        self.log.push(event);
        Ok(())
    }

    pub(crate) fn seal(&mut self) {
        self.sealed = true;
    }

    /// Re-folds the log from the params digest.
    pub fn refold(&self) -> Digest {
        self.log
            .iter()
            .fold(self.initial, |acc, e| extend_digest(&acc, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(kind: EventKind, ipa: u64, b: u8) -> MeasureEvent {
        MeasureEvent {
            kind,
            ipa,
            digest: [b; 32],
        }
    }

    #[test]
    fn order_sensitive() {
        let (a, b) = (ev(EventKind::Data, 0, 1), ev(EventKind::Data, 0x1000, 2));
        let mut x = MeasurementState::new(b"p");
        let mut y = x.clone();
        x.extend(a).unwrap();
        x.extend(b).unwrap();
        y.extend(b).unwrap();
        y.extend(a).unwrap();
        assert_ne!(x.current(), y.current());
        assert_eq!(x.refold(), *x.current());
    }

    #[test]
    fn sealed_rejects() {
        let mut m = MeasurementState::new(b"p");
        m.seal();
        assert_eq!(m.extend(ev(EventKind::Tec, 0, 0)), Err(Sealed));
        assert!(m.log().is_empty());
    }
}
