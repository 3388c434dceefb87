// SPDX-License-Identifier: Apache-2.0

//! cVM parameters, their measured encoding, and the lifecycle states.

use serde::{Deserialize, Serialize};

use super::measurement::MeasurementState;
use super::TecId;
use crate::mem::{CvmId, GranuleIdx, SecureRegion, GRANULE_SIZE};

/// Architectural feature bits the platform implements. Bits 6, 7 and the
/// top 32 bits are reserved and always read as zero.
pub const PLATFORM_FEATURES: u64 = 0x0000_0000_00FF_FF3F;
pub const MIN_IPA_WIDTH: u8 = 30;
pub const MAX_IPA_WIDTH: u8 = 48;
pub const MAX_VCPUS: u16 = 8;
pub const MAX_IO_QUEUES: u32 = 8;
/// Size of the MMIO window at the top of the IPA space.
pub const MMIO_WINDOW_SIZE: u64 = 64 << 20;
pub const HASH_SHA256: u8 = 0;
/// Length of [`CvmParams::encode`].
pub const PARAMS_LEN: usize = 40;

/// Creation parameters. All fields are measured.
///
/// Encoding (little endian, 40 bytes): `ipa_width u8, hash_algo u8,
/// vcpu_count u16, reserved u32 (zero), protected_ipa_limit u64,
/// feature_mask u64, io_window_base u64, io_window_pages u32, io_queues u32`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvmParams {
    pub ipa_width: u8,
    pub hash_algo: u8,
    pub vcpu_count: u16,
    pub protected_ipa_limit: u64,
    pub feature_mask: u64,
    pub io_window_base: u64,
    pub io_window_pages: u32,
    pub io_queues: u32,
}

impl Default for CvmParams {
    fn default() -> Self {
        CvmParams {
            ipa_width: 32,
            hash_algo: HASH_SHA256,
            vcpu_count: 1,
            protected_ipa_limit: 1 << 31,
            feature_mask: PLATFORM_FEATURES,
            io_window_base: 0,
            io_window_pages: 0,
            io_queues: 0,
        }
    }
}

impl CvmParams {
    pub fn encode(&self) -> [u8; PARAMS_LEN] {
        let mut out = [0u8; PARAMS_LEN];
        out[0] = self.ipa_width;
        out[1] = self.hash_algo;
        out[2..4].copy_from_slice(&self.vcpu_count.to_le_bytes());
        out[8..16].copy_from_slice(&self.protected_ipa_limit.to_le_bytes());
        out[16..24].copy_from_slice(&self.feature_mask.to_le_bytes());
        out[24..32].copy_from_slice(&self.io_window_base.to_le_bytes());
        out[32..36].copy_from_slice(&self.io_window_pages.to_le_bytes());
        out[36..40].copy_from_slice(&self.io_queues.to_le_bytes());
        out
    }

    /// Parses and validates an encoding. Returns `None` for anything the
    /// monitor must reject.
    pub fn decode(bytes: &[u8]) -> Option<CvmParams> {
        let b = bytes.get(..PARAMS_LEN)?;
        let u16_at = |o: usize| u16::from_le_bytes(b[o..o + 2].try_into().unwrap());
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        if u32_at(4) != 0 {
            return None;
        }
        let p = CvmParams {
            ipa_width: b[0],
            hash_algo: b[1],
            vcpu_count: u16_at(2),
            protected_ipa_limit: u64_at(8),
            feature_mask: u64_at(16),
            io_window_base: u64_at(24),
            io_window_pages: u32_at(32),
            io_queues: u32_at(36),
        };
        p.is_valid().then_some(p)
    }

    pub fn is_valid(&self) -> bool {
        let page = GRANULE_SIZE as u64;
        if !(MIN_IPA_WIDTH..=MAX_IPA_WIDTH).contains(&self.ipa_width)
            || self.hash_algo != HASH_SHA256
            || !(1..=MAX_VCPUS).contains(&self.vcpu_count)
            || self.feature_mask & !PLATFORM_FEATURES != 0
        {
            return false;
        }
        let lim = self.protected_ipa_limit;
        if lim == 0 || lim % page != 0 || lim > self.mmio_base() {
            return false;
        }
        let io_end = u64::from(self.io_window_pages)
            .checked_mul(page)
            .and_then(|len| self.io_window_base.checked_add(len));
        self.io_window_base % page == 0
            && io_end.is_some_and(|end| end <= lim)
            && self.io_queues <= MAX_IO_QUEUES
            && self.io_queues * 3 <= self.io_window_pages
    }

    pub fn ipa_size(&self) -> u64 {
        1u64 << self.ipa_width
    }

    pub fn mmio_base(&self) -> u64 {
        self.ipa_size() - MMIO_WINDOW_SIZE
    }

    pub fn is_protected(&self, ipa: u64) -> bool {
        ipa < self.protected_ipa_limit
    }

    pub fn in_ipa_space(&self, ipa: u64) -> bool {
        ipa < self.ipa_size()
    }

    /// IPA pages of the shared I/O window.
    pub fn io_pages(&self) -> std::ops::Range<u64> {
        let first = self.io_window_base / GRANULE_SIZE as u64;
        first..first + u64::from(self.io_window_pages)
    }

    pub fn in_io_window(&self, ipa: u64) -> bool {
        self.io_pages().contains(&(ipa / GRANULE_SIZE as u64))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CvmState {
    Null,
    New,
    Active,
    SystemOff,
}

impl CvmState {
    /// The lifecycle edges the monitor may take.
    pub fn is_permitted(from: CvmState, to: CvmState) -> bool {
        use CvmState::*;
        from == to
            || matches!(
                (from, to),
                (Null, New) | (New, Active) | (New, SystemOff) | (Active, SystemOff) | (SystemOff, Null)
            )
    }
}

/// Where the host-visible copy of the I/O window lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum ShadowPlacement {
    /// The cVM's fixed region and its fixed-offset mirror.
    Region(SecureRegion),
    /// A host-provided run of normal granules mirroring the I/O window.
    Window { base: GranuleIdx, count: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct CvmDescriptor {
    pub id: CvmId,
    pub state: CvmState,
    pub params: CvmParams,
    pub shadow: ShadowPlacement,
    pub params_granule: GranuleIdx,
    pub ttt_root: GranuleIdx,
    pub measurement: MeasurementState,
    /// Frozen at activation.
    pub initial_measurement: Option<[u8; 32]>,
    pub rem: [[u8; 32]; 4],
    pub tecs: Vec<TecId>,
}

impl CvmDescriptor {
    /// Initial measurement as reported to the guest: the running digest
    /// until activation, then the frozen value.
    pub fn measurement_value(&self) -> [u8; 32] {
        self.initial_measurement
            .unwrap_or(*self.measurement.current())
    }

    /// Physical granule that the direct policy places behind a protected IPA.
    pub fn direct_target(&self, ipa: u64) -> Option<GranuleIdx> {
        let ShadowPlacement::Region(region) = self.shadow else {
            return None;
        };
        let page = (ipa / GRANULE_SIZE as u64) as usize;
        (page < region.count).then(|| region.base.offset(page))
    }

    /// Normal granule shadowing I/O window page `ipa_page`.
    pub fn shadow_of_page(&self, ipa_page: u64) -> Option<GranuleIdx> {
        if !self.params.io_pages().contains(&ipa_page) {
            return None;
        }
        match self.shadow {
            ShadowPlacement::Region(region) => {
                let g = region.base.offset(ipa_page as usize);
                region.contains(g).then(|| region.shadow_of(g))
            }
            ShadowPlacement::Window { base, count } => {
                let off = (ipa_page - self.params.io_pages().start) as usize;
                (off < count).then(|| base.offset(off))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_round_trips() {
        let p = CvmParams {
            io_window_base: 0x10_0000,
            io_window_pages: 16,
            io_queues: 2,
            vcpu_count: 3,
            ..Default::default()
        };
        let enc = p.encode();
        assert_eq!(enc.len(), PARAMS_LEN);
        assert_eq!(CvmParams::decode(&enc), Some(p));
    }

    #[test]
    fn rejects_bad_params() {
        let ok = CvmParams::default();
        let bad = [
            CvmParams { vcpu_count: 0, ..ok },
            CvmParams { ipa_width: 49, ..ok },
            CvmParams { hash_algo: 1, ..ok },
            CvmParams { feature_mask: 1 << 6, ..ok },
            CvmParams { protected_ipa_limit: 0x1001, ..ok },
            CvmParams { protected_ipa_limit: 1 << 32, ..ok },
            CvmParams { io_queues: 1, ..ok },
        ];
        for p in bad {
            assert!(!p.is_valid(), "{p:?}");
        }
        let mut enc = ok.encode();
        enc[5] = 1;
        assert_eq!(CvmParams::decode(&enc), None);
    }

    #[test]
    fn lifecycle_edges() {
        use CvmState::*;
        assert!(CvmState::is_permitted(New, Active));
        assert!(!CvmState::is_permitted(Active, New));
        assert!(!CvmState::is_permitted(SystemOff, Active));
        assert!(!CvmState::is_permitted(Null, Active));
    }
}
