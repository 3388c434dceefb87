// SPDX-License-Identifier: Apache-2.0

//! Guest-physical layout shared by the guest driver, the monitor and the
//! host device models.
//!
//! The MMIO window occupies the top 64 MiB of the IPA space: the interrupt
//! distributor at offset 0, one doorbell page per virtqueue from
//! [`DOORBELL_OFFSET`], and generic device registers from
//! [`DEVICE_MMIO_OFFSET`]. Virtqueue `k` lives in the I/O window as three
//! pages starting at `io_window_base + 3k pages`: descriptor table,
//! available ring, used ring.

use crate::mem::GRANULE_SIZE;
use crate::tmm::cvm::CvmParams;

pub const GICD_SGIR: u64 = 0xF00;
pub const DOORBELL_OFFSET: u64 = 0x1_0000;
pub const DOORBELL_STRIDE: u64 = 0x1000;
pub const DEVICE_MMIO_OFFSET: u64 = 0x10_0000;

pub const QUEUE_SIZE: u16 = 256;
pub const DESC_SIZE: u64 = 16;
pub const DESC_F_NEXT: u16 = 1;
pub const DESC_F_WRITE: u16 = 2;
/// Descriptors reserved per submission; chain heads are `4 * avail_idx`.
pub const CHAIN_STRIDE: u16 = 4;
/// Used-ring length reported for a chain the device refused.
pub const BAD_DESCRIPTOR_LEN: u32 = u32::MAX;

const PAGE: u64 = GRANULE_SIZE as u64;

pub fn sgir_ipa(p: &CvmParams) -> u64 {
    p.mmio_base() + GICD_SGIR
}

pub fn encode_sgi(target: u8, intid: u8) -> u64 {
    (u64::from(target) << 16) | u64::from(intid)
}

pub fn decode_sgi(v: u64) -> (u8, u8) {
    ((v >> 16) as u8, v as u8)
}

pub fn doorbell_ipa(p: &CvmParams, queue: u32) -> u64 {
    p.mmio_base() + DOORBELL_OFFSET + u64::from(queue) * DOORBELL_STRIDE
}

/// Queue whose doorbell is at `ipa`.
pub fn doorbell_queue(p: &CvmParams, ipa: u64) -> Option<u32> {
    let base = p.mmio_base() + DOORBELL_OFFSET;
    if ipa < base || (ipa - base) % DOORBELL_STRIDE != 0 {
        return None;
    }
    let q = (ipa - base) / DOORBELL_STRIDE;
    (q < u64::from(p.io_queues)).then_some(q as u32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueueLayout {
    pub desc: u64,
    pub avail: u64,
    pub used: u64,
}

impl QueueLayout {
    pub fn of(p: &CvmParams, queue: u32) -> QueueLayout {
        let desc = p.io_window_base + u64::from(queue) * 3 * PAGE;
        QueueLayout {
            desc,
            avail: desc + PAGE,
            used: desc + 2 * PAGE,
        }
    }

    pub fn pages(&self) -> [u64; 3] {
        [self.desc / PAGE, self.avail / PAGE, self.used / PAGE]
    }

    pub fn desc_addr(&self, i: u16) -> u64 {
        self.desc + u64::from(i % QUEUE_SIZE) * DESC_SIZE
    }

    pub fn avail_idx_addr(&self) -> u64 {
        self.avail + 2
    }

    pub fn avail_ring_addr(&self, i: u16) -> u64 {
        self.avail + 4 + 2 * u64::from(i % QUEUE_SIZE)
    }

    pub fn used_idx_addr(&self) -> u64 {
        self.used + 2
    }

    pub fn used_ring_addr(&self, i: u16) -> u64 {
        self.used + 4 + 8 * u64::from(i % QUEUE_SIZE)
    }
}

/// A descriptor as stored in the table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RawDesc {
    pub addr: u64,
    pub len: u32,
    pub flags: u16,
    pub next: u16,
}

impl RawDesc {
    pub fn encode(&self) -> [u8; 16] {
        let mut b = [0u8; 16];
        b[0..8].copy_from_slice(&self.addr.to_le_bytes());
        b[8..12].copy_from_slice(&self.len.to_le_bytes());
        b[12..14].copy_from_slice(&self.flags.to_le_bytes());
        b[14..16].copy_from_slice(&self.next.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> RawDesc {
        RawDesc {
            addr: u64::from_le_bytes(b[0..8].try_into().unwrap()),
            len: u32::from_le_bytes(b[8..12].try_into().unwrap()),
            flags: u16::from_le_bytes(b[12..14].try_into().unwrap()),
            next: u16::from_le_bytes(b[14..16].try_into().unwrap()),
        }
    }
}

/// IPA pages covered by `[addr, addr + len)`.
pub fn pages_of(addr: u64, len: u64) -> std::ops::Range<u64> {
    if len == 0 {
        return addr / PAGE..addr / PAGE;
    }
    addr / PAGE..(addr + len - 1) / PAGE + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doorbells() {
        let p = CvmParams {
            io_window_base: 0x10_0000,
            io_window_pages: 16,
            io_queues: 2,
            ..Default::default()
        };
        assert_eq!(doorbell_queue(&p, doorbell_ipa(&p, 1)), Some(1));
        assert_eq!(doorbell_queue(&p, doorbell_ipa(&p, 2)), None);
        assert_eq!(doorbell_queue(&p, doorbell_ipa(&p, 0) + 8), None);
        let q = QueueLayout::of(&p, 1);
        assert_eq!(q.pages(), [0x103, 0x104, 0x105]);
        assert_eq!(pages_of(0x1FFF, 2), 1..3);
    }

    #[test]
    fn desc_codec() {
        let d = RawDesc { addr: 0x1234, len: 9, flags: DESC_F_WRITE, next: 3 };
        assert_eq!(RawDesc::decode(&d.encode()), d);
    }
}
