// SPDX-License-Identifier: Apache-2.0

//! Virtio device backends operating on the host-visible shadow of a cVM's
//! I/O window.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::guest::MAX_CHAIN;
use crate::layout::{QueueLayout, RawDesc, BAD_DESCRIPTOR_LEN, DESC_F_NEXT, DESC_F_WRITE};
use crate::mem::{GranuleIdx, GRANULE_SIZE};
use crate::platform::Platform;
use crate::tmm::cvm::CvmParams;

pub const SECTOR_SIZE: u64 = 512;
pub const BLK_T_IN: u32 = 0;
pub const BLK_T_OUT: u32 = 1;
pub const BLK_S_OK: u8 = 0;
pub const BLK_S_IOERR: u8 = 1;
pub const BLK_HEADER_LEN: u32 = 16;
/// First interrupt id handed out to devices.
pub const DEVICE_INTID_BASE: u32 = 40;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeviceSpec {
    Blk {
        queue: u32,
        #[serde(default = "default_sectors")]
        sectors: u64,
        /// Backing image file; kept in memory when absent.
        #[serde(default)]
        path: Option<PathBuf>,
        #[serde(default)]
        intid: Option<u32>,
    },
    Net {
        rx: u32,
        tx: u32,
        #[serde(default)]
        intid: Option<u32>,
    },
}

fn default_sectors() -> u64 {
    64
}

impl DeviceSpec {
    pub fn queues(&self) -> Vec<u32> {
        match self {
            DeviceSpec::Blk { queue, .. } => vec![*queue],
            DeviceSpec::Net { rx, tx, .. } => vec![*rx, *tx],
        }
    }
}

/// Where the host finds the shadow of each I/O window page.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ShadowMap {
    pub first_page: u64,
    pub pages: u64,
    /// Shadow granule of the first window page.
    pub base: GranuleIdx,
}

impl ShadowMap {
    fn granule(&self, ipa_page: u64) -> Option<GranuleIdx> {
        (ipa_page >= self.first_page && ipa_page < self.first_page + self.pages)
            .then(|| self.base.offset((ipa_page - self.first_page) as usize))
    }
}

/// Host access to I/O window memory through the shadow pages.
pub(crate) struct IoView<'a> {
    pub plat: &'a mut Platform,
    pub map: ShadowMap,
}

const PAGE: u64 = GRANULE_SIZE as u64;

impl IoView<'_> {
    fn spans(&self, ipa: u64, len: usize) -> Option<Vec<(GranuleIdx, usize, usize)>> {
        let end = ipa.checked_add(len as u64)?;
        let mut out = Vec::new();
        let mut cur = ipa;
        while cur < end {
            let off = (cur % PAGE) as usize;
            let n = ((end - cur) as usize).min(GRANULE_SIZE - off);
            out.push((self.map.granule(cur / PAGE)?, off, n));
            cur += n as u64;
        }
        Some(out)
    }

    pub fn read(&mut self, ipa: u64, len: usize) -> Option<Vec<u8>> {
        let mut out = Vec::with_capacity(len);
        for (g, off, n) in self.spans(ipa, len)? {
            let page = self.plat.host_read(g).ok()?;
            out.extend_from_slice(&page[off..off + n]);
        }
        Some(out)
    }

    pub fn write(&mut self, ipa: u64, bytes: &[u8]) -> Option<()> {
        let spans = self.spans(ipa, bytes.len())?;
        let mut pos = 0;
        for (g, off, n) in spans {
            self.plat.host_write(g, off, &bytes[pos..pos + n]).ok()?;
            pos += n;
        }
        Some(())
    }

    fn in_window(&self, addr: u64, len: u64) -> bool {
        len > 0 && self.spans(addr, len as usize).is_some()
    }
}

/// Device side of one split virtqueue.
#[derive(Clone, Debug, Default)]
struct QueueCursor {
    last_avail: u16,
    used_idx: u16,
}

impl QueueCursor {
    fn pop(&mut self, io: &mut IoView<'_>, q: &QueueLayout) -> Option<u16> {
        let idx = io.read(q.avail_idx_addr(), 2)?;
        if u16::from_le_bytes([idx[0], idx[1]]) == self.last_avail {
            return None;
        }
        let head = io.read(q.avail_ring_addr(self.last_avail), 2)?;
        self.last_avail = self.last_avail.wrapping_add(1);
        Some(u16::from_le_bytes([head[0], head[1]]))
    }

    fn push_used(&mut self, io: &mut IoView<'_>, q: &QueueLayout, head: u16, len: u32) {
        let mut e = [0u8; 8];
        e[..4].copy_from_slice(&u32::from(head).to_le_bytes());
        e[4..].copy_from_slice(&len.to_le_bytes());
        let _ = io.write(q.used_ring_addr(self.used_idx), &e);
        self.used_idx = self.used_idx.wrapping_add(1);
        let _ = io.write(q.used_idx_addr(), &self.used_idx.to_le_bytes());
    }
}

/// Reads and validates the chain at `head`: bounded length and every buffer
/// inside the I/O window.
fn read_chain(io: &mut IoView<'_>, q: &QueueLayout, head: u16) -> Option<Vec<RawDesc>> {
    let mut out = Vec::new();
    let mut i = head;
    loop {
        if out.len() == MAX_CHAIN {
            return None;
        }
        let d = RawDesc::decode(&io.read(q.desc_addr(i), 16)?);
        if !io.in_window(d.addr, u64::from(d.len)) {
            return None;
        }
        out.push(d);
        if d.flags & DESC_F_NEXT == 0 {
            return Some(out);
        }
        i = d.next;
    }
}

#[derive(Debug)]
enum Storage {
    File(File),
    Memory(Vec<u8>),
}

#[derive(Debug)]
pub struct BlkDevice {
    queue: u32,
    sectors: u64,
    storage: Storage,
    cursor: QueueCursor,
}

impl BlkDevice {
    fn capacity(&self) -> u64 {
        self.sectors * SECTOR_SIZE
    }

    fn io(&mut self, write: bool, offset: u64, buf: &mut [u8]) -> std::io::Result<()> {
        match &mut self.storage {
            Storage::File(f) => {
                f.seek(SeekFrom::Start(offset))?;
                if write {
                    f.write_all(buf)?;
                    f.flush()
                } else {
                    f.read_exact(buf)
                }
            }
            Storage::Memory(m) => {
                let r = offset as usize..offset as usize + buf.len();
                if write {
                    m[r].copy_from_slice(buf);
                } else {
                    buf.copy_from_slice(&m[r]);
                }
                Ok(())
            }
        }
    }

    /// Reads `len` bytes of the backing image at byte `offset`.
    pub fn read_image(&mut self, offset: u64, len: usize) -> std::io::Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        self.io(false, offset, &mut buf)?;
        Ok(buf)
    }

    fn serve(&mut self, io: &mut IoView<'_>, params: &CvmParams) -> bool {
        let q = QueueLayout::of(params, self.queue);
        let mut any = false;
        while let Some(head) = self.cursor.pop(io, &q) {
            any = true;
            let len = match read_chain(io, &q, head) {
                Some(chain) => self.request(io, &chain),
                None => BAD_DESCRIPTOR_LEN,
            };
            self.cursor.push_used(io, &q, head, len);
        }
        any
    }

    fn request(&mut self, io: &mut IoView<'_>, chain: &[RawDesc]) -> u32 {
        let (Some(hdr), Some(status)) = (chain.first(), chain.last()) else {
            return BAD_DESCRIPTOR_LEN;
        };
        if chain.len() < 2 || hdr.len < BLK_HEADER_LEN || status.flags & DESC_F_WRITE == 0 {
            return BAD_DESCRIPTOR_LEN;
        }
        let Some(h) = io.read(hdr.addr, BLK_HEADER_LEN as usize) else {
            return BAD_DESCRIPTOR_LEN;
        };
        let kind = u32::from_le_bytes(h[0..4].try_into().unwrap());
        let sector = u64::from_le_bytes(h[8..16].try_into().unwrap());
        let data = &chain[1..chain.len() - 1];
        let total: u64 = data.iter().map(|d| u64::from(d.len)).sum();
        let mut st = BLK_S_OK;
        let mut written = 0u32;
        let in_range = sector
            .checked_mul(SECTOR_SIZE)
            .and_then(|o| o.checked_add(total))
            .is_some_and(|end| end <= self.capacity());
        if !in_range || !matches!(kind, BLK_T_IN | BLK_T_OUT) {
            st = BLK_S_IOERR;
        } else {
            let mut offset = sector * SECTOR_SIZE;
            for d in data {
                let ok = if kind == BLK_T_OUT {
                    io.read(d.addr, d.len as usize)
                        .is_some_and(|mut b| self.io(true, offset, &mut b).is_ok())
                } else {
                    let mut b = vec![0u8; d.len as usize];
                    d.flags & DESC_F_WRITE != 0
                        && self.io(false, offset, &mut b).is_ok()
                        && io.write(d.addr, &b).is_some()
                };
                if !ok {
                    st = BLK_S_IOERR;
                    break;
                }
                if kind == BLK_T_IN {
                    written += d.len;
                }
                offset += u64::from(d.len);
            }
        }
        let _ = io.write(status.addr, &[st]);
        written + 1
    }
}

#[derive(Debug, Default)]
pub struct NetDevice {
    rx: u32,
    tx: u32,
    frames: VecDeque<Vec<u8>>,
    posted: VecDeque<u16>,
    rx_cursor: QueueCursor,
    tx_cursor: QueueCursor,
    /// Every frame the guest transmitted, for inspection.
    pub sent: Vec<Vec<u8>>,
}

impl NetDevice {
    fn serve(&mut self, io: &mut IoView<'_>, params: &CvmParams) -> bool {
        let txq = QueueLayout::of(params, self.tx);
        let rxq = QueueLayout::of(params, self.rx);
        let mut any = false;
        while let Some(head) = self.tx_cursor.pop(io, &txq) {
            any = true;
            let frame = read_chain(io, &txq, head).and_then(|chain| {
                let mut f = Vec::new();
                for d in chain.iter().filter(|d| d.flags & DESC_F_WRITE == 0) {
                    f.extend(io.read(d.addr, d.len as usize)?);
                }
                Some(f)
            });
            match frame {
                Some(f) => {
                    self.sent.push(f.clone());
                    self.frames.push_back(f);
                    self.tx_cursor.push_used(io, &txq, head, 0);
                }
                None => self.tx_cursor.push_used(io, &txq, head, BAD_DESCRIPTOR_LEN),
            }
        }
        while let Some(head) = self.rx_cursor.pop(io, &rxq) {
            self.posted.push_back(head);
        }
        while !self.frames.is_empty() {
            let Some(head) = self.posted.pop_front() else { break };
            any = true;
            let len = match read_chain(io, &rxq, head) {
                Some(chain) => match chain.iter().find(|d| d.flags & DESC_F_WRITE != 0) {
                    Some(d) => {
                        let f = self.frames.pop_front().unwrap();
                        let n = f.len().min(d.len as usize);
                        match io.write(d.addr, &f[..n]) {
                            Some(()) => n as u32,
                            None => BAD_DESCRIPTOR_LEN,
                        }
                    }
                    None => BAD_DESCRIPTOR_LEN,
                },
                None => BAD_DESCRIPTOR_LEN,
            };
            self.rx_cursor.push_used(io, &rxq, head, len);
        }
        any
    }
}

#[derive(Debug)]
pub enum Device {
    Blk(BlkDevice),
    Net(NetDevice),
}

impl Device {
    pub fn new(spec: &DeviceSpec) -> std::io::Result<Device> {
        Ok(match spec {
            DeviceSpec::Blk {
                queue, sectors, path, ..
            } => {
                let size = sectors * SECTOR_SIZE;
                let storage = match path {
                    Some(p) => {
                        let f = std::fs::OpenOptions::new()
                            .read(true)
                            .write(true)
                            .create(true)
                            .truncate(false)
                            .open(p)?;
                        if f.metadata()?.len() < size {
                            f.set_len(size)?;
                        }
                        Storage::File(f)
                    }
                    None => Storage::Memory(vec![0; size as usize]),
                };
                Device::Blk(BlkDevice {
                    queue: *queue,
                    sectors: *sectors,
                    storage,
                    cursor: QueueCursor::default(),
                })
            }
            DeviceSpec::Net { rx, tx, .. } => Device::Net(NetDevice {
                rx: *rx,
                tx: *tx,
                ..Default::default()
            }),
        })
    }

    pub fn handles(&self, queue: u32) -> bool {
        match self {
            Device::Blk(b) => b.queue == queue,
            Device::Net(n) => n.rx == queue || n.tx == queue,
        }
    }

    /// Processes everything the guest made available. Returns whether the
    /// device produced used entries (and so should interrupt the guest).
    pub(crate) fn serve(&mut self, io: &mut IoView<'_>, params: &CvmParams) -> bool {
        match self {
            Device::Blk(b) => b.serve(io, params),
            Device::Net(n) => n.serve(io, params),
        }
    }
}
