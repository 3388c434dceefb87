// SPDX-License-Identifier: Apache-2.0

//! Virtqueue traffic between a cVM's I/O window and its shadow pages.
//! Outbound: on a doorbell the ring pages and the new chains' buffers are
//! copied out. Inbound: on entry, once the used index moved, the ring pages
//! and the completed chains are copied back in. A round trip therefore
//! copies every touched page exactly twice.

use super::exec::{guest_read, GuestCtx};
use super::*;
use crate::guest::MAX_CHAIN;
use crate::layout::{pages_of, QueueLayout, RawDesc, DESC_F_NEXT};
use crate::shadow::{Direction, TransferPage, TransferRegion};

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub(super) struct QueueState {
    last_avail: u16,
    last_used: u16,
    /// Buffer pages of each submitted chain, by head index.
    outstanding: BTreeMap<u16, BTreeSet<u64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub(super) struct IoState {
    queues: Vec<QueueState>,
}

impl IoState {
    pub fn new(queues: u32) -> IoState {
        IoState {
            queues: vec![QueueState::default(); queues as usize],
        }
    }
}

fn u16_at(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

impl Tmm {
    fn monitor_read(plat: &mut Platform, ctx: &GuestCtx, ipa: u64, len: usize) -> Option<Vec<u8>> {
        guest_read(&mut plat.mem, ctx, Requestor::Tmm, ipa, len).ok()
    }

    /// Pages of the chain starting at `head`, restricted to the I/O window.
    fn chain_pages(plat: &mut Platform, ctx: &GuestCtx, q: &QueueLayout, head: u16) -> BTreeSet<u64> {
        let io = ctx.params.io_pages();
        let mut out = BTreeSet::new();
        let mut i = head;
        for _ in 0..MAX_CHAIN {
            let Some(b) = Self::monitor_read(plat, ctx, q.desc_addr(i), 16) else { break };
            let d = RawDesc::decode(&b);
            let len = u64::from(d.len).min(GRANULE_SIZE as u64 * MAX_CHAIN as u64);
            out.extend(pages_of(d.addr, len).filter(|p| io.contains(p)));
            if d.flags & DESC_F_NEXT == 0 {
                break;
            }
            i = d.next;
        }
        out
    }

    pub(super) fn io_sync_out(&mut self, plat: &mut Platform, ctx: &GuestCtx, queue: u32) {
        let q = QueueLayout::of(&ctx.params, queue);
        let Some(idx) = Self::monitor_read(plat, ctx, q.avail_idx_addr(), 2).map(|b| u16_at(&b)) else {
            return;
        };
        let mut pages: BTreeSet<u64> = q.pages().into_iter().collect();
        let mut st = self.io[&ctx.cvm].queues[queue as usize].clone();
        while st.last_avail != idx {
            if let Some(b) = Self::monitor_read(plat, ctx, q.avail_ring_addr(st.last_avail), 2) {
                let head = u16_at(&b);
                let chain = Self::chain_pages(plat, ctx, &q, head);
                pages.extend(chain.iter().copied());
                st.outstanding.insert(head, chain);
            }
            st.last_avail = st.last_avail.wrapping_add(1);
        }
        self.io.get_mut(&ctx.cvm).unwrap().queues[queue as usize] = st;
        self.transfer(plat, ctx, Direction::SecureToShadow, &pages);
    }

    pub(super) fn io_sync_in(&mut self, plat: &mut Platform, ctx: &GuestCtx) {
        let Some(c) = self.cvms.get(&ctx.cvm) else { return };
        let c = c.clone();
        for queue in 0..ctx.params.io_queues {
            let q = QueueLayout::of(&ctx.params, queue);
            let used_page = q.used / GRANULE_SIZE as u64;
            let Some(shadow) = c.shadow_of_page(used_page) else { continue };
            if plat.mem.granule(shadow).map(|g| g.state()) != Some(GranuleState::NsShadow) {
                continue;
            }
            let used = plat
                .mem
                .read_bytes(Requestor::Tmm, shadow, 0, GRANULE_SIZE)
                .expect("monitor access");
            let off = |a: u64| (a - q.used) as usize;
            let idx = u16_at(&used[off(q.used_idx_addr())..]);
            let st = &mut self.io.get_mut(&ctx.cvm).unwrap().queues[queue as usize];
            if st.last_used == idx {
                continue;
            }
            let mut pages: BTreeSet<u64> = q.pages().into_iter().collect();
            while st.last_used != idx {
                let at = off(q.used_ring_addr(st.last_used));
                let id = u32::from_le_bytes(used[at..at + 4].try_into().unwrap()) as u16;
                if let Some(chain) = st.outstanding.remove(&id) {
                    pages.extend(chain);
                }
                st.last_used = st.last_used.wrapping_add(1);
            }
            self.transfer(plat, ctx, Direction::ShadowToSecure, &pages);
        }
    }

    fn transfer(&mut self, plat: &mut Platform, ctx: &GuestCtx, direction: Direction, pages: &BTreeSet<u64>) {
        let c = &self.cvms[&ctx.cvm];
        let mut plain = Vec::new();
        let mut guarded = Vec::new();
        let prot = self.protection.get(&ctx.cvm);
        for &page in pages {
            let Some(shadow) = c.shadow_of_page(page) else { continue };
            let Some((secure, attrs)) = ttt::translate(&plat.mem, ctx.root, page * GRANULE_SIZE as u64) else {
                continue;
            };
            if attrs.ns {
                continue;
            }
            let p = TransferPage {
                ipa_page: page,
                secure,
                shadow,
            };
            if prot.is_some_and(|pp| pp.is_protected(page)) {
                guarded.push(p);
            } else {
                plain.push(p);
            }
        }
        // Protected pages go one at a time so a tag failure names its page.
        let mut batches = Vec::new();
        if !plain.is_empty() {
            batches.push(plain);
        }
        batches.extend(guarded.into_iter().map(|p| vec![p]));
        let policy = plat.mem.policy();
        for pages in batches {
            let region = TransferRegion { cvm: ctx.cvm, pages };
            let r = self.sync.sync(
                &mut plat.mem,
                &mut plat.ledger,
                &self.options.cost,
                direction,
                &region,
                policy,
                prot,
                &mut plat.sidecar,
            );
            let Ok(stats) = r else { continue };
            self.events.push(MonitorEvent::Sync {
                cvm: ctx.cvm,
                to_shadow: direction == Direction::SecureToShadow,
                pages: stats.pages,
            });
            if stats.integrity_failures > 0 {
                self.events.push(MonitorEvent::IntegrityFailure {
                    cvm: ctx.cvm,
                    page: region.pages[0].ipa_page,
                });
            }
        }
    }
}
