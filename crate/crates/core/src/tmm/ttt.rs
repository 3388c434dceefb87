// SPDX-License-Identifier: Apache-2.0

//! Stage-2 translation tables kept in `Ttt` granules.
//!
//! Four levels of 512 eight-byte descriptors, 9 IPA bits per level.
//! Descriptor layout: bits[1:0] = 0b11 for a table (levels 0-2) or page
//! (level 3), 0b01 for a block (levels 1 and 2), anything else invalid;
//! bits[47:12] output address; bit 6 readable; bit 7 writable; bit 55 marks
//! an unprotected (normal-world) target.

use serde::Serialize;

use crate::mem::{GranuleIdx, PhysicalMemory, Requestor, GRANULE_SHIFT};

pub const ROOT_LEVEL: u8 = 0;
pub const LEAF_LEVEL: u8 = 3;
pub const ENTRIES: usize = 512;

const KIND_MASK: u64 = 0b11;
const KIND_TABLE: u64 = 0b11;
const KIND_BLOCK: u64 = 0b01;
const ADDR_MASK: u64 = 0x0000_FFFF_FFFF_F000;
const ATTR_READ: u64 = 1 << 6;
const ATTR_WRITE: u64 = 1 << 7;
const ATTR_NS: u64 = 1 << 55;

/// log2 of the IPA range covered by one entry at `level`.
pub fn level_shift(level: u8) -> u32 {
    GRANULE_SHIFT + 9 * u32::from(LEAF_LEVEL - level)
}

pub fn entry_size(level: u8) -> u64 {
    1u64 << level_shift(level)
}

pub fn index(ipa: u64, level: u8) -> usize {
    ((ipa >> level_shift(level)) as usize) & (ENTRIES - 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Attrs {
    pub read: bool,
    pub write: bool,
    /// Target is a normal-world granule shared with the host.
    pub ns: bool,
}

impl Attrs {
    pub const PROTECTED: Attrs = Attrs {
        read: true,
        write: true,
        ns: false,
    };
    pub const SHARED: Attrs = Attrs {
        read: true,
        write: true,
        ns: true,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Entry {
    Invalid,
    Table(GranuleIdx),
    Page { target: GranuleIdx, attrs: Attrs },
    Block { target: GranuleIdx, attrs: Attrs },
}

pub fn encode(entry: Entry) -> u64 {
    let attrs_bits = |a: Attrs| {
        (if a.read { ATTR_READ } else { 0 })
            | (if a.write { ATTR_WRITE } else { 0 })
            | (if a.ns { ATTR_NS } else { 0 })
    };
    match entry {
        Entry::Invalid => 0,
        Entry::Table(g) => g.addr() | KIND_TABLE,
        Entry::Page { target, attrs } => target.addr() | attrs_bits(attrs) | KIND_TABLE,
        Entry::Block { target, attrs } => target.addr() | attrs_bits(attrs) | KIND_BLOCK,
    }
}

pub fn decode(raw: u64, level: u8) -> Entry {
    let target = GranuleIdx(((raw & ADDR_MASK) >> GRANULE_SHIFT) as usize);
    let attrs = Attrs {
        read: raw & ATTR_READ != 0,
        write: raw & ATTR_WRITE != 0,
        ns: raw & ATTR_NS != 0,
    };
    match (raw & KIND_MASK, level) {
        (KIND_TABLE, LEAF_LEVEL) => Entry::Page { target, attrs },
        (KIND_TABLE, _) => Entry::Table(target),
        (KIND_BLOCK, 1 | 2) => Entry::Block { target, attrs },
        _ => Entry::Invalid,
    }
}

pub fn read_entry(mem: &PhysicalMemory, table: GranuleIdx, level: u8, idx: usize) -> Entry {
    let bytes = mem.granule(table).expect("table granule").contents();
    let raw = u64::from_le_bytes(bytes[idx * 8..idx * 8 + 8].try_into().unwrap());
    decode(raw, level)
}

pub fn write_entry(mem: &mut PhysicalMemory, table: GranuleIdx, idx: usize, entry: Entry) {
    mem.write(Requestor::Tmm, table, idx * 8, &encode(entry).to_le_bytes())
        .expect("monitor access");
}

/// Where a walk for one IPA stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Walk {
    pub level: u8,
    pub table: GranuleIdx,
    pub index: usize,
    pub entry: Entry,
}

/// Walks from `root` until the first non-table entry.
pub fn walk(mem: &PhysicalMemory, root: GranuleIdx, ipa: u64) -> Walk {
    let mut table = root;
    let mut level = ROOT_LEVEL;
    loop {
        let idx = index(ipa, level);
        let entry = read_entry(mem, table, level, idx);
        match entry {
            Entry::Table(child) if level < LEAF_LEVEL => {
                table = child;
                level += 1;
            }
            _ => {
                return Walk {
                    level,
                    table,
                    index: idx,
                    entry,
                }
            }
        }
    }
}

/// Resolves `ipa` to the granule backing its page.
pub fn translate(mem: &PhysicalMemory, root: GranuleIdx, ipa: u64) -> Option<(GranuleIdx, Attrs)> {
    let w = walk(mem, root, ipa);
    match w.entry {
        Entry::Page { target, attrs } => Some((target, attrs)),
        Entry::Block { target, attrs } => {
            let within = (ipa & (entry_size(w.level) - 1)) >> GRANULE_SHIFT;
            Some((target.offset(within as usize), attrs))
        }
        _ => None,
    }
}

/// The table at `level` covering `ipa`, or the level at which the walk
/// found no table.
pub fn table_at(
    mem: &PhysicalMemory,
    root: GranuleIdx,
    ipa: u64,
    level: u8,
) -> Result<GranuleIdx, u8> {
    let mut table = root;
    for l in ROOT_LEVEL..level {
        match read_entry(mem, table, l, index(ipa, l)) {
            Entry::Table(child) => table = child,
            _ => return Err(l),
        }
    }
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Leaf {
    pub ipa: u64,
    pub level: u8,
    pub target: GranuleIdx,
    pub attrs: Attrs,
}

impl Leaf {
    pub fn pages(&self) -> u64 {
        entry_size(self.level) >> GRANULE_SHIFT
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TableInfo {
    pub granule: GranuleIdx,
    pub level: u8,
    pub ipa: u64,
}

/// Every table and leaf reachable from `root`, in IPA order.
pub fn enumerate(mem: &PhysicalMemory, root: GranuleIdx) -> (Vec<TableInfo>, Vec<Leaf>) {
    let mut tables = Vec::new();
    let mut leaves = Vec::new();
    let mut stack = vec![(root, ROOT_LEVEL, 0u64)];
    while let Some((table, level, base)) = stack.pop() {
        tables.push(TableInfo {
            granule: table,
            level,
            ipa: base,
        });
        let bytes = mem.granule(table).expect("table granule");
        if bytes.is_zero() {
            continue;
        }
        for idx in (0..ENTRIES).rev() {
            let ipa = base + idx as u64 * entry_size(level);
            match read_entry(mem, table, level, idx) {
                Entry::Invalid => {}
                Entry::Table(child) => stack.push((child, level + 1, ipa)),
                Entry::Page { target, attrs } | Entry::Block { target, attrs } => {
                    leaves.push(Leaf {
                        ipa,
                        level,
                        target,
                        attrs,
                    })
                }
            }
        }
    }
    leaves.sort_by_key(|l| l.ipa);
    (tables, leaves)
}

pub fn is_empty(mem: &PhysicalMemory, table: GranuleIdx) -> bool {
    mem.granule(table).is_some_and(|g| g.is_zero())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry() {
        assert_eq!(entry_size(3), 4096);
        assert_eq!(entry_size(2), 2 << 20);
        assert_eq!(entry_size(1), 1 << 30);
        assert_eq!(index(0x20_1000, 3), 1);
        assert_eq!(index(0x20_1000, 2), 1);
    }

    #[test]
    fn descriptor_round_trip() {
        let cases = [
            (Entry::Table(GranuleIdx(7)), 1),
            (Entry::Page { target: GranuleIdx(9), attrs: Attrs::SHARED }, 3),
            (Entry::Block { target: GranuleIdx(512), attrs: Attrs::PROTECTED }, 2),
            (Entry::Invalid, 0),
        ];
        for (e, level) in cases {
            assert_eq!(decode(encode(e), level), e);
        }
        // A block descriptor is not valid at the root or leaf level.
        let raw = encode(Entry::Block { target: GranuleIdx(1), attrs: Attrs::PROTECTED });
        assert_eq!(decode(raw, 0), Entry::Invalid);
        assert_eq!(decode(raw, 3), Entry::Invalid);
    }
}
