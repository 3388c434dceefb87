// SPDX-License-Identifier: Apache-2.0

//! Tweakable page encryption for shadow I/O memory.
//!
//! Pages marked for protection are XTS-AES-256 encrypted on the way out to
//! the shadow and decrypted on the way back, with the IPA page index as the
//! tweak. Each outbound page also gets an HMAC-SHA256 tag over
//! `(tweak, ciphertext)` stored in a host-visible sidecar; an inbound page
//! whose tag does not verify is not copied back.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use aes::cipher::KeyInit;
use aes::Aes256;
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use sha2::Sha256;
use xts_mode::{get_tweak_default, Xts128};

use crate::mem::GRANULE_SIZE;

pub type Tag = [u8; 32];

pub struct PageProtection {
    key: [u8; 32],
    pages: BTreeSet<u64>,
    xts: Xts128<Aes256>,
    mac_key: [u8; 32],
}

impl fmt::Debug for PageProtection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PageProtection")
            .field("pages", &self.pages)
            .finish_non_exhaustive()
    }
}

// The cipher state is not cloneable; rebuild it from the key.
impl Clone for PageProtection {
    fn clone(&self) -> Self {
        let mut p = PageProtection::new(&self.key);
        p.pages = self.pages.clone();
        p
    }
}

impl PageProtection {
    /// Expands a 256-bit I/O key into the two XTS keys and the MAC key.
    pub fn new(key: &[u8; 32]) -> Self {
        let hk = Hkdf::<Sha256>::new(None, key);
        let mut data = [0u8; 32];
        let mut tweak = [0u8; 32];
        let mut mac_key = [0u8; 32];
        hk.expand(b"io-xts-data", &mut data).expect("32 bytes is a valid length");
        hk.expand(b"io-xts-tweak", &mut tweak).expect("32 bytes is a valid length");
        hk.expand(b"io-mac", &mut mac_key).expect("32 bytes is a valid length");
        let xts = Xts128::new(
            Aes256::new_from_slice(&data).expect("key length"),
            Aes256::new_from_slice(&tweak).expect("key length"),
        );
        PageProtection {
            key: *key,
            pages: BTreeSet::new(),
            xts,
            mac_key,
        }
    }

    pub fn protect(&mut self, pages: impl IntoIterator<Item = u64>) {
        self.pages.extend(pages);
    }

    pub fn unprotect(&mut self, pages: impl IntoIterator<Item = u64>) {
        for p in pages {
            self.pages.remove(&p);
        }
    }

    pub fn is_protected(&self, page: u64) -> bool {
        self.pages.contains(&page)
    }

    pub fn pages(&self) -> &BTreeSet<u64> {
        &self.pages
    }

    pub fn encrypt(&self, page: u64, buf: &mut [u8; GRANULE_SIZE]) {
        self.xts.encrypt_sector(buf, get_tweak_default(page as u128));
    }

    pub fn decrypt(&self, page: u64, buf: &mut [u8; GRANULE_SIZE]) {
        self.xts.decrypt_sector(buf, get_tweak_default(page as u128));
    }

    pub fn tag(&self, page: u64, ciphertext: &[u8; GRANULE_SIZE]) -> Tag {
        let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(&self.mac_key).expect("any key size");
        mac.update(&page.to_le_bytes());
        mac.update(ciphertext);
        mac.finalize().into_bytes().into()
    }

    pub fn verify(&self, page: u64, ciphertext: &[u8; GRANULE_SIZE], tag: &Tag) -> bool {
        let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(&self.mac_key).expect("any key size");
        mac.update(&page.to_le_bytes());
        mac.update(ciphertext);
        mac.verify_slice(tag).is_ok()
    }
}

/// Integrity tags for protected shadow pages, keyed by (cVM, IPA page).
/// Lives in normal memory: the host may read and move tags but cannot
/// forge them.
#[derive(Clone, Debug, Default, Hash)]
pub struct TagSidecar {
    tags: BTreeMap<(u32, u64), Tag>,
}

impl TagSidecar {
    pub fn get(&self, cvm: u32, page: u64) -> Option<&Tag> {
        self.tags.get(&(cvm, page))
    }

    pub fn insert(&mut self, cvm: u32, page: u64, tag: Tag) {
        self.tags.insert((cvm, page), tag);
    }

    pub fn remove_cvm(&mut self, cvm: u32) {
        self.tags.retain(|&(c, _), _| c != cvm);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> [u8; GRANULE_SIZE] {
        let mut p = [0u8; GRANULE_SIZE];
        for (i, b) in p.iter_mut().enumerate() {
            *b = (i * 7 % 251) as u8;
        }
        p
    }

    #[test]
    fn round_trip() {
        let prot = PageProtection::new(&[3; 32]);
        let plain = sample();
        let mut buf = plain;
        prot.encrypt(9, &mut buf);
        assert_ne!(buf, plain);
        prot.decrypt(9, &mut buf);
        assert_eq!(buf, plain);
    }

    #[test]
    fn tweak_sensitive() {
        let prot = PageProtection::new(&[3; 32]);
        let mut a = sample();
        let mut b = sample();
        prot.encrypt(1, &mut a);
        prot.encrypt(2, &mut b);
        assert_ne!(a, b);
    }

    #[test]
    fn tag_binds_page_and_content() {
        let prot = PageProtection::new(&[5; 32]);
        let mut c = sample();
        prot.encrypt(4, &mut c);
        let t = prot.tag(4, &c);
        assert!(prot.verify(4, &c, &t));
        assert!(!prot.verify(5, &c, &t));
        c[0] ^= 1;
        assert!(!prot.verify(4, &c, &t));
    }
}
