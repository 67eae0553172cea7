//! Byte <-> atomic word copies used by the in-place storage structures.

use core::sync::atomic::{AtomicU64, Ordering};

pub(crate) const fn words_for_bytes(n: usize) -> usize {
    n.div_ceil(8)
}

/// Stores `bytes` into `dst` with relaxed atomic stores, zero-padding the
/// last word.
pub(crate) fn store_bytes(dst: &[AtomicU64], bytes: &[u8]) {
    let mut chunks = bytes.chunks_exact(8);
    let mut i = 0;
    for c in &mut chunks {
        dst[i].store(u64::from_le_bytes(c.try_into().unwrap()), Ordering::Relaxed);
        i += 1;
    }
    let rem = chunks.remainder();
    if !rem.is_empty() {
        let mut buf = [0u8; 8];
        buf[..rem.len()].copy_from_slice(rem);
        dst[i].store(u64::from_le_bytes(buf), Ordering::Relaxed);
    }
}

/// Loads `out.len()` bytes from `src` with relaxed atomic loads.
pub(crate) fn load_bytes(src: &[AtomicU64], out: &mut [u8]) {
    let mut chunks = out.chunks_exact_mut(8);
    let mut i = 0;
    for c in &mut chunks {
        c.copy_from_slice(&src[i].load(Ordering::Relaxed).to_le_bytes());
        i += 1;
    }
    let rem = chunks.into_remainder();
    if !rem.is_empty() {
        let w = src[i].load(Ordering::Relaxed).to_le_bytes();
        let n = rem.len();
        rem.copy_from_slice(&w[..n]);
    }
}
