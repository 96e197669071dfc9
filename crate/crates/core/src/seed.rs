//! Stable seed derivation for per-stage RNG streams.
//!
//! One global seed fans out to stage seeds via FNV-1a over the stage label
//! followed by a splitmix64 finalizer. Both are fixed algorithms, so derived
//! seeds are identical across platforms and releases (std's `DefaultHasher`
//! makes no such promise).

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive a stage seed from a global seed and a stage label.
pub fn derive_seed(global: u64, label: &str) -> u64 {
    splitmix64(global ^ fnv1a64(label.as_bytes()))
}
