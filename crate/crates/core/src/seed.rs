//! Deterministic seed derivation.
//!
//! Every RNG in the crate is seeded through [`mix`] so that independent
//! components (per-client streams, per-repeat data, shuffles) get decoupled
//! seeds from one base seed, stably across platforms and releases.

/// Derive a sub-seed from a base seed and a purpose tag (splitmix64 finalizer).
pub fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a sub-seed keyed by tag and index, for per-item streams.
pub fn mix2(seed: u64, tag: u64, index: u64) -> u64 {
    mix(mix(seed, tag), index.wrapping_add(1))
}
