//! Stable seed derivation. Every random stage gets its own seed hashed from
//! the master seed, so adding or reordering stages elsewhere never shifts
//! another stage's stream.

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a hash of a stage name.
pub fn tag(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Folds `parts` into `master` one word at a time.
pub fn derive(master: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix64(master), |h, &p| mix64(h ^ mix64(p)))
}

/// Seed for `stage` of repetition `rep`.
pub fn stage_seed(master: u64, rep: u64, stage: &str) -> u64 {
    derive(master, &[rep, tag(stage)])
}
