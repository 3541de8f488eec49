//! Deterministic seed derivation.
//!
//! Every randomized stage draws from its own ChaCha stream whose seed is
//! derived from the master seed, a role tag, and an index. Reordering or
//! parallelizing stages therefore never perturbs another stage's stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One round of the splitmix64 mixer; advances `state` and returns the output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a stream seed from `(master, tag, index)`.
///
/// The tag is FNV-1a hashed, folded into the master seed together with the
/// index, and passed through two splitmix64 rounds so that neighbouring
/// indices land far apart.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in tag.bytes() {
        h ^= u64::from(byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut state = master ^ h ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    splitmix64(&mut state);
    splitmix64(&mut state)
}

/// ChaCha stream for `(master, tag, index)`.
pub fn stream(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, index))
}
