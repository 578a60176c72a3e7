//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a base seed and a path of stream indices, so work items can be
//! processed in any order or on any thread and still draw identical numbers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a base seed with a path of indices into a new seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Standard Gumbel(0, 1) draw.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // u in (0, 1): exclude 0 so both logs are finite.
    let u: f64 = loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            break u;
        }
    };
    -(-u.ln()).ln()
}

/// Draws an index from a discrete distribution given by non-negative weights
/// summing to one.
pub fn categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave `acc` a hair below 1; fall back to the last positive entry.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}
