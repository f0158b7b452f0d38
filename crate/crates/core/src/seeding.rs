//! Seed derivation and random streams.
//!
//! Every random quantity is drawn from a ChaCha20 generator keyed by a 64-bit
//! seed and a stream id, so results do not depend on scheduling:
//!
//! * disorder sample `i` of a run uses `derive_seed(master_seed, i)`;
//! * its couplings come from stream [`Stream::Couplings`] of that seed;
//! * MCMC replica `r` on that sample uses stream [`Stream::Chain`]`(r)`.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// SplitMix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// `seed_i = splitmix64(master ^ splitmix64(i))`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Couplings,
    Chain(u32),
}

impl Stream {
    pub fn id(self) -> u64 {
        match self {
            Stream::Couplings => 0,
            Stream::Chain(r) => 1 + u64::from(r),
        }
    }
}

pub fn rng_for(seed: u64, stream: Stream) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}
