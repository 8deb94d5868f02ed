//! Seeded, sharded random streams.
//!
//! Every consumer derives its generator from `(seed, domain, shard)` so a
//! shard can be produced on any worker and in any order with identical
//! output. Distinct domains keep sampling, filtering and resampling streams
//! independent of each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Number of shots handled by one generator stream.
pub const SHARD_SIZE: usize = 65_536;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Sampling,
    Filter,
    Bootstrap,
    Ensemble,
}

impl Domain {
    fn key(self) -> u64 {
        match self {
            Domain::Sampling => 0x5a4d_504c_0000_0001,
            Domain::Filter => 0x4649_4c54_0000_0002,
            Domain::Bootstrap => 0x424f_4f54_0000_0003,
            Domain::Ensemble => 0x454e_534d_0000_0004,
        }
    }
}

pub fn stream(seed: u64, domain: Domain, shard: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.key());
    rng.set_stream(shard);
    rng
}

/// Number of shards needed to cover `n` items.
pub fn shard_count(n: usize) -> usize {
    n.div_ceil(SHARD_SIZE)
}

/// Half-open index range covered by `shard` out of `n` items.
pub fn shard_range(n: usize, shard: usize) -> std::ops::Range<usize> {
    let start = shard * SHARD_SIZE;
    start.min(n)..(start + SHARD_SIZE).min(n)
}
