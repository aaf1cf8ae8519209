//! Seed plumbing: every random draw in the crate comes from a ChaCha stream
//! addressed by `(seed, stream)`, so parallel work is order independent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Generator for stream `stream` of the family keyed by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Named purposes, so different consumers of one seed never share a stream.
pub(crate) mod purpose {
    pub const SPLIT: u64 = 1 << 40;
    pub const MEDIAN: u64 = 2 << 40;
    pub const BOOTSTRAP: u64 = 3 << 40;
    pub const DGP: u64 = 4 << 40;
    pub const FOREST_IPW: u64 = 5 << 40;
}
