//! Named-stream RNG derivation.
//!
//! Every run is driven by one master seed; each consumer (corpus
//! generation, parameter init, epoch plans, ...) derives its own
//! independent stream so that, e.g., changing the epoch count does not
//! perturb corpus generation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Corpus,
    Split,
    Init,
    Plan,
    Perturb,
    Seeds,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Corpus => 0x01,
            Stream::Split => 0x02,
            Stream::Init => 0x03,
            Stream::Plan => 0x04,
            Stream::Perturb => 0x05,
            Stream::Seeds => 0x06,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a deterministic sub-seed for a named stream.
pub fn stream_seed(master_seed: u64, stream: Stream) -> u64 {
    splitmix64(splitmix64(master_seed) ^ splitmix64(stream.tag()))
}

/// RNG for a named stream of a master seed.
pub fn stream_rng(master_seed: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master_seed, stream))
}
