//! Seed derivation.
//!
//! Every random draw in a run comes from a ChaCha8 generator whose seed is
//! `derive(base_seed + run_id, stream, index)`: the run seed, the stream tag
//! and an index (an epoch number, for instance) are folded together with the
//! SplitMix64 finaliser. Streams never share a generator, so adding draws to
//! one stream cannot shift another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Shuffle,
    Dropout,
    FewShot,
    SourceSubset,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x494e_4954,
            Stream::Shuffle => 0x5348_5546,
            Stream::Dropout => 0x4452_4f50,
            Stream::FewShot => 0x4645_5753,
            Stream::SourceSubset => 0x5352_4353,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(run_seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(run_seed) ^ stream.tag()) ^ index)
}

pub fn rng(run_seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(run_seed, stream, index))
}
