//! Deterministic stream derivation: every random choice in the toolkit is a
//! pure function of the master seed plus a named stream and index, so any
//! piece of generated content can be reproduced in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named randomness consumers, kept disjoint so adding draws to one phase
/// never perturbs another.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    DatasetImage = 1,
    BackboneInit = 2,
    FinetuneShuffle = 3,
    AutoencoderInit = 4,
    LearnShuffle = 5,
    LearnOcclusion = 6,
    FrozenSets = 7,
    ValidationSplit = 8,
    ValidationOcclusion = 9,
    PairSampling = 10,
}

/// SplitMix64 finalizer; decorrelates nearby inputs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: Stream, a: u64, b: u64) -> u64 {
    mix(mix(mix(master ^ mix(stream as u64)) ^ a) ^ b)
}

pub fn stream_rng(master: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, a, b))
}
