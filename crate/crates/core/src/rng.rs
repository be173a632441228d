use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; used to derive independent stream seeds from a
/// single user-facing seed so that pipeline stages draw from decorrelated
/// generators yet remain fully reproducible.
pub fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic generator for a (seed, stream) pair.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, stream))
}

/// Named stream identifiers, one per randomized pipeline stage.
pub mod streams {
    pub const WORLD: u64 = 1;
    pub const DATA: u64 = 2;
    pub const EM: u64 = 3;
    pub const MCMC: u64 = 4;
    pub const SAMPLE: u64 = 5;
    pub const REPORT: u64 = 6;
}
