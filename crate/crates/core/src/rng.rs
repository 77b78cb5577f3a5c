//! Seeded random streams.
//!
//! Every stochastic step draws from a ChaCha8 stream keyed by a run seed and
//! a stream id, so per-item streams are independent of evaluation order.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng as StreamRng;

/// Purpose tags keep the streams of one item apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Spec = 1,
    Noise = 2,
    Shuffle = 3,
    Augment = 4,
    Init = 5,
    Dropout = 6,
    Split = 7,
    Render = 8,
    Votes = 9,
}

/// Stream for `(seed, purpose, id)`.
pub fn stream(seed: u64, purpose: Purpose, id: u64) -> StreamRng {
    let mut rng = StreamRng::seed_from_u64(mix(seed ^ ((purpose as u64) << 56)));
    rng.set_stream(id);
    rng
}

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
