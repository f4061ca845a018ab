//! Seeded random streams.
//!
//! Every random draw in the crate comes from [`ChaCha8Rng`] seeded with the
//! user's 64-bit seed and switched to a stream number derived from a
//! [`Purpose`] and an index (usually a camera or model number). Streams are
//! independent, so the result for camera `p` never depends on how many draws
//! camera `p - 1` consumed, and per-camera work can run in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Name of the generator algorithm, recorded in logs and checkpoints.
pub const GENERATOR: &str = "ChaCha8";

/// Stream namespaces. The discriminant is part of the stream number, so
/// reordering these variants changes every generated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Latent = 1,
    BaseProjection = 2,
    CameraTransform = 3,
    Visibility = 4,
    TrainNoise = 5,
    TestVisibility = 6,
    TestNoise = 7,
    TrainLabels = 8,
    TestLabels = 9,
    Init = 10,
    Sampler = 11,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 40) | (index & ((1 << 40) - 1)));
    rng
}
