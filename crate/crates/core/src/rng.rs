//! Seeded random streams. Every consumer derives its own ChaCha8 stream
//! from the run seed; there is no global generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod streams {
    pub const BACKBONE_INIT: u64 = 1;
    pub const HEAD_INIT: u64 = 2;
    pub const SAN_INIT: u64 = 3;
    pub const TRAIN_ORDER: u64 = 10;
    pub const TRAIN_ROIS: u64 = 11;
    pub const SAN_SAMPLES: u64 = 12;
    pub const EVAL_PROPOSALS: u64 = 20;
    pub const TEXTURE: u64 = 30;
    /// Per-image generation streams start here (offset by image index).
    pub const IMAGE_BASE: u64 = 1 << 32;
}

pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
