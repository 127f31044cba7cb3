//! Named, seeded random streams.
//!
//! Every consumer draws from its own ChaCha stream derived from one run seed,
//! so curation, training and decoding never perturb each other and per-item
//! streams are independent of processing order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Curation,
    Hint,
    Shuffle,
    Init,
    Decode,
    OpenEndedSecondStage,
    Bootstrap,
    Synthetic,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Curation => 1,
            Stream::Hint => 2,
            Stream::Shuffle => 3,
            Stream::Init => 4,
            Stream::Decode => 5,
            Stream::OpenEndedSecondStage => 6,
            Stream::Bootstrap => 7,
            Stream::Synthetic => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream { seed }
    }

    /// Generator for item `index` of the named stream.
    pub fn rng(&self, stream: Stream, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        // 16 bits of stream id, 48 bits of item index
        rng.set_stream((stream.id() << 48) | (index & ((1 << 48) - 1)));
        rng
    }
}
