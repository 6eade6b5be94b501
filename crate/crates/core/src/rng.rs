//! Seeded random streams.
//!
//! Every experiment draws from ChaCha8 keyed by the run seed, with one
//! fixed stream id per purpose. Streams never overlap, so adding draws to
//! one consumer (say, batch assembly) leaves the grammar and the
//! initialization untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Rng = ChaCha8Rng;

/// Named stream ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Grammar = 1,
    Derivation = 2,
    Split = 3,
    Init = 4,
    Batch = 5,
    Eval = 6,
    Transfer = 7,
    GenSame = 8,
    Analysis = 9,
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    sub_stream(seed, which, 0)
}

/// A stream for one purpose, further split by `index` (e.g. a condition or
/// a checkpoint step). Index 0 is the same as [`stream`].
pub fn sub_stream(seed: u64, which: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((which as u64) << 32 | (index & 0xffff_ffff));
    rng
}

/// Serializable position of a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
