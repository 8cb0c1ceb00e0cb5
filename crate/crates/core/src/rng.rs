//! Named random substreams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Substream {
    Init,
    AuxInit,
    Shuffle,
    Synth,
    DevSplit,
}

impl Substream {
    fn id(self) -> u64 {
        match self {
            Substream::Init => 1,
            Substream::AuxInit => 2,
            Substream::Shuffle => 3,
            Substream::Synth => 4,
            Substream::DevSplit => 5,
        }
    }
}

pub fn substream(seed: u64, which: Substream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}
