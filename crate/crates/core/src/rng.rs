//! Named, seed-derived random substreams.
//!
//! Every random draw in the crate comes from `substream(seed, stream, index)`,
//! so initialization, data sampling and Monte Carlo teachers can be varied
//! independently while a single top-level seed fixes the whole run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers; each purpose gets its own 32-bit tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Stream {
    Init = 1,
    Direction = 2,
    Samples = 3,
    Noise = 4,
    McTeacher = 5,
    WideTeacher = 6,
    Trial = 7,
}

pub fn substream(seed: u64, stream: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // upper 32 bits carry the stream tag, lower 32 bits the index
    rng.set_stream(((stream as u64) << 32) | (index & 0xffff_ffff));
    rng
}

/// Derives a child seed, e.g. one per Monte Carlo trial.
pub fn child_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    use rand::RngCore;
    substream(seed, stream, index).next_u64()
}
