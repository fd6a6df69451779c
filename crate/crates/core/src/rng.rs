//! Every random draw flows from one root seed, split into named streams so
//! that, for example, changing the update rule cannot perturb data order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    ModelSampling = 2,
    Init = 3,
    Search = 4,
    Generator = 5,
    Evaluation = 6,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
