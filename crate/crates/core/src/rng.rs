//! Seed splitting: every random draw comes from one named seed through
//! independent ChaCha streams.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::tensor::{randn, LatentTensor};

const INITIAL_NOISE: u64 = 1;
const FORWARD_NOISE: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Standard-normal start of the sampling trajectory.
pub fn initial_noise(seed: u64, shape: (usize, usize, usize)) -> LatentTensor {
    randn(shape, &mut stream(seed, INITIAL_NOISE))
}

/// Forward-diffusion noise for training timestep `t`. Each timestep has
/// its own stream, so draws do not depend on which grid visits `t`.
pub fn forward_noise(seed: u64, t: usize, shape: (usize, usize, usize)) -> LatentTensor {
    randn(shape, &mut stream(seed, FORWARD_NOISE << 32 | t as u64))
}
