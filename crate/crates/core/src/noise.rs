//! Counter-based Gaussian noise.
//!
//! Every draw is addressed by `(seed, step, patch, cell)`: a ChaCha stream is
//! selected by `(step, patch)` and cells read consecutive positions in it.
//! Results therefore do not depend on the order in which patches are
//! evaluated or on how many threads evaluate them.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::grid::LatentGrid;

/// Step key reserved for the initial `z_T` draw.
pub const INIT_STEP: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseKey {
    pub seed: u64,
    pub step: u32,
    pub patch: u32,
}

impl NoiseKey {
    pub fn new(seed: u64, step: u32, patch: u32) -> Self {
        Self { seed, step, patch }
    }

    fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(((self.step as u64) << 32) | self.patch as u64);
        rng
    }

    /// Standard-normal grid; cell `(r, c, ch)` is draw number
    /// `(r * width + c) * channels + ch` of the keyed stream.
    pub fn normal_grid(&self, height: usize, width: usize, channels: usize) -> LatentGrid {
        let mut rng = self.rng();
        LatentGrid::from_fn(height, width, channels, |_, _, _| {
            StandardNormal.sample(&mut rng)
        })
    }
}
