//! Counter-addressed random streams.
//!
//! Every path owns a ChaCha8 stream (key = seed, stream id = path index).
//! Inside a path, cell `(step, mark)` consumes exactly [`WORDS_PER_CELL`]
//! 64-bit words starting at word `WORDS_PER_CELL * (step * n_marks + mark)`,
//! so each cell's draws are a fixed function of `(seed, path, step, mark)`
//! regardless of which thread generates the path or in which order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

pub const WORDS_PER_CELL: usize = 4;

/// Above this mean the Poisson draw falls back to `rand_distr` seeded from
/// the cell's own word, keeping the per-cell budget fixed.
const INVERSION_LIMIT: f64 = 30.0;

pub struct PathStream {
    rng: ChaCha8Rng,
}

impl PathStream {
    pub fn new(seed: u64, path: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path as u64);
        Self { rng }
    }

    /// Draws for the next cell. Always advances the stream by
    /// [`WORDS_PER_CELL`] words.
    pub fn next_cell(&mut self) -> CellDraws {
        let mut words = [0u64; WORDS_PER_CELL];
        for w in &mut words {
            *w = self.rng.next_u64();
        }
        CellDraws { words }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CellDraws {
    words: [u64; WORDS_PER_CELL],
}

impl CellDraws {
    /// Uniform on the open interval (0, 1) from word `i`.
    pub fn uniform(&self, i: usize) -> f64 {
        ((self.words[i] >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
    }

    /// Standard normal from words 0 and 1 (Box-Muller, cosine branch).
    pub fn normal(&self) -> f64 {
        let u1 = self.uniform(0);
        let u2 = self.uniform(1);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Poisson count with the given mean from word 2 (inversion).
    pub fn poisson(&self, mean: f64) -> u32 {
        if mean <= 0.0 {
            return 0;
        }
        if mean > INVERSION_LIMIT {
            let mut sub = ChaCha8Rng::seed_from_u64(self.words[2]);
            let dist = Poisson::new(mean).expect("positive finite mean");
            let k: f64 = dist.sample(&mut sub);
            return k as u32;
        }
        let u = self.uniform(2);
        let mut k = 0u32;
        let mut p = (-mean).exp();
        let mut cdf = p;
        while u > cdf && k < 10_000 {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
            if p == 0.0 {
                break;
            }
        }
        k
    }
}

/// Derives an independent seed for a named sub-experiment.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.rotate_left(17));
    rng.set_stream(tag);
    rng.random()
}
