//! Seed management. Every random stream is identified by a base seed and a
//! stream number, so trajectory `i` draws the same numbers no matter which
//! worker runs it or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Which family of draws a stream belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    ClassicalPath = 0,
    TruthRecord = 1,
    IndependentRecord = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamSeed {
    pub base: u64,
    pub stream: u64,
}

impl StreamSeed {
    pub fn new(base: u64, stream: u64) -> Self {
        Self { base, stream }
    }

    /// Stream for trajectory `index` within a family.
    pub fn for_trajectory(base: u64, kind: StreamKind, index: usize) -> Self {
        Self {
            base,
            stream: ((kind as u64) << 48) | index as u64,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.base);
        rng.set_stream(self.stream);
        rng
    }
}

impl From<u64> for StreamSeed {
    fn from(base: u64) -> Self {
        Self { base, stream: 0 }
    }
}

/// `n` Wiener increments with variance `dt`.
pub fn wiener_increments(seed: StreamSeed, dt: f64, n: usize) -> Vec<f64> {
    let mut rng = seed.rng();
    let sd = dt.sqrt();
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        })
        .collect()
}
