//! Deterministic random number generation.
//!
//! Every stochastic component pulls from its own named stream derived from the
//! master seed, so that e.g. adding an extra weight matrix to the policy does
//! not shift the environment noise sequence. Streams can be further split by
//! index (episode number, layer number), which keeps parallel rollout
//! collection bitwise identical to the sequential path: each episode's
//! generator depends only on (master seed, stream, episode index), never on
//! which thread ran it.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Named random streams. The numeric tag feeds seed derivation, so reordering
/// variants changes every derived seed; append new streams at the end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Network weight initialization.
    Init = 1,
    /// Environment reward corruption and dynamics noise.
    EnvNoise = 2,
    /// Action sampling during rollouts.
    Sampling = 3,
    /// Minibatch shuffling during updates.
    Shuffle = 4,
    /// Probe state sampling for value diagnostics.
    Probe = 5,
    /// Fixed task structure, e.g. the chain's correct-action pattern.
    EnvStructure = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a master seed, a stream tag, and a list of indices into one u64 seed.
pub fn derive_seed(master: u64, stream: Stream, indices: &[u64]) -> u64 {
    let mut s = splitmix64(master ^ (stream as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    for &ix in indices {
        s = splitmix64(s ^ ix.wrapping_mul(0x9FB2_1C65_1E98_DF25));
    }
    s
}

/// A seeded generator for one (stream, indices) substream.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn substream(master: u64, stream: Stream, indices: &[u64]) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(derive_seed(master, stream, indices)),
        }
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.gen::<f64>()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// True with probability p.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.gen::<f64>() < p
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}
