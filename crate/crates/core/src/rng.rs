//! Deterministic random number generation.
//!
//! Every random draw in the crate goes through [`RngState`], a thin wrapper
//! around the ChaCha8 stream cipher used as a counter-based generator. A
//! generator is identified by a `(seed, stream)` pair; independent consumers
//! (domain sampling, network initialisation, the random-direction branch of
//! the policy, ...) each get their own stream so that adding draws to one of
//! them never perturbs the others.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Well-known stream identifiers.
pub mod streams {
    pub const LQR_MATRICES: u64 = 0;
    pub const NETWORK_INIT: u64 = 1;
    pub const DOMAIN_SAMPLES: u64 = 2;
    pub const POLICY_TIES: u64 = 3;
    pub const EVAL_START: u64 = 4;
    pub const PROBES: u64 = 5;
    pub const EVAL_TIES: u64 = 6;
}

#[derive(Clone, Debug)]
pub struct RngState {
    inner: ChaCha8Rng,
}

impl RngState {
    /// Generator for stream 0 of `seed`.
    pub fn from_seed(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform draw on `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform direction on the unit sphere in `dim` dimensions (normalised Gaussian).
    pub fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| self.standard_normal()).collect();
            let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
            if norm > 1e-12 {
                return v.into_iter().map(|c| c / norm).collect();
            }
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}
