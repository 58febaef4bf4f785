//! Counter-based random probe vectors. Probe `i` of a set is generated from
//! its own ChaCha stream, so any subset can be materialized independently and
//! in any order with identical results.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Distribution of the probe vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    /// `z ~ N(0, P)` through the preconditioner's sampler.
    GaussianP,
    /// `z ~ N(0, I)`
    GaussianI,
    /// Independent ±1 entries.
    Rademacher,
}

/// Separates the random streams of unrelated estimators sharing one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    LogDet = 1,
    Fisher = 2,
    PredictDiag = 3,
    PredictSim = 4,
    Lanczos = 5,
    Simulation = 6,
    Split = 7,
    Mode = 8,
}

/// A frozen set of probes: fixed count, kind and seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeSet {
    pub count: usize,
    pub kind: ProbeKind,
    pub seed: u64,
    pub domain: Domain,
}

impl ProbeSet {
    pub fn new(count: usize, kind: ProbeKind, seed: u64, domain: Domain) -> Self {
        Self { count, kind, seed, domain }
    }

    /// RNG for probe `index`.
    pub fn rng(&self, index: usize) -> ChaCha8Rng {
        stream_rng(self.seed, self.domain, index as u64)
    }
}

/// RNG of stream `index` within `domain` for a run seed.
pub fn stream_rng(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

pub fn fill_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = rng.sample(StandardNormal);
    }
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    let mut v = alloc::vec![0.0; len];
    fill_normal(rng, &mut v);
    v
}

pub fn fill_rademacher<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    let mut bits = 0u64;
    for (i, v) in out.iter_mut().enumerate() {
        if i % 64 == 0 {
            bits = rng.random();
        }
        *v = if bits & 1 == 1 { 1.0 } else { -1.0 };
        bits >>= 1;
    }
}

pub fn rademacher_vec<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    let mut v = alloc::vec![0.0; len];
    fill_rademacher(rng, &mut v);
    v
}
