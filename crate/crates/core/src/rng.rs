//! Seeded randomness: one independent ChaCha stream per Monte Carlo trial,
//! so results never depend on how trials are scheduled across threads.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::prob::Distribution;

pub type TrialRng = ChaCha8Rng;

/// RNG for trial `index` of an experiment with master seed `seed`.
pub fn trial_rng(seed: u64, index: u64) -> TrialRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Stream reserved for draws made once per experiment (codebooks).
pub fn setup_rng(seed: u64) -> TrialRng {
    trial_rng(seed, u64::MAX)
}

/// Categorical sampler over `0..alphabet`.
#[derive(Debug, Clone)]
pub struct SymbolSampler {
    index: WeightedIndex<f64>,
}

impl SymbolSampler {
    pub fn new(d: &Distribution) -> Self {
        SymbolSampler {
            index: WeightedIndex::new(d.probs()).expect("a valid distribution has positive mass"),
        }
    }

    pub fn from_probs(probs: &[f64]) -> Self {
        SymbolSampler {
            index: WeightedIndex::new(probs).expect("row has positive mass"),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.index.sample(rng)
    }

    pub fn sample_seq<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}
