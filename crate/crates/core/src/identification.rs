//! Massive identification: assign `A` observed i.i.d. sequences to `A`
//! candidate distributions through a permutation.
//!
//! The ML decoder searches all of `S_A` (desk scale, `A <= 8`); an
//! assignment-problem solver gives the same optimal value and scales past
//! that limit. Finite-`n` error bounds are expressed through
//! `S = sum_{i<j} exp(-2 n B(P_i, P_j))`.

use std::collections::BTreeMap;

use itertools::Itertools;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::assignment::max_weight_assignment;
use crate::error::{Error, Result};
use crate::prob::{bhattacharyya_dist, Distribution};
use crate::rng::{trial_rng, SymbolSampler};

/// Largest `A` for exhaustive search over `S_A` (40320 permutations).
pub const MAX_EXHAUSTIVE_A: usize = 8;

/// Relative tolerance under which two log-likelihood totals count as a tie.
const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct IdentificationInstance {
    dists: Vec<Distribution>,
    n: usize,
}

impl IdentificationInstance {
    pub fn new(dists: Vec<Distribution>, n: usize) -> Result<Self> {
        if dists.len() < 2 {
            return Err(Error::TooFewHypotheses(dists.len()));
        }
        let m = dists[0].alphabet_size();
        if dists.iter().any(|d| d.alphabet_size() != m) {
            return Err(Error::mismatch("distributions have different alphabets"));
        }
        Ok(IdentificationInstance { dists, n })
    }

    pub fn dists(&self) -> &[Distribution] {
        &self.dists
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn size(&self) -> usize {
        self.dists.len()
    }

    pub fn alphabet_size(&self) -> usize {
        self.dists[0].alphabet_size()
    }

    pub fn with_n(&self, n: usize) -> Self {
        IdentificationInstance {
            dists: self.dists.clone(),
            n,
        }
    }
}

/// A bijection on `0..A`; `sigma[i]` is the distribution assigned to sequence `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct PermutationAssignment {
    sigma: Vec<usize>,
}

impl PermutationAssignment {
    pub fn new(sigma: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; sigma.len()];
        for &s in &sigma {
            if s >= sigma.len() || std::mem::replace(&mut seen[s], true) {
                return Err(Error::config(format!("{sigma:?} is not a permutation")));
            }
        }
        Ok(PermutationAssignment { sigma })
    }

    pub fn identity(a: usize) -> Self {
        PermutationAssignment {
            sigma: (0..a).collect(),
        }
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.sigma
    }

    pub fn is_identity(&self) -> bool {
        self.sigma.iter().enumerate().all(|(i, &s)| i == s)
    }

    /// Number of sequences assigned to the wrong distribution.
    pub fn misassigned(&self) -> usize {
        self.sigma.iter().enumerate().filter(|(i, &s)| *i != s).count()
    }
}

/// Symbol counts of each sequence, checked against the alphabet.
fn sequence_counts(samples: &[Vec<usize>], alphabet: usize) -> Result<Vec<Vec<usize>>> {
    samples
        .iter()
        .map(|seq| {
            let mut counts = vec![0usize; alphabet];
            for &s in seq {
                *counts
                    .get_mut(s)
                    .ok_or(Error::SymbolOutOfRange { symbol: s, alphabet })? += 1;
            }
            Ok(counts)
        })
        .collect()
}

/// Log-likelihood of a sequence with the given symbol counts under `p`.
pub(crate) fn counts_loglik(counts: &[usize], p: &[f64]) -> f64 {
    let mut ll = 0.0;
    for (&c, &pa) in counts.iter().zip(p) {
        if c == 0 {
            continue;
        }
        if pa == 0.0 {
            return f64::NEG_INFINITY;
        }
        ll += c as f64 * pa.ln();
    }
    ll
}

/// `ll[i][j] = log P_j(x_i^n)` for every sequence `i` and candidate `j`.
pub fn log_likelihood_matrix(samples: &[Vec<usize>], dists: &[Distribution]) -> Result<Vec<Vec<f64>>> {
    let alphabet = dists.first().map_or(0, Distribution::alphabet_size);
    let counts = sequence_counts(samples, alphabet)?;
    Ok(counts
        .iter()
        .map(|c| dists.iter().map(|d| counts_loglik(c, d.probs())).collect())
        .collect())
}

fn check_samples(samples: &[Vec<usize>], inst: &IdentificationInstance) -> Result<()> {
    if samples.len() != inst.size() {
        return Err(Error::mismatch(format!(
            "{} sequences for {} distributions",
            samples.len(),
            inst.size()
        )));
    }
    Ok(())
}

fn permutation_total(ll: &[Vec<f64>], sigma: &[usize]) -> f64 {
    sigma.iter().enumerate().map(|(i, &j)| ll[i][j]).sum()
}

fn is_tie(a: f64, b: f64) -> bool {
    a == b || (a.is_finite() && b.is_finite() && (a - b).abs() <= TIE_TOL * (1.0 + a.abs().max(b.abs())))
}

/// All permutations attaining the maximal total, in lexicographic order.
pub(crate) fn best_permutations(ll: &[Vec<f64>]) -> (f64, Vec<Vec<usize>>) {
    let a = ll.len();
    let mut best = f64::NEG_INFINITY;
    let mut ties: Vec<Vec<usize>> = Vec::new();
    for sigma in (0..a).permutations(a) {
        let total = permutation_total(ll, &sigma);
        if ties.is_empty() || (total > best && !is_tie(total, best)) {
            best = total;
            ties.clear();
            ties.push(sigma);
        } else if is_tie(total, best) {
            ties.push(sigma);
        }
    }
    (best, ties)
}

pub(crate) fn check_exhaustive(a: usize) -> Result<()> {
    if a > MAX_EXHAUSTIVE_A {
        return Err(Error::guard(format!(
            "exhaustive search over S_A needs A <= {MAX_EXHAUSTIVE_A}, got {a}"
        )));
    }
    Ok(())
}

/// Exhaustive ML decoder `argmax_sigma sum_i log P_{sigma_i}(x_i^n)`; ties go
/// to the lexicographically smallest permutation.
pub fn ml_permutation_decode(
    samples: &[Vec<usize>],
    inst: &IdentificationInstance,
) -> Result<PermutationAssignment> {
    check_samples(samples, inst)?;
    check_exhaustive(inst.size())?;
    let ll = log_likelihood_matrix(samples, &inst.dists)?;
    let (_, ties) = best_permutations(&ll);
    Ok(PermutationAssignment {
        sigma: ties.into_iter().next().expect("S_A is non-empty"),
    })
}

/// ML decoding as a maximum-weight assignment; no size limit.
pub fn assignment_decode(
    samples: &[Vec<usize>],
    inst: &IdentificationInstance,
) -> Result<PermutationAssignment> {
    check_samples(samples, inst)?;
    let ll = log_likelihood_matrix(samples, &inst.dists)?;
    Ok(PermutationAssignment {
        sigma: max_weight_assignment(&ll),
    })
}

/// Total log-likelihood of an assignment.
pub fn assignment_loglik(
    samples: &[Vec<usize>],
    inst: &IdentificationInstance,
    sigma: &PermutationAssignment,
) -> Result<f64> {
    check_samples(samples, inst)?;
    let ll = log_likelihood_matrix(samples, &inst.dists)?;
    Ok(permutation_total(&ll, &sigma.sigma))
}

/// `S = sum_{i<j} exp(-2 n B(P_i, P_j))`.
pub fn identifiability_sum(inst: &IdentificationInstance) -> f64 {
    let n = inst.n as f64;
    let d = &inst.dists;
    let mut s = 0.0;
    for i in 0..d.len() {
        for j in i + 1..d.len() {
            let b = bhattacharyya_dist(&d[i], &d[j]).expect("alphabets checked at construction");
            s += (-2.0 * n * b).exp();
        }
    }
    s
}

/// `16 S / (1 - 4 sqrt(S))`, or `+inf` once `4 sqrt(S) >= 1`.
pub fn pe_upper_bound_from_sum(s: f64) -> f64 {
    let root = 4.0 * s.sqrt();
    if root >= 1.0 {
        f64::INFINITY
    } else {
        16.0 * s / (1.0 - root)
    }
}

pub fn pe_upper_bound(inst: &IdentificationInstance) -> f64 {
    pe_upper_bound_from_sum(identifiability_sum(inst))
}

/// `sqrt(S) / (8 + sqrt(S))`. Only an asymptotic trend indicator.
pub fn pe_lower_bound_from_sum(s: f64) -> f64 {
    if s.is_infinite() {
        return 1.0;
    }
    let root = s.sqrt();
    root / (8.0 + root)
}

pub fn pe_lower_bound(inst: &IdentificationInstance) -> f64 {
    pe_lower_bound_from_sum(identifiability_sum(inst))
}

/// Monte Carlo error frequency with its binomial standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub trials: u64,
    pub errors: u64,
    pub p_hat: f64,
    pub stderr: f64,
}

impl McEstimate {
    pub fn from_counts(errors: u64, trials: u64) -> Self {
        let p_hat = errors as f64 / trials as f64;
        McEstimate {
            trials,
            errors,
            p_hat,
            stderr: (p_hat * (1.0 - p_hat) / trials as f64).sqrt(),
        }
    }
}

/// Error frequency plus the histogram of misassigned counts over error trials.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentificationRun {
    pub estimate: McEstimate,
    pub r_histogram: BTreeMap<usize, u64>,
}

/// Draws `X_i^n ~ P_i` (identity permutation), decodes with random
/// tie-breaking, and returns the misassigned count (0 on success).
fn identification_trial(inst: &IdentificationInstance, samplers: &[SymbolSampler], seed: u64, trial: u64) -> Result<usize> {
    let mut rng = trial_rng(seed, trial);
    let samples: Vec<Vec<usize>> = samplers
        .iter()
        .map(|s| s.sample_seq(&mut rng, inst.n))
        .collect();
    let ll = log_likelihood_matrix(&samples, &inst.dists)?;
    let (_, ties) = best_permutations(&ll);
    let pick = if ties.len() == 1 {
        0
    } else {
        rng.random_range(0..ties.len())
    };
    let sigma = &ties[pick];
    Ok(sigma.iter().enumerate().filter(|(i, &s)| *i != s).count())
}

/// Runs `trials` identification trials; deterministic in `seed`.
pub fn run_identification(inst: &IdentificationInstance, trials: u64, seed: u64) -> Result<IdentificationRun> {
    if trials == 0 {
        return Err(Error::config("trials must be at least 1"));
    }
    check_exhaustive(inst.size())?;
    let samplers: Vec<SymbolSampler> = inst.dists.iter().map(SymbolSampler::new).collect();
    let outcomes: Vec<usize> = (0..trials)
        .into_par_iter()
        .map(|t| identification_trial(inst, &samplers, seed, t))
        .collect::<Result<_>>()?;
    let mut r_histogram = BTreeMap::new();
    for &r in outcomes.iter().filter(|&&r| r > 0) {
        *r_histogram.entry(r).or_insert(0u64) += 1;
    }
    let errors = r_histogram.values().sum();
    Ok(IdentificationRun {
        estimate: McEstimate::from_counts(errors, trials),
        r_histogram,
    })
}

pub fn mc_identification_error(inst: &IdentificationInstance, trials: u64, seed: u64) -> Result<McEstimate> {
    Ok(run_identification(inst, trials, seed)?.estimate)
}

/// Histogram of `r = |{i : sigma_hat_i != i}|` over error trials.
///
/// `r = 1` cannot occur: a permutation never fixes all but one point.
pub fn dominant_error_profile(inst: &IdentificationInstance, trials: u64, seed: u64) -> Result<BTreeMap<usize, u64>> {
    Ok(run_identification(inst, trials, seed)?.r_histogram)
}
