//! Cycles of the weighted complete graph `K_k` and the mean-cycle-gain
//! inequality
//!
//! ```text
//! (1/N_{r,k}) sum_c G(c) <= ((a_1^2 + ... + a_{n_k}^2) / n_k)^(r/2)
//! ```
//!
//! checked by exhaustive enumeration.
//!
//! Length-2 cycles are the unordered vertex pairs. Their gain is the squared
//! edge weight, so that summing over them reproduces
//! `sum_{i<j} exp(-2 n B(P_i, P_j))` when the weights come from
//! [`identification_graph`].

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::prob::{bhattacharyya_dist, Distribution};
use crate::rng::trial_rng;

/// Largest vertex count accepted by [`enumerate_cycles`].
pub const MAX_ENUMERATION_K: usize = 12;

/// Largest vertex count accepted by [`cycle_gain_check`].
pub const MAX_GAIN_CHECK_K: usize = 10;

/// Complete graph on `k` vertices with one non-negative weight per edge,
/// stored in the canonical `(i, j), i < j` row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCompleteGraph {
    k: usize,
    weights: Vec<f64>,
}

pub fn edge_count(k: usize) -> usize {
    k * k.saturating_sub(1) / 2
}

impl WeightedCompleteGraph {
    pub fn new(k: usize, weights: Vec<f64>) -> Result<Self> {
        if k < 2 {
            return Err(Error::OutOfRange {
                name: "k",
                value: k as f64,
                range: "k >= 2",
            });
        }
        if weights.len() != edge_count(k) {
            return Err(Error::mismatch(format!(
                "K_{k} has {} edges, got {} weights",
                edge_count(k),
                weights.len()
            )));
        }
        if let Some(&w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::OutOfRange {
                name: "edge weight",
                value: w,
                range: "[0, inf)",
            });
        }
        Ok(WeightedCompleteGraph { k, weights })
    }

    pub fn constant(k: usize, weight: f64) -> Result<Self> {
        Self::new(k, vec![weight; edge_count(k)])
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Index of edge `{i, j}` in the canonical ordering.
    pub fn edge_index(&self, i: usize, j: usize) -> usize {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        a * self.k - a * (a + 1) / 2 + (b - a - 1)
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[self.edge_index(i, j)]
    }
}

/// An undirected cycle in canonical form: the smallest vertex first, then
/// the smaller of its two neighbours.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cycle {
    vertices: Vec<usize>,
}

impl Cycle {
    /// Canonicalizes any rotation or reflection of a vertex sequence.
    pub fn new(vertices: Vec<usize>) -> Result<Self> {
        let r = vertices.len();
        if r < 2 {
            return Err(Error::OutOfRange {
                name: "cycle length",
                value: r as f64,
                range: "r >= 2",
            });
        }
        let mut seen = vertices.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("cycle vertices must be distinct"));
        }
        let start = (0..r).min_by_key(|&i| vertices[i]).unwrap_or(0);
        let mut v: Vec<usize> = (0..r).map(|i| vertices[(start + i) % r]).collect();
        if r > 2 && v[1] > v[r - 1] {
            v[1..].reverse();
        }
        Ok(Cycle { vertices: v })
    }

    pub fn vertices(&self) -> &[usize] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn reversed(&self) -> Cycle {
        let mut v = self.vertices.clone();
        v.reverse();
        Cycle::new(v).expect("reversal of a valid cycle is valid")
    }
}

fn check_length(k: usize, r: usize) -> Result<()> {
    if r < 2 || r > k {
        return Err(Error::OutOfRange {
            name: "r",
            value: r as f64,
            range: "2 <= r <= k",
        });
    }
    Ok(())
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// `N_{r,k}`: `C(k, r) (r-1)! / 2` for `r >= 3`, and `C(k, 2)` for `r = 2`.
pub fn count_cycles(k: usize, r: usize) -> Result<u128> {
    check_length(k, r)?;
    if r == 2 {
        return Ok(binomial(k, 2));
    }
    let fact: u128 = (1..r as u128).product();
    Ok(binomial(k, r) * fact / 2)
}

/// Every canonical cycle of length `r` in `K_k`, in lexicographic order.
pub fn enumerate_cycles(k: usize, r: usize) -> Result<Vec<Cycle>> {
    check_length(k, r)?;
    if k > MAX_ENUMERATION_K {
        return Err(Error::guard(format!(
            "cycle enumeration limited to k <= {MAX_ENUMERATION_K}, got {k}"
        )));
    }
    let mut out = Vec::new();
    let mut path = Vec::with_capacity(r);
    let mut used = vec![false; k];
    for first in 0..k {
        path.push(first);
        used[first] = true;
        extend_path(k, r, &mut path, &mut used, &mut out);
        used[first] = false;
        path.pop();
    }
    Ok(out)
}

// Vertices after the first are all larger than it; for r > 2 the second
// vertex must be smaller than the last to fix the orientation.
fn extend_path(k: usize, r: usize, path: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Cycle>) {
    if path.len() == r {
        if r == 2 || path[1] < path[r - 1] {
            out.push(Cycle {
                vertices: path.clone(),
            });
        }
        return;
    }
    for v in path[0] + 1..k {
        if used[v] {
            continue;
        }
        used[v] = true;
        path.push(v);
        extend_path(k, r, path, used, out);
        path.pop();
        used[v] = false;
    }
}

/// Product of edge weights along `c`; a 2-cycle contributes its edge twice.
pub fn cycle_gain(g: &WeightedCompleteGraph, c: &Cycle) -> Result<f64> {
    if let Some(&v) = c.vertices.iter().find(|&&v| v >= g.k) {
        return Err(Error::SymbolOutOfRange {
            symbol: v,
            alphabet: g.k,
        });
    }
    let v = &c.vertices;
    let r = v.len();
    if r == 2 {
        let w = g.weight(v[0], v[1]);
        return Ok(w * w);
    }
    Ok((0..r).map(|i| g.weight(v[i], v[(i + 1) % r])).product())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CycleGainCheck {
    pub lhs_mean: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Mean cycle gain over all `r`-cycles against `((sum a^2) / n_k)^(r/2)`,
/// accepting a `1e-12` relative floating-point slack.
pub fn cycle_gain_check(g: &WeightedCompleteGraph, r: usize) -> Result<CycleGainCheck> {
    if g.k > MAX_GAIN_CHECK_K {
        return Err(Error::guard(format!(
            "mean-cycle-gain check limited to k <= {MAX_GAIN_CHECK_K}, got {}",
            g.k
        )));
    }
    let cycles = enumerate_cycles(g.k, r)?;
    gain_check_on(g, r, &cycles)
}

fn gain_check_on(g: &WeightedCompleteGraph, r: usize, cycles: &[Cycle]) -> Result<CycleGainCheck> {
    let total: f64 = cycles
        .iter()
        .map(|c| cycle_gain(g, c))
        .sum::<Result<f64>>()?;
    let lhs_mean = total / cycles.len() as f64;
    let sq_mean = g.weights.iter().map(|a| a * a).sum::<f64>() / g.weights.len() as f64;
    let rhs = sq_mean.powf(r as f64 / 2.0);
    Ok(CycleGainCheck {
        lhs_mean,
        rhs,
        holds: lhs_mean <= rhs * (1.0 + 1e-12),
    })
}

/// Worst case of the mean-cycle-gain inequality over random weight draws at
/// one `(k, r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GainSweepRow {
    pub k: usize,
    pub r: usize,
    pub n_k: usize,
    pub n_rk: u128,
    /// Mean gain and bound of the draw with the largest `lhs_mean / rhs`.
    pub lhs_mean: f64,
    pub rhs: f64,
    pub worst_ratio: f64,
    /// The inequality held for every draw.
    pub holds: bool,
    pub draws: usize,
}

/// Checks the mean-cycle-gain inequality for `k` in `kmin..=kmax`, every
/// `r` in `2..=k`, over `draws` weight vectors uniform on `(0, 1]`.
///
/// Draw `d` of `(k, r)` uses its own seeded stream, so rows do not depend
/// on scheduling.
pub fn cycle_gain_sweep(kmin: usize, kmax: usize, draws: usize, seed: u64) -> Result<Vec<GainSweepRow>> {
    if kmin < 2 || kmax > MAX_GAIN_CHECK_K || kmin > kmax {
        return Err(Error::guard(format!(
            "mean-cycle-gain sweep needs 2 <= kmin <= kmax <= {MAX_GAIN_CHECK_K}"
        )));
    }
    if draws == 0 {
        return Err(Error::config("draws must be at least 1"));
    }
    let cells: Vec<(usize, usize)> = (kmin..=kmax).flat_map(|k| (2..=k).map(move |r| (k, r))).collect();
    cells
        .into_par_iter()
        .map(|(k, r)| {
            let cycles = enumerate_cycles(k, r)?;
            let mut worst: Option<(f64, CycleGainCheck)> = None;
            let mut holds = true;
            for d in 0..draws {
                let stream = ((k * (MAX_GAIN_CHECK_K + 1) + r) * draws + d) as u64;
                let mut rng = trial_rng(seed, stream);
                let weights = (0..edge_count(k)).map(|_| 1.0 - rng.random::<f64>()).collect();
                let g = WeightedCompleteGraph::new(k, weights)?;
                let check = gain_check_on(&g, r, &cycles)?;
                holds &= check.holds;
                let ratio = check.lhs_mean / check.rhs;
                if worst.is_none_or(|(w, _)| ratio > w) {
                    worst = Some((ratio, check));
                }
            }
            let (worst_ratio, check) = worst.expect("draws >= 1");
            Ok(GainSweepRow {
                k,
                r,
                n_k: edge_count(k),
                n_rk: cycles.len() as u128,
                lhs_mean: check.lhs_mean,
                rhs: check.rhs,
                worst_ratio,
                holds,
                draws,
            })
        })
        .collect()
}

/// Enumeration count against the closed-form count and the growth bound
/// `N_{r,k} / n_k^{r/2} <= 4^r`, for one `(k, r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CycleCountRow {
    pub k: usize,
    pub r: usize,
    pub n_rk: u128,
    pub enumerated: usize,
    pub ratio: f64,
    pub counts_match: bool,
    pub growth_bound_holds: bool,
}

pub fn cycle_count_sweep(kmax: usize) -> Result<Vec<CycleCountRow>> {
    if kmax > MAX_ENUMERATION_K {
        return Err(Error::guard(format!(
            "cycle enumeration limited to k <= {MAX_ENUMERATION_K}, got {kmax}"
        )));
    }
    let mut rows = Vec::new();
    for k in 2..=kmax {
        for r in 2..=k {
            let n_rk = count_cycles(k, r)?;
            let enumerated = enumerate_cycles(k, r)?.len();
            let ratio = n_rk as f64 / (edge_count(k) as f64).powf(r as f64 / 2.0);
            rows.push(CycleCountRow {
                k,
                r,
                n_rk,
                enumerated,
                ratio,
                counts_match: enumerated as u128 == n_rk,
                growth_bound_holds: ratio <= 4f64.powi(r as i32),
            });
        }
    }
    Ok(rows)
}

/// Confusability graph with weight `exp(-n B(P_i, P_j))` on each edge and
/// weight 0 between identical distributions.
pub fn identification_graph(dists: &[Distribution], n: usize) -> Result<WeightedCompleteGraph> {
    let k = dists.len();
    if k < 2 {
        return Err(Error::TooFewHypotheses(k));
    }
    let m = dists[0].alphabet_size();
    if dists.iter().any(|d| d.alphabet_size() != m) {
        return Err(Error::mismatch("distributions have different alphabets"));
    }
    let mut weights = Vec::with_capacity(edge_count(k));
    for i in 0..k {
        for j in i + 1..k {
            let w = if dists[i].max_abs_diff(&dists[j]) <= crate::prob::SUM_TOL {
                0.0
            } else {
                (-(n as f64) * bhattacharyya_dist(&dists[i], &dists[j])?).exp()
            };
            weights.push(w);
        }
    }
    WeightedCompleteGraph::new(k, weights)
}
