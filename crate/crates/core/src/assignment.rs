//! Maximum-weight perfect assignment (Hungarian method) for log-likelihood
//! matrices whose entries may be `-inf`.
//!
//! Costs are compared lexicographically as (number of infinite entries,
//! finite remainder), so support violations never swamp the precision of the
//! finite part.

use std::cmp::Ordering;
use std::ops::{Add, Sub};

#[derive(Debug, Clone, Copy, PartialEq)]
struct LexCost {
    inf: i64,
    fin: f64,
}

impl LexCost {
    const ZERO: LexCost = LexCost { inf: 0, fin: 0.0 };
    const HUGE: LexCost = LexCost {
        inf: 1 << 40,
        fin: 0.0,
    };

    fn from_loglik(ll: f64) -> Self {
        if ll == f64::NEG_INFINITY {
            LexCost { inf: 1, fin: 0.0 }
        } else {
            LexCost { inf: 0, fin: -ll }
        }
    }
}

impl Add for LexCost {
    type Output = LexCost;
    fn add(self, o: LexCost) -> LexCost {
        LexCost {
            inf: self.inf + o.inf,
            fin: self.fin + o.fin,
        }
    }
}

impl Sub for LexCost {
    type Output = LexCost;
    fn sub(self, o: LexCost) -> LexCost {
        LexCost {
            inf: self.inf - o.inf,
            fin: self.fin - o.fin,
        }
    }
}

impl PartialOrd for LexCost {
    fn partial_cmp(&self, o: &LexCost) -> Option<Ordering> {
        match self.inf.cmp(&o.inf) {
            Ordering::Equal => self.fin.partial_cmp(&o.fin),
            ord => Some(ord),
        }
    }
}

/// Returns `sigma` maximizing `sum_i score[i][sigma[i]]` for a square matrix.
///
/// Entries must be finite or `-inf`.
pub fn max_weight_assignment(score: &[Vec<f64>]) -> Vec<usize> {
    let n = score.len();
    if n == 0 {
        return Vec::new();
    }
    let cost = |i: usize, j: usize| LexCost::from_loglik(score[i - 1][j - 1]);

    let mut u = vec![LexCost::ZERO; n + 1];
    let mut v = vec![LexCost::ZERO; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![LexCost::HUGE; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = LexCost::HUGE;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] = u[p[j]] + delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut sigma = vec![0usize; n];
    for j in 1..=n {
        sigma[p[j] - 1] = j - 1;
    }
    sigma
}
