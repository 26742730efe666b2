//! Finite-alphabet probability objects and the divergence, tilt, and type
//! quantities used by the region and simulation modules.
//!
//! All logarithms are natural, so every rate and exponent is in nats.
//! Zero-probability conventions: `0 log 0 = 0`, `p log(p/0) = +inf` for
//! `p > 0`, and `0^t = 0` for every `t` (including `t = 0`) inside geometric
//! mixtures, so a symbol outside either support drops out of the normalizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on the total mass of a distribution or channel row.
pub const SUM_TOL: f64 = 1e-12;

/// Abscissa tolerance for the golden-section Chernoff searches.
pub const CHERNOFF_T_TOL: f64 = 1e-10;

fn check_probs(probs: &[f64]) -> std::result::Result<(), String> {
    if probs.is_empty() {
        return Err("empty probability vector".into());
    }
    if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(format!("entry {p} is negative or not finite"));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > SUM_TOL {
        return Err(format!("entries sum to {total}, not 1"));
    }
    Ok(())
}

/// Probability vector over the alphabet `0..alphabet_size()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DistributionDoc", into = "DistributionDoc")]
pub struct Distribution {
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DistributionDoc {
    alphabet: usize,
    probs: Vec<f64>,
}

impl TryFrom<DistributionDoc> for Distribution {
    type Error = Error;

    fn try_from(doc: DistributionDoc) -> Result<Self> {
        if doc.alphabet != doc.probs.len() {
            return Err(Error::InvalidDistribution(format!(
                "alphabet is {} but {} probabilities were given",
                doc.alphabet,
                doc.probs.len()
            )));
        }
        Distribution::new(doc.probs)
    }
}

impl From<Distribution> for DistributionDoc {
    fn from(d: Distribution) -> Self {
        DistributionDoc {
            alphabet: d.probs.len(),
            probs: d.probs,
        }
    }
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_probs(&probs).map_err(Error::InvalidDistribution)?;
        Ok(Distribution { probs })
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidDistribution(
                "weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidDistribution("weights sum to zero".into()));
        }
        Ok(Distribution {
            probs: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    /// `Ber(p)` on `{0, 1}`, with `p` the probability of symbol 1.
    pub fn bernoulli(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::OutOfRange {
                name: "p",
                value: p,
                range: "[0, 1]",
            });
        }
        Ok(Distribution {
            probs: vec![1.0 - p, p],
        })
    }

    pub fn uniform(alphabet: usize) -> Result<Self> {
        if alphabet == 0 {
            return Err(Error::InvalidDistribution("empty alphabet".into()));
        }
        Ok(Distribution {
            probs: vec![1.0 / alphabet as f64; alphabet],
        })
    }

    pub fn point_mass(alphabet: usize, symbol: usize) -> Result<Self> {
        if symbol >= alphabet {
            return Err(Error::SymbolOutOfRange { symbol, alphabet });
        }
        let mut probs = vec![0.0; alphabet];
        probs[symbol] = 1.0;
        Ok(Distribution { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn alphabet_size(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, symbol: usize) -> f64 {
        self.probs[symbol]
    }

    pub fn max_abs_diff(&self, other: &Distribution) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_point_mass_on(&self, symbol: usize) -> bool {
        self.probs.get(symbol).is_some_and(|&p| p == 1.0)
    }
}

/// Row-stochastic matrix `Q(y|x)` with a designated idle input symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ChannelDoc", into = "ChannelDoc")]
pub struct Channel {
    rows: Vec<Vec<f64>>,
    idle: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChannelDoc {
    inputs: usize,
    outputs: usize,
    idle: usize,
    rows: Vec<Vec<f64>>,
}

impl TryFrom<ChannelDoc> for Channel {
    type Error = Error;

    fn try_from(doc: ChannelDoc) -> Result<Self> {
        if doc.rows.len() != doc.inputs {
            return Err(Error::InvalidChannel(format!(
                "declared {} inputs but {} rows were given",
                doc.inputs,
                doc.rows.len()
            )));
        }
        if let Some(row) = doc.rows.iter().find(|r| r.len() != doc.outputs) {
            return Err(Error::InvalidChannel(format!(
                "declared {} outputs but a row has {} entries",
                doc.outputs,
                row.len()
            )));
        }
        Channel::new(doc.rows, doc.idle)
    }
}

impl From<Channel> for ChannelDoc {
    fn from(c: Channel) -> Self {
        ChannelDoc {
            inputs: c.rows.len(),
            outputs: c.outputs(),
            idle: c.idle,
            rows: c.rows,
        }
    }
}

impl Channel {
    pub fn new(rows: Vec<Vec<f64>>, idle: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidChannel("no input rows".into()));
        }
        let outputs = rows[0].len();
        for (x, row) in rows.iter().enumerate() {
            if row.len() != outputs {
                return Err(Error::InvalidChannel(format!(
                    "row {x} has {} entries, expected {outputs}",
                    row.len()
                )));
            }
            check_probs(row).map_err(|e| Error::InvalidChannel(format!("row {x}: {e}")))?;
        }
        if idle >= rows.len() {
            return Err(Error::InvalidChannel(format!(
                "idle symbol {idle} is not an input (inputs = {})",
                rows.len()
            )));
        }
        Ok(Channel { rows, idle })
    }

    /// Binary symmetric channel with crossover `delta`; input 0 is idle.
    pub fn bsc(delta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::OutOfRange {
                name: "delta",
                value: delta,
                range: "[0, 1]",
            });
        }
        Channel::new(vec![vec![1.0 - delta, delta], vec![delta, 1.0 - delta]], 0)
    }

    /// Binary erasure channel; output 2 is the erasure and input 0 is idle.
    pub fn bec(eps: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::OutOfRange {
                name: "eps",
                value: eps,
                range: "[0, 1]",
            });
        }
        Channel::new(
            vec![vec![1.0 - eps, 0.0, eps], vec![0.0, 1.0 - eps, eps]],
            0,
        )
    }

    pub fn identity(alphabet: usize, idle: usize) -> Result<Self> {
        let rows = (0..alphabet)
            .map(|x| {
                let mut r = vec![0.0; alphabet];
                r[x] = 1.0;
                r
            })
            .collect();
        Channel::new(rows, idle)
    }

    pub fn inputs(&self) -> usize {
        self.rows.len()
    }

    pub fn outputs(&self) -> usize {
        self.rows[0].len()
    }

    pub fn idle(&self) -> usize {
        self.idle
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.rows[x]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn prob(&self, y: usize, x: usize) -> f64 {
        self.rows[x][y]
    }

    /// `Q_star`, the output distribution of an idle input.
    pub fn idle_row(&self) -> &[f64] {
        &self.rows[self.idle]
    }

    pub fn idle_output(&self) -> Distribution {
        Distribution {
            probs: self.idle_row().to_vec(),
        }
    }

    fn check_input(&self, p: &Distribution) -> Result<()> {
        if p.alphabet_size() != self.inputs() {
            return Err(Error::mismatch(format!(
                "input distribution has {} symbols, channel has {} inputs",
                p.alphabet_size(),
                self.inputs()
            )));
        }
        Ok(())
    }
}

/// Integer symbol counts of a type class `T(P)` at block length `n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeComposition {
    pub counts: Vec<usize>,
    pub n: usize,
}

impl TypeComposition {
    pub fn to_distribution(&self) -> Result<Distribution> {
        if self.n == 0 {
            return Err(Error::EmptySequence);
        }
        Distribution::new(
            self.counts
                .iter()
                .map(|&c| c as f64 / self.n as f64)
                .collect(),
        )
    }
}

/// Result of a one-dimensional Chernoff supremum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChernoffOptimum {
    pub value: f64,
    pub t: f64,
}

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::mismatch(format!(
            "{what}: lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `0^t = 0` for all `t`, otherwise `p^t`.
#[inline]
pub(crate) fn zpow(p: f64, t: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p.powf(t)
    }
}

pub(crate) fn kl_slices(p: &[f64], q: &[f64]) -> f64 {
    let mut d = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return f64::INFINITY;
        }
        d += pi * (pi / qi).ln();
    }
    d.max(0.0)
}

/// `[PQ](y) = sum_x P(x) Q(y|x)`.
pub fn output_marginal(p: &Distribution, q: &Channel) -> Result<Distribution> {
    q.check_input(p)?;
    let mut out = vec![0.0; q.outputs()];
    for (x, &px) in p.probs.iter().enumerate() {
        if px == 0.0 {
            continue;
        }
        for (o, &qy) in out.iter_mut().zip(q.row(x)) {
            *o += px * qy;
        }
    }
    Ok(Distribution { probs: out })
}

/// `D(P1 || P2)` in nats; `+inf` when `P1` is not absolutely continuous
/// with respect to `P2`.
pub fn kl_div(p1: &Distribution, p2: &Distribution) -> Result<f64> {
    same_len(&p1.probs, &p2.probs, "kl_div")?;
    Ok(kl_slices(&p1.probs, &p2.probs))
}

/// `D(Q1 || Q2 | P) = sum_x P(x) D(Q1(.|x) || Q2(.|x))`.
pub fn cond_kl(q1: &Channel, q2: &Channel, p: &Distribution) -> Result<f64> {
    q1.check_input(p)?;
    q2.check_input(p)?;
    if q1.outputs() != q2.outputs() {
        return Err(Error::mismatch("cond_kl: output alphabets differ"));
    }
    Ok(p.probs
        .iter()
        .enumerate()
        .filter(|(_, &px)| px > 0.0)
        .map(|(x, &px)| px * kl_slices(q1.row(x), q2.row(x)))
        .sum())
}

/// `I(P, Q) = D(Q || [PQ] | P)`.
pub fn mutual_info(p: &Distribution, q: &Channel) -> Result<f64> {
    let marginal = output_marginal(p, q)?;
    Ok(p.probs
        .iter()
        .enumerate()
        .filter(|(_, &px)| px > 0.0)
        .map(|(x, &px)| px * kl_slices(q.row(x), &marginal.probs))
        .sum())
}

/// `B(P1, P2) = -log sum_x sqrt(P1(x) P2(x))`; `+inf` for disjoint supports.
pub fn bhattacharyya_dist(p1: &Distribution, p2: &Distribution) -> Result<f64> {
    same_len(&p1.probs, &p2.probs, "bhattacharyya_dist")?;
    let coeff: f64 = p1
        .probs
        .iter()
        .zip(&p2.probs)
        .map(|(a, b)| a.sqrt() * b.sqrt())
        .sum();
    Ok((-coeff.ln()).max(0.0))
}

// sum_x P(x) Q(y|x)^s for every output y
fn powered_marginal(p: &Distribution, q: &Channel, s: f64) -> Vec<f64> {
    let mut out = vec![0.0; q.outputs()];
    for (x, &px) in p.probs.iter().enumerate() {
        if px == 0.0 {
            continue;
        }
        for (o, &qy) in out.iter_mut().zip(q.row(x)) {
            *o += px * zpow(qy, s);
        }
    }
    out
}

/// `mu_{i,j}(t) = -log sum_{x_i, x_j, y} P_i(x_i) P_j(x_j) Q_i(y|x_i)^(1-t) Q_j(y|x_j)^t`.
pub fn mu_pair(
    p_i: &Distribution,
    q_i: &Channel,
    p_j: &Distribution,
    q_j: &Channel,
    t: f64,
) -> Result<f64> {
    check_pair(p_i, q_i, p_j, q_j)?;
    Ok(mu_pair_unchecked(p_i, q_i, p_j, q_j, t))
}

fn mu_pair_unchecked(
    p_i: &Distribution,
    q_i: &Channel,
    p_j: &Distribution,
    q_j: &Channel,
    t: f64,
) -> f64 {
    let a = powered_marginal(p_i, q_i, 1.0 - t);
    let b = powered_marginal(p_j, q_j, t);
    let s: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    -s.ln()
}

/// Idle-versus-user exponent
/// `-log sum_{x, y} P_j(x) Q_star(y)^(1-t) Q_j(y|x)^t`.
pub fn mu_idle(q_star: &Distribution, p_j: &Distribution, q_j: &Channel, t: f64) -> Result<f64> {
    check_idle(q_star, p_j, q_j)?;
    Ok(mu_idle_unchecked(q_star, p_j, q_j, t))
}

fn mu_idle_unchecked(q_star: &Distribution, p_j: &Distribution, q_j: &Channel, t: f64) -> f64 {
    let b = powered_marginal(p_j, q_j, t);
    let s: f64 = q_star
        .probs
        .iter()
        .zip(&b)
        .map(|(&qs, y)| zpow(qs, 1.0 - t) * y)
        .sum();
    -s.ln()
}

fn check_pair(p_i: &Distribution, q_i: &Channel, p_j: &Distribution, q_j: &Channel) -> Result<()> {
    q_i.check_input(p_i)?;
    q_j.check_input(p_j)?;
    if q_i.outputs() != q_j.outputs() {
        return Err(Error::mismatch("channels have different output alphabets"));
    }
    Ok(())
}

fn check_idle(q_star: &Distribution, p_j: &Distribution, q_j: &Channel) -> Result<()> {
    q_j.check_input(p_j)?;
    if q_star.alphabet_size() != q_j.outputs() {
        return Err(Error::mismatch(
            "idle output distribution and channel outputs differ",
        ));
    }
    Ok(())
}

/// Maximizes a concave function on `[0, 1]` by golden-section search, then
/// compares the interior optimum against both endpoints.
pub(crate) fn maximize_concave_unit(f: impl Fn(f64) -> f64) -> ChernoffOptimum {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut a, mut b) = (0.0_f64, 1.0_f64);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > CHERNOFF_T_TOL {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    [(mid, f(mid)), (0.0, f(0.0)), (1.0, f(1.0))]
        .into_iter()
        .fold(
            ChernoffOptimum {
                value: f64::NEG_INFINITY,
                t: mid,
            },
            |best, (t, v)| {
                if v > best.value {
                    ChernoffOptimum { value: v, t }
                } else {
                    best
                }
            },
        )
}

/// `C(P_i, Q_i, P_j, Q_j) = sup_{t in [0,1]} mu_{i,j}(t)` and its maximizer.
pub fn chernoff_pair(
    p_i: &Distribution,
    q_i: &Channel,
    p_j: &Distribution,
    q_j: &Channel,
) -> Result<ChernoffOptimum> {
    check_pair(p_i, q_i, p_j, q_j)?;
    Ok(maximize_concave_unit(|t| {
        mu_pair_unchecked(p_i, q_i, p_j, q_j, t)
    }))
}

/// `C(., Q_star, P_j, Q_j)`, the exponent separating an idle block from user `j`.
pub fn chernoff_idle(
    q_star: &Distribution,
    p_j: &Distribution,
    q_j: &Channel,
) -> Result<ChernoffOptimum> {
    check_idle(q_star, p_j, q_j)?;
    Ok(maximize_concave_unit(|t| {
        mu_idle_unchecked(q_star, p_j, q_j, t)
    }))
}

/// `B(P, Q) = C(P, Q, P, Q) = -log sum_y (sum_x P(x) sqrt(Q(y|x)))^2`.
pub fn channel_bhattacharyya(p: &Distribution, q: &Channel) -> Result<f64> {
    q.check_input(p)?;
    let a = powered_marginal(p, q, 0.5);
    let s: f64 = a.iter().map(|v| v * v).sum();
    Ok((-s.ln()).max(0.0))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::OutOfRange {
            name: "lambda",
            value: lambda,
            range: "[0, 1]",
        });
    }
    Ok(())
}

fn geometric_mix(a: &[f64], b: &[f64], lambda: f64) -> Option<Vec<f64>> {
    let w: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| zpow(x, lambda) * zpow(y, 1.0 - lambda))
        .collect();
    let total: f64 = w.iter().sum();
    (total > 0.0).then(|| w.into_iter().map(|v| v / total).collect())
}

/// `Q_lambda(y|x) ∝ Q(y|x)^lambda Q_star(y)^(1-lambda)`, with `Q_star` the
/// idle row of `q`.
///
/// The endpoints are returned exactly: `lambda = 1` gives `q` and
/// `lambda = 0` gives a channel whose every row is `Q_star`.
pub fn tilt_conditional(q: &Channel, lambda: f64) -> Result<Channel> {
    check_lambda(lambda)?;
    if lambda == 1.0 {
        return Ok(q.clone());
    }
    let star = q.idle_row().to_vec();
    if lambda == 0.0 {
        return Ok(Channel {
            rows: vec![star; q.inputs()],
            idle: q.idle,
        });
    }
    let rows = q
        .rows
        .iter()
        .enumerate()
        .map(|(x, row)| {
            geometric_mix(row, &star, lambda).ok_or_else(|| {
                Error::DegenerateTilt(format!(
                    "row {x} and the idle row have disjoint supports"
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Channel {
        rows,
        idle: q.idle,
    })
}

/// Normalized geometric mixture `Pout^lambda Q_star^(1-lambda)`.
pub fn tilt_output(pout: &Distribution, q_star: &Distribution, lambda: f64) -> Result<Distribution> {
    check_lambda(lambda)?;
    same_len(&pout.probs, &q_star.probs, "tilt_output")?;
    if lambda == 1.0 {
        return Ok(pout.clone());
    }
    if lambda == 0.0 {
        return Ok(q_star.clone());
    }
    geometric_mix(&pout.probs, &q_star.probs, lambda)
        .map(|probs| Distribution { probs })
        .ok_or_else(|| Error::DegenerateTilt("disjoint supports".into()))
}

/// `h(p) = -p log p - (1-p) log(1-p)` in nats.
pub fn binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::OutOfRange {
            name: "p",
            value: p,
            range: "[0, 1]",
        });
    }
    let term = |v: f64| if v == 0.0 { 0.0 } else { -v * v.ln() };
    Ok(term(p) + term(1.0 - p))
}

/// Empirical distribution of `seq` over `0..alphabet`.
pub fn empirical_dist(seq: &[usize], alphabet: usize) -> Result<Distribution> {
    if seq.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut counts = vec![0usize; alphabet];
    for &s in seq {
        *counts
            .get_mut(s)
            .ok_or(Error::SymbolOutOfRange { symbol: s, alphabet })? += 1;
    }
    let n = seq.len() as f64;
    Ok(Distribution {
        probs: counts.into_iter().map(|c| c as f64 / n).collect(),
    })
}

/// Largest-remainder rounding of `n P` to integer counts summing to `n`;
/// equal remainders go to the lowest symbol index first.
pub fn round_to_type(p: &Distribution, n: usize) -> TypeComposition {
    let scaled: Vec<f64> = p.probs.iter().map(|&v| v * n as f64).collect();
    let mut counts: Vec<usize> = scaled.iter().map(|v| v.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    // stable sort keeps lower indices first among equal remainders
    order.sort_by(|&a, &b| {
        let ra = scaled[a] - scaled[a].floor();
        let rb = scaled[b] - scaled[b].floor();
        rb.total_cmp(&ra)
    });
    for &a in order.iter().take(n.saturating_sub(assigned)) {
        counts[a] += 1;
    }
    TypeComposition { counts, n }
}

/// Minimum average error over all estimators for equiprobable hypotheses,
/// achieved by MAP: `1 - (1/N) sum_y max_theta H_theta(y)`.
pub fn map_error(hypotheses: &[Distribution]) -> Result<f64> {
    if hypotheses.len() < 2 {
        return Err(Error::TooFewHypotheses(hypotheses.len()));
    }
    let m = hypotheses[0].alphabet_size();
    if hypotheses.iter().any(|h| h.alphabet_size() != m) {
        return Err(Error::mismatch("hypotheses live on different outcome spaces"));
    }
    let best: f64 = (0..m)
        .map(|y| {
            hypotheses
                .iter()
                .map(|h| h.probs[y])
                .fold(0.0, f64::max)
        })
        .sum();
    Ok((1.0 - best / hypotheses.len() as f64).max(0.0))
}

/// Right-hand side of Fano's inequality for `n_hyp` hypotheses at error
/// `r_bar`: `(1-r) log(N(1-r)) + r log(N r / (N-1))`.
pub fn fano_rhs(n_hyp: usize, r_bar: f64) -> f64 {
    let n = n_hyp as f64;
    let term = |w: f64, arg: f64| if w == 0.0 { 0.0 } else { w * arg.ln() };
    term(1.0 - r_bar, n * (1.0 - r_bar)) + term(r_bar, n * r_bar / (n - 1.0))
}

/// Weighted mixture `sum_i w_i P_i`, renormalized.
pub fn mixture(components: &[Distribution], weights: &[f64]) -> Result<Distribution> {
    if components.is_empty() || components.len() != weights.len() {
        return Err(Error::mismatch("mixture needs one weight per component"));
    }
    let m = components[0].alphabet_size();
    if components.iter().any(|c| c.alphabet_size() != m) {
        return Err(Error::mismatch("mixture components differ in alphabet"));
    }
    let mut probs = vec![0.0; m];
    for (c, &w) in components.iter().zip(weights) {
        for (o, &p) in probs.iter_mut().zip(&c.probs) {
            *o += w * p;
        }
    }
    Distribution::from_weights(probs)
}
