//! Achievable and impermissible `(R, alpha, nu)` regions.
//!
//! Every region is an intersection of strict linear inequalities in the
//! exponents. A test returns the slack of each inequality; a point is
//! `Inside` when all slacks exceed [`SLACK_TOL`], `Outside` when one is below
//! `-SLACK_TOL`, and `Boundary` otherwise.
//!
//! Two identical-channel schemes are covered: the two-stage scheme
//! (threshold synchronization, then joint decoding over a superblock) and the
//! block-by-block ML scheme. Both allow a single synchronous user at
//! `alpha = nu = 0`, where the collision constraint `nu < alpha / 2` is void.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::prob::{
    bhattacharyya_dist, binary_entropy, channel_bhattacharyya, chernoff_idle, chernoff_pair,
    cond_kl, kl_div, kl_slices, mutual_info, output_marginal, tilt_conditional, tilt_output,
    Channel, Distribution, SUM_TOL,
};

/// Strict inequalities must hold with at least this much room.
pub const SLACK_TOL: f64 = 1e-9;

/// Default lattice resolution over the input simplex.
pub const DEFAULT_RESOLUTION: usize = 200;

/// Bisection steps for the tilt parameter.
const LAMBDA_ITERS: usize = 80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Inside,
    Boundary,
    Outside,
}

pub fn classify(slacks: impl IntoIterator<Item = f64>) -> Verdict {
    let min = slacks.into_iter().fold(f64::INFINITY, f64::min);
    if min > SLACK_TOL {
        Verdict::Inside
    } else if min < -SLACK_TOL {
        Verdict::Outside
    } else {
        Verdict::Boundary
    }
}

/// `(R, alpha, nu)`: `M = e^{nR}` messages, `A = e^{n alpha}` blocks,
/// `K = e^{n nu}` users.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegionPoint {
    pub rate: f64,
    pub alpha: f64,
    pub nu: f64,
}

impl RegionPoint {
    pub fn new(rate: f64, alpha: f64, nu: f64) -> Result<Self> {
        for (name, v) in [("rate", rate), ("alpha", alpha), ("nu", nu)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::OutOfRange {
                    name,
                    value: v,
                    range: "[0, inf)",
                });
            }
        }
        Ok(RegionPoint { rate, alpha, nu })
    }

    /// One user in one block: nothing to synchronize against.
    pub fn is_synchronous(&self) -> bool {
        is_synchronous(self.alpha, self.nu)
    }
}

fn is_synchronous(alpha: f64, nu: f64) -> bool {
    alpha == 0.0 && nu == 0.0
}

fn collision_slack(alpha: f64, nu: f64) -> f64 {
    if is_synchronous(alpha, nu) {
        f64::INFINITY
    } else {
        alpha / 2.0 - nu
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Constraint {
    pub name: &'static str,
    pub user: Option<usize>,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionTest {
    pub constraints: Vec<Constraint>,
    pub verdict: Verdict,
}

impl RegionTest {
    fn new(constraints: Vec<Constraint>) -> Self {
        let verdict = classify(constraints.iter().map(|c| c.slack));
        RegionTest {
            constraints,
            verdict,
        }
    }

    pub fn inside(&self) -> bool {
        self.verdict == Verdict::Inside
    }

    /// The constraint with the smallest slack (first one on ties).
    pub fn binding(&self) -> &Constraint {
        self.constraints
            .iter()
            .fold(None, |best: Option<&Constraint>, c| match best {
                Some(b) if b.slack <= c.slack => Some(b),
                _ => Some(c),
            })
            .expect("every region has at least one constraint")
    }

    pub fn slack(&self, name: &str) -> Option<f64> {
        self.constraints
            .iter()
            .filter(|c| c.name == name)
            .map(|c| c.slack)
            .reduce(f64::min)
    }
}

fn constraint(name: &'static str, user: Option<usize>, slack: f64) -> Constraint {
    Constraint { name, user, slack }
}

fn idle_channel(q: &Channel) -> Result<Channel> {
    tilt_conditional(q, 0.0)
}

/// `(D(Q_lambda || Q | P), D(Q_lambda || Q_star | P))`.
///
/// When a row and the idle row have disjoint supports the tilt is undefined
/// at interior `lambda`, and a threshold test separates the two perfectly;
/// both exponents are then `+inf`.
pub fn tilt_divergences(p: &Distribution, q: &Channel, lambda: f64) -> Result<(f64, f64)> {
    let star = idle_channel(q)?;
    match tilt_conditional(q, lambda) {
        Ok(q_lam) => Ok((cond_kl(&q_lam, q, p)?, cond_kl(&q_lam, &star, p)?)),
        Err(Error::DegenerateTilt(_)) => Ok((f64::INFINITY, f64::INFINITY)),
        Err(e) => Err(e),
    }
}

fn check_unit(name: &'static str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::OutOfRange {
            name,
            value: v,
            range: "[0, 1]",
        });
    }
    Ok(())
}

/// Two-stage scheme for identical channels:
/// `nu < alpha/2`, `nu < D(Q_l||Q|P)`, `alpha + R + nu < D(Q_l||Q_star|P)`,
/// `R + nu < I(P, Q)`.
pub fn two_stage_region_test(point: &RegionPoint, p: &Distribution, q: &Channel, lambda: f64) -> Result<RegionTest> {
    check_unit("lambda", lambda)?;
    let (d_code, d_idle) = tilt_divergences(p, q, lambda)?;
    let info = mutual_info(p, q)?;
    let RegionPoint { rate, alpha, nu } = *point;
    Ok(RegionTest::new(vec![
        constraint("collision", None, collision_slack(alpha, nu)),
        constraint("missed_detection", None, d_code - nu),
        constraint("false_alarm", None, d_idle - alpha - rate - nu),
        constraint("rate", None, info - rate - nu),
    ]))
}

/// Best rate for one input distribution, with the tilt attaining it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputRate {
    /// Supremum of achievable rates; negative when nothing is achievable.
    pub rate: f64,
    pub lambda: Option<f64>,
    pub binding: &'static str,
}

impl InputRate {
    fn infeasible(binding: &'static str) -> Self {
        InputRate {
            rate: f64::NEG_INFINITY,
            lambda: None,
            binding,
        }
    }
}

/// Largest `lambda` with `D(Q_lambda || Q | P) >= nu`.
///
/// The divergence to `Q` falls from `D(Q_star||Q|P)` at 0 to 0 at 1 while the
/// divergence to `Q_star` rises, so the false-alarm room is largest there.
fn two_stage_lambda(p: &Distribution, q: &Channel, nu: f64) -> Result<Option<f64>> {
    if nu == 0.0 {
        return Ok(Some(1.0));
    }
    let (d0, _) = tilt_divergences(p, q, 0.0)?;
    if d0 <= nu {
        return Ok(None);
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..LAMBDA_ITERS {
        let mid = 0.5 * (lo + hi);
        if tilt_divergences(p, q, mid)?.0 > nu {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(lo))
}

/// `sup { R : (R, alpha, nu) passes the two-stage test for some lambda }` at input `p`.
pub fn two_stage_best_rate(q: &Channel, p: &Distribution, alpha: f64, nu: f64) -> Result<InputRate> {
    if collision_slack(alpha, nu) <= SLACK_TOL {
        return Ok(InputRate::infeasible("collision"));
    }
    let Some(lambda) = two_stage_lambda(p, q, nu)? else {
        return Ok(InputRate::infeasible("missed_detection"));
    };
    let (_, d_idle) = tilt_divergences(p, q, lambda)?;
    let info = mutual_info(p, q)?;
    let sync_room = d_idle - alpha - nu;
    let rate_room = info - nu;
    let (rate, binding) = if sync_room < rate_room {
        (sync_room, "false_alarm")
    } else {
        (rate_room, "rate")
    };
    Ok(InputRate {
        rate,
        lambda: Some(lambda),
        binding,
    })
}

/// Block-by-block ML scheme with every user on `q` with input `p`:
/// the pairwise constraint `2 nu + R < B(P, Q)` subsumes `nu + R < B(P, Q)`.
pub fn block_ml_best_rate(q: &Channel, p: &Distribution, alpha: f64, nu: f64) -> Result<InputRate> {
    if collision_slack(alpha, nu) <= SLACK_TOL {
        return Ok(InputRate::infeasible("collision"));
    }
    let b = channel_bhattacharyya(p, q)?;
    let idle = chernoff_idle(&q.idle_output(), p, q)?.value;
    let pair_room = b - 2.0 * nu;
    let idle_room = idle - alpha - nu;
    let (rate, binding) = if idle_room <= pair_room {
        (idle_room, "idle")
    } else {
        (pair_room, "pairwise")
    };
    Ok(InputRate {
        rate,
        lambda: None,
        binding,
    })
}

/// How the input distribution of a frontier is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSearch {
    Fixed(Distribution),
    /// Lattice with the given number of steps per coordinate for alphabets of
    /// size at most 3; pairwise mass-transfer ascent above that.
    Optimize { resolution: usize },
}

impl Default for InputSearch {
    fn default() -> Self {
        InputSearch::Optimize {
            resolution: DEFAULT_RESOLUTION,
        }
    }
}

/// All points of `{k / res}` on the simplex of dimension `dim`, in
/// lexicographic order of the count vectors.
pub fn simplex_lattice(dim: usize, res: usize) -> Vec<Vec<f64>> {
    fn rec(dim: usize, left: usize, res: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if cur.len() + 1 == dim {
            cur.push(left);
            out.push(cur.iter().map(|&c| c as f64 / res as f64).collect());
            cur.pop();
            return;
        }
        for c in 0..=left {
            cur.push(c);
            rec(dim, left - c, res, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if dim > 0 {
        rec(dim, res, res, &mut Vec::with_capacity(dim), &mut out);
    }
    out
}

/// Maximizes `f` over input distributions; the first maximizer in lattice
/// order wins ties.
fn maximize_over_inputs<T, F>(dim: usize, search: &InputSearch, f: F) -> Result<(Distribution, T)>
where
    T: Send,
    F: Fn(&Distribution) -> Result<(f64, T)> + Sync,
{
    match search {
        InputSearch::Fixed(p) => {
            if p.alphabet_size() != dim {
                return Err(Error::mismatch(format!(
                    "input has {} symbols, channel has {dim} inputs",
                    p.alphabet_size()
                )));
            }
            let (_, t) = f(p)?;
            Ok((p.clone(), t))
        }
        InputSearch::Optimize { resolution } => {
            if *resolution < 2 {
                return Err(Error::config("input lattice resolution must be at least 2"));
            }
            if dim <= 3 {
                let scored: Vec<(f64, Distribution, T)> = simplex_lattice(dim, *resolution)
                    .into_par_iter()
                    .map(|probs| {
                        let p = Distribution::new(probs)?;
                        let (v, t) = f(&p)?;
                        Ok((v, p, t))
                    })
                    .collect::<Result<_>>()?;
                let (_, p, t) = scored
                    .into_iter()
                    .reduce(|best, cur| if cur.0 > best.0 { cur } else { best })
                    .expect("lattice is non-empty");
                Ok((p, t))
            } else {
                pairwise_ascent(dim, *resolution, &f)
            }
        }
    }
}

fn pairwise_ascent<T, F>(dim: usize, resolution: usize, f: &F) -> Result<(Distribution, T)>
where
    F: Fn(&Distribution) -> Result<(f64, T)>,
{
    let mut probs = vec![1.0 / dim as f64; dim];
    let mut p = Distribution::new(probs.clone())?;
    let (mut best, mut best_t) = f(&p)?;
    let mut step = 0.25;
    let min_step = 1.0 / resolution as f64;
    while step >= min_step {
        let mut improved = false;
        for a in 0..dim {
            for b in 0..dim {
                if a == b || probs[a] < step {
                    continue;
                }
                let mut cand = probs.clone();
                cand[a] -= step;
                cand[b] += step;
                let q = Distribution::from_weights(cand.iter().map(|v| v.max(0.0)).collect())?;
                let (v, t) = f(&q)?;
                if v > best + 1e-15 {
                    best = v;
                    best_t = t;
                    probs = q.probs().to_vec();
                    p = q;
                    improved = true;
                }
            }
        }
        if !improved {
            step /= 2.0;
        }
    }
    Ok((p, best_t))
}

/// One frontier sample: the largest achievable rate at `(alpha, nu)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrontierPoint {
    pub alpha: f64,
    pub nu: f64,
    /// `max(R*, 0)`; `0` with `feasible = false` when nothing is achievable.
    pub r_star: f64,
    pub input: Option<Distribution>,
    pub lambda: Option<f64>,
    pub binding: &'static str,
    pub feasible: bool,
}

fn frontier_point(alpha: f64, nu: f64, p: Distribution, best: InputRate) -> FrontierPoint {
    let feasible = best.rate > SLACK_TOL;
    FrontierPoint {
        alpha,
        nu,
        r_star: if feasible { best.rate } else { 0.0 },
        input: feasible.then_some(p),
        lambda: if feasible { best.lambda } else { None },
        binding: best.binding,
        feasible,
    }
}

fn check_exponents(alpha: f64, nu: f64) -> Result<()> {
    RegionPoint::new(0.0, alpha, nu).map(|_| ())
}

/// `R*(alpha, nu)` of the two-stage scheme, maximized over inputs and tilts.
pub fn two_stage_frontier(q: &Channel, alpha: f64, nu: f64, search: &InputSearch) -> Result<FrontierPoint> {
    check_exponents(alpha, nu)?;
    let (p, best) = maximize_over_inputs(q.inputs(), search, |p| {
        let r = two_stage_best_rate(q, p, alpha, nu)?;
        Ok((r.rate, r))
    })?;
    Ok(frontier_point(alpha, nu, p, best))
}

/// `R*(alpha, nu)` of the block-by-block scheme with a common input for all users.
pub fn block_ml_frontier(q: &Channel, alpha: f64, nu: f64, search: &InputSearch) -> Result<FrontierPoint> {
    check_exponents(alpha, nu)?;
    let (p, best) = maximize_over_inputs(q.inputs(), search, |p| {
        let r = block_ml_best_rate(q, p, alpha, nu)?;
        Ok((r.rate, r))
    })?;
    Ok(frontier_point(alpha, nu, p, best))
}

/// Which identical-channel scheme a frontier sweep evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    TwoStage,
    BlockMl,
}

/// Frontier over the grid `alphas x nus`, in row-major order (alpha outer).
pub fn frontier_grid(
    scheme: Scheme,
    q: &Channel,
    alphas: &[f64],
    nus: &[f64],
    search: &InputSearch,
) -> Result<Vec<FrontierPoint>> {
    let cells: Vec<(f64, f64)> = alphas
        .iter()
        .flat_map(|&a| nus.iter().map(move |&v| (a, v)))
        .collect();
    cells
        .into_par_iter()
        .map(|(a, v)| match scheme {
            Scheme::TwoStage => two_stage_frontier(q, a, v, search),
            Scheme::BlockMl => block_ml_frontier(q, a, v, search),
        })
        .collect()
}

/// Users split over `S` channel classes; class `j` has `e^{n nu_j}` users.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAssignment {
    pub channels: Vec<Channel>,
    pub inputs: Vec<Distribution>,
    pub nus: Vec<f64>,
}

impl ChannelAssignment {
    pub fn new(channels: Vec<Channel>, inputs: Vec<Distribution>, nus: Vec<f64>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::config("at least one channel class is required"));
        }
        if channels.len() != inputs.len() || channels.len() != nus.len() {
            return Err(Error::mismatch(format!(
                "{} channels, {} inputs, {} occupancy exponents",
                channels.len(),
                inputs.len(),
                nus.len()
            )));
        }
        if let Some(&v) = nus.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::OutOfRange {
                name: "nu_j",
                value: v,
                range: "[0, inf)",
            });
        }
        check_common_idle(&channels)?;
        for (q, p) in channels.iter().zip(&inputs) {
            output_marginal(p, q)?;
        }
        Ok(ChannelAssignment {
            channels,
            inputs,
            nus,
        })
    }

    pub fn classes(&self) -> usize {
        self.channels.len()
    }

    /// `sum_j e^{n nu_j}` has exponent `max_j nu_j`.
    pub fn total_nu(&self) -> f64 {
        self.nus.iter().copied().fold(0.0, f64::max)
    }

    pub fn marginals(&self) -> Result<Vec<Distribution>> {
        self.channels
            .iter()
            .zip(&self.inputs)
            .map(|(q, p)| output_marginal(p, q))
            .collect()
    }
}

fn check_common_idle(channels: &[Channel]) -> Result<()> {
    let first = channels[0].idle_output();
    for (j, q) in channels.iter().enumerate().skip(1) {
        if q.outputs() != first.alphabet_size() || q.idle_output().max_abs_diff(&first) > SUM_TOL {
            return Err(Error::mismatch(format!(
                "channel {j} does not share the idle output distribution of channel 0"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassRegionTest {
    pub region: RegionTest,
    /// Overall occupancy exponent `max_j nu_j`.
    pub nu: f64,
    /// `sum_{i<j} e^{-2n B([P_i W_i], [P_j W_j])}`, identical marginals contributing 0.
    pub identification_sum: f64,
    /// Class pairs whose output marginals coincide.
    pub indistinguishable: Vec<(usize, usize)>,
}

/// `(D([PW]_l || [PW]), D([PW]_l || Q_star))` for output-marginal tilts.
pub fn marginal_tilt_divergences(pw: &Distribution, q_star: &Distribution, lambda: f64) -> Result<(f64, f64)> {
    match tilt_output(pw, q_star, lambda) {
        Ok(t) => Ok((kl_div(&t, pw)?, kl_div(&t, q_star)?)),
        Err(Error::DegenerateTilt(_)) => Ok((f64::INFINITY, f64::INFINITY)),
        Err(e) => Err(e),
    }
}

/// Three-stage scheme over channel classes: per class `j`,
/// `nu_j < alpha/2`, `nu_j < D([P_jW_j]_l || [P_jW_j])`,
/// `alpha < D([P_jW_j]_l || Q_star)`, `R + nu_j < I(P_j, W_j)`, plus the
/// identification sum at block length `n`.
pub fn class_region_test(
    rate: f64,
    alpha: f64,
    asg: &ChannelAssignment,
    lambdas: &[f64],
    n: usize,
) -> Result<ClassRegionTest> {
    RegionPoint::new(rate, alpha, asg.total_nu())?;
    if lambdas.len() != asg.classes() {
        return Err(Error::mismatch(format!(
            "{} tilts for {} channel classes",
            lambdas.len(),
            asg.classes()
        )));
    }
    let q_star = asg.channels[0].idle_output();
    let marginals = asg.marginals()?;
    let single = asg.classes() == 1;
    let mut constraints = Vec::with_capacity(4 * asg.classes());
    for j in 0..asg.classes() {
        check_unit("lambda", lambdas[j])?;
        let nu_j = asg.nus[j];
        let (d_code, d_idle) = marginal_tilt_divergences(&marginals[j], &q_star, lambdas[j])?;
        let info = mutual_info(&asg.inputs[j], &asg.channels[j])?;
        let collision = if single {
            collision_slack(alpha, nu_j)
        } else {
            alpha / 2.0 - nu_j
        };
        constraints.push(constraint("collision", Some(j), collision));
        constraints.push(constraint("missed_detection", Some(j), d_code - nu_j));
        constraints.push(constraint("false_alarm", Some(j), d_idle - alpha));
        constraints.push(constraint("rate", Some(j), info - rate - nu_j));
    }
    let mut identification_sum = 0.0;
    let mut indistinguishable = Vec::new();
    for i in 0..marginals.len() {
        for j in i + 1..marginals.len() {
            if marginals[i].max_abs_diff(&marginals[j]) <= SUM_TOL {
                indistinguishable.push((i, j));
            } else {
                let b = bhattacharyya_dist(&marginals[i], &marginals[j])?;
                identification_sum += (-2.0 * n as f64 * b).exp();
            }
        }
    }
    Ok(ClassRegionTest {
        region: RegionTest::new(constraints),
        nu: asg.total_nu(),
        identification_sum,
        indistinguishable,
    })
}

fn check_users(inputs: &[Distribution], channels: &[Channel]) -> Result<()> {
    if inputs.is_empty() || inputs.len() != channels.len() {
        return Err(Error::mismatch(format!(
            "{} inputs for {} channels",
            inputs.len(),
            channels.len()
        )));
    }
    check_common_idle(channels)
}

/// Block-by-block ML scheme, general channels: for every user `i`,
/// `nu < alpha/2`, `nu + R < B(P_i, Q_i)`,
/// `2nu + R < inf_{j != i} C(P_j, Q_j, P_i, Q_i)`,
/// `alpha + nu + R < C(., Q_star, P_i, Q_i)`.
///
/// With a single user the infimum is over the empty set and equals `+inf`.
pub fn block_ml_region_test(point: &RegionPoint, inputs: &[Distribution], channels: &[Channel]) -> Result<RegionTest> {
    check_users(inputs, channels)?;
    let RegionPoint { rate, alpha, nu } = *point;
    let q_star = channels[0].idle_output();
    let k = inputs.len();
    let mut constraints = vec![constraint("collision", None, collision_slack(alpha, nu))];
    for i in 0..k {
        let b = channel_bhattacharyya(&inputs[i], &channels[i])?;
        let mut pair = f64::INFINITY;
        for j in (0..k).filter(|&j| j != i) {
            let c = chernoff_pair(&inputs[j], &channels[j], &inputs[i], &channels[i])?;
            pair = pair.min(c.value);
        }
        let idle = chernoff_idle(&q_star, &inputs[i], &channels[i])?.value;
        constraints.push(constraint("bhattacharyya", Some(i), b - nu - rate));
        constraints.push(constraint("pairwise", Some(i), pair - 2.0 * nu - rate));
        constraints.push(constraint("idle", Some(i), idle - alpha - nu - rate));
    }
    Ok(RegionTest::new(constraints))
}

/// Exponents appearing in the converse lower bound on the error probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConverseExponents {
    /// `mean_i D(Q_{i,l_i} || Q_star | P_i) - (R + nu)(1 - r) + h(r)/n`.
    pub noise_exp: f64,
    /// `mean_i D(Q_{i,l_i} || Q_i | P_i)`.
    pub code_exp: f64,
}

fn mean_tilt_divergences(inputs: &[Distribution], channels: &[Channel], lambdas: &[f64]) -> Result<(f64, f64)> {
    check_users(inputs, channels)?;
    if lambdas.len() != inputs.len() {
        return Err(Error::mismatch(format!(
            "{} tilts for {} users",
            lambdas.len(),
            inputs.len()
        )));
    }
    let (mut code, mut noise) = (0.0, 0.0);
    for ((p, q), &l) in inputs.iter().zip(channels).zip(lambdas) {
        check_unit("lambda", l)?;
        let (d_code, d_idle) = tilt_divergences(p, q, l)?;
        code += d_code;
        noise += d_idle;
    }
    let k = inputs.len() as f64;
    Ok((code / k, noise / k))
}

pub fn converse_exponents(
    inputs: &[Distribution],
    channels: &[Channel],
    lambdas: &[f64],
    rate: f64,
    nu: f64,
    r_bar: f64,
    n: usize,
) -> Result<ConverseExponents> {
    check_unit("r_bar", r_bar)?;
    if n == 0 {
        return Err(Error::config("block length must be at least 1"));
    }
    let (code, noise) = mean_tilt_divergences(inputs, channels, lambdas)?;
    Ok(ConverseExponents {
        noise_exp: noise - (rate + nu) * (1.0 - r_bar) + binary_entropy(r_bar)? / n as f64,
        code_exp: code,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Witness {
    /// Both the occupancy and the asynchrony exponent exceed their tilt bounds.
    Exponents,
    /// `R > I(P_i, Q_i)` for this user.
    Rate { user: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConverseTest {
    pub impermissible: bool,
    pub witness: Option<Witness>,
    /// `nu - mean_i D(Q_{i,l_i} || Q_i | P_i)`.
    pub nu_margin: f64,
    /// `alpha - (mean_i D(Q_{i,l_i} || Q_star | P_i) - (1 - r)(nu + R))`.
    pub alpha_margin: f64,
}

/// Converse witness test at one `(lambda, r_bar)`. A point is impermissible
/// if `nu > mean D(Q_l||Q|P)` and `alpha > mean D(Q_l||Q_star|P) - (1-r)(nu+R)`,
/// or if `R > I(P_i, Q_i)` for some user. Requires `nu < alpha / 2`.
pub fn converse_test(
    point: &RegionPoint,
    inputs: &[Distribution],
    channels: &[Channel],
    lambdas: &[f64],
    r_bar: f64,
) -> Result<ConverseTest> {
    check_unit("r_bar", r_bar)?;
    let RegionPoint { rate, alpha, nu } = *point;
    if nu >= alpha / 2.0 {
        return Err(Error::OutOfRange {
            name: "nu",
            value: nu,
            range: "[0, alpha/2)",
        });
    }
    let (code, noise) = mean_tilt_divergences(inputs, channels, lambdas)?;
    let nu_margin = nu - code;
    let alpha_margin = alpha - (noise - (1.0 - r_bar) * (nu + rate));
    let mut witness = (nu_margin > SLACK_TOL && alpha_margin > SLACK_TOL).then_some(Witness::Exponents);
    if witness.is_none() {
        for (i, (p, q)) in inputs.iter().zip(channels).enumerate() {
            if rate - mutual_info(p, q)? > SLACK_TOL {
                witness = Some(Witness::Rate { user: i });
                break;
            }
        }
    }
    Ok(ConverseTest {
        impermissible: witness.is_some(),
        witness,
        nu_margin,
        alpha_margin,
    })
}

/// Union of the converse witnesses over every `(lambda, r_bar)` pair, with
/// one common tilt for all users.
pub fn converse_test_any(
    point: &RegionPoint,
    inputs: &[Distribution],
    channels: &[Channel],
    lambdas: &[f64],
    r_bars: &[f64],
) -> Result<Option<(f64, f64, ConverseTest)>> {
    for &l in lambdas {
        let per_user = vec![l; inputs.len()];
        for &r in r_bars {
            let t = converse_test(point, inputs, channels, &per_user, r)?;
            if t.impermissible {
                return Ok(Some((l, r, t)));
            }
        }
    }
    Ok(None)
}

/// Smallest rate the converse rules out at `(alpha, nu)` for identical users on
/// `q` with input `p`, and the witness that rules it out.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConverseRate {
    pub alpha: f64,
    pub nu: f64,
    pub r_bar: f64,
    /// Every `R` above this is impermissible; `None` outside `nu < alpha/2`.
    pub r_converse: Option<f64>,
    pub lambda: Option<f64>,
    pub witness: &'static str,
}

/// Solves for the converse rate threshold.
///
/// The exponent witness needs `D(Q_l||Q|P) < nu`, i.e. `lambda` above the root
/// `l0` of `D(Q_l||Q|P) = nu`; `D(Q_l||Q_star|P)` grows with `lambda`, so the
/// weakest requirement on `R` is the limit at `l0`:
/// `R > (D(Q_l0||Q_star|P) - alpha) / (1 - r) - nu`.
pub fn converse_rate(q: &Channel, p: &Distribution, alpha: f64, nu: f64, r_bar: f64) -> Result<ConverseRate> {
    check_exponents(alpha, nu)?;
    check_unit("r_bar", r_bar)?;
    let info = mutual_info(p, q)?;
    let mut out = ConverseRate {
        alpha,
        nu,
        r_bar,
        r_converse: None,
        lambda: None,
        witness: "outside_assumption",
    };
    if nu >= alpha / 2.0 {
        return Ok(out);
    }
    out.r_converse = Some(info);
    out.witness = "rate";
    let Some(l0) = two_stage_lambda(p, q, nu)? else {
        // D(Q_l||Q|P) < nu for every lambda: take lambda = 0, where the noise
        // exponent vanishes.
        let r = if r_bar < 1.0 { -alpha / (1.0 - r_bar) - nu } else { 0.0 };
        out.r_converse = Some(r.max(0.0).min(info));
        out.lambda = Some(0.0);
        out.witness = "exponents";
        return Ok(out);
    };
    if nu == 0.0 {
        return Ok(out);
    }
    let (_, noise) = tilt_divergences(p, q, l0)?;
    let bound = if r_bar < 1.0 {
        ((noise - alpha) / (1.0 - r_bar) - nu).max(0.0)
    } else if alpha > noise {
        0.0
    } else {
        f64::INFINITY
    };
    if bound < info {
        out.r_converse = Some(bound);
        out.lambda = Some(l0);
        out.witness = "exponents";
    }
    Ok(out)
}

/// Largest rate of the three-stage scheme at asynchrony `alpha` for a fixed
/// class assignment. Each class uses the largest tilt keeping the
/// missed-detection exponent above `nu_j`.
pub fn class_frontier(asg: &ChannelAssignment, alpha: f64, n: Option<usize>) -> Result<ClassFrontierPoint> {
    check_exponents(alpha, asg.total_nu())?;
    let q_star = asg.channels[0].idle_output();
    let marginals = asg.marginals()?;
    let single = asg.classes() == 1;
    let mut lambdas = Vec::with_capacity(asg.classes());
    let mut r_star = f64::INFINITY;
    let mut binding = "rate";
    for (j, (marginal, &nu_j)) in marginals.iter().zip(&asg.nus).enumerate() {
        let collision = if single { collision_slack(alpha, nu_j) } else { alpha / 2.0 - nu_j };
        if collision <= SLACK_TOL {
            binding = "collision";
            r_star = f64::NEG_INFINITY;
            lambdas.push(None);
            continue;
        }
        let lambda = marginal_lambda(marginal, &q_star, nu_j)?;
        let feasible = match lambda {
            Some(l) => marginal_tilt_divergences(marginal, &q_star, l)?.1 - alpha > SLACK_TOL,
            None => false,
        };
        lambdas.push(lambda);
        if !feasible {
            if r_star > f64::NEG_INFINITY {
                binding = if lambda.is_none() { "missed_detection" } else { "false_alarm" };
            }
            r_star = f64::NEG_INFINITY;
            continue;
        }
        let room = mutual_info(&asg.inputs[j], &asg.channels[j])? - nu_j;
        r_star = r_star.min(room);
    }
    let feasible = r_star > SLACK_TOL;
    let identification_sum = match n {
        Some(n) => {
            let lam: Vec<f64> = lambdas.iter().map(|l| l.unwrap_or(1.0)).collect();
            Some(class_region_test(0.0, alpha, asg, &lam, n)?.identification_sum)
        }
        None => None,
    };
    Ok(ClassFrontierPoint {
        alpha,
        nu: asg.total_nu(),
        r_star: if feasible { r_star } else { 0.0 },
        lambdas,
        binding,
        feasible,
        identification_sum,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassFrontierPoint {
    pub alpha: f64,
    pub nu: f64,
    pub r_star: f64,
    pub lambdas: Vec<Option<f64>>,
    pub binding: &'static str,
    pub feasible: bool,
    pub identification_sum: Option<f64>,
}

/// Largest `lambda` with `D([PW]_l || [PW]) >= nu`.
fn marginal_lambda(pw: &Distribution, q_star: &Distribution, nu: f64) -> Result<Option<f64>> {
    if nu == 0.0 {
        return Ok(Some(1.0));
    }
    if marginal_tilt_divergences(pw, q_star, 0.0)?.0 <= nu {
        return Ok(None);
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..LAMBDA_ITERS {
        let mid = 0.5 * (lo + hi);
        if marginal_tilt_divergences(pw, q_star, mid)?.0 > nu {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(lo))
}

/// Necessary condition `nu <= alpha`: with more users than blocks some
/// collision is certain.
pub fn occupancy_feasible(alpha: f64, nu: f64) -> bool {
    nu <= alpha
}

/// Closed-form region quantities for `BSC(delta)` with idle symbol 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BscClosedForms {
    delta: f64,
}

/// Two-stage constraint right-hand sides at input `Ber(p)` and tilt `lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BscTwoStage {
    /// `p d(eps_l || delta)`.
    pub missed_detection: f64,
    /// `p d(eps_l || 1 - delta)`.
    pub false_alarm: f64,
    /// `h(p * delta) - h(delta)`.
    pub rate: f64,
}

/// `d(a || b)`, the binary divergence.
pub fn binary_kl(a: f64, b: f64) -> f64 {
    kl_slices(&[a, 1.0 - a], &[b, 1.0 - b])
}

/// `a * b = a(1-b) + (1-a)b`.
pub fn binary_convolution(a: f64, b: f64) -> f64 {
    a * (1.0 - b) + (1.0 - a) * b
}

impl BscClosedForms {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 0.5) {
            return Err(Error::OutOfRange {
                name: "delta",
                value: delta,
                range: "(0, 1/2)",
            });
        }
        Ok(BscClosedForms { delta })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `g(a) = -log(1 - a + 2a sqrt(delta (1 - delta)))`.
    pub fn g(&self, a: f64) -> f64 {
        -(1.0 - a + 2.0 * a * (self.delta * (1.0 - self.delta)).sqrt()).ln()
    }

    /// `g(1/2) = -log(1/2 + sqrt(delta (1 - delta)))`.
    pub fn g_half(&self) -> f64 {
        self.g(0.5)
    }

    /// Crossover probability of the tilted row of input 1.
    pub fn eps_lambda(&self, lambda: f64) -> f64 {
        let d = self.delta;
        let num = d.powf(lambda) * (1.0 - d).powf(1.0 - lambda);
        num / (num + (1.0 - d).powf(lambda) * d.powf(1.0 - lambda))
    }

    pub fn two_stage(&self, p: f64, lambda: f64) -> BscTwoStage {
        let d = self.delta;
        let eps = self.eps_lambda(lambda);
        BscTwoStage {
            missed_detection: p * binary_kl(eps, d),
            false_alarm: p * binary_kl(eps, 1.0 - d),
            rate: binary_entropy(binary_convolution(p, d)).unwrap_or(f64::NAN)
                - binary_entropy(d).unwrap_or(f64::NAN),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bsc() -> Channel {
        Channel::bsc(0.11).unwrap()
    }

    fn ber(p: f64) -> Distribution {
        Distribution::bernoulli(p).unwrap()
    }

    #[test]
    fn two_stage_endpoint_tilts() {
        let pt = RegionPoint::new(0.01, 0.2, 0.05).unwrap();
        let at_one = two_stage_region_test(&pt, &ber(0.5), &bsc(), 1.0).unwrap();
        assert!(at_one.slack("missed_detection").unwrap() < 0.0);
        assert!(!at_one.inside());
        let at_zero = two_stage_region_test(&pt, &ber(0.5), &bsc(), 0.0).unwrap();
        assert!(at_zero.slack("false_alarm").unwrap() < 0.0);
    }

    #[test]
    fn two_stage_bsc_matches_closed_form() {
        let forms = BscClosedForms::new(0.11).unwrap();
        let pt = RegionPoint::new(0.0, 0.0, 0.0).unwrap();
        for &p in &[0.1, 0.3, 0.5, 0.8] {
            for &l in &[0.2, 0.5, 0.9] {
                let t = two_stage_region_test(&pt, &ber(p), &bsc(), l).unwrap();
                let c = forms.two_stage(p, l);
                assert_abs_diff_eq!(t.slack("missed_detection").unwrap(), c.missed_detection, epsilon = 1e-12);
                assert_abs_diff_eq!(t.slack("false_alarm").unwrap(), c.false_alarm, epsilon = 1e-12);
                assert_abs_diff_eq!(t.slack("rate").unwrap(), c.rate, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn frontier_collision_and_capacity() {
        let search = InputSearch::default();
        let f = two_stage_frontier(&bsc(), 0.1, 0.05, &search).unwrap();
        assert!(!f.feasible);
        assert_eq!(f.r_star, 0.0);
        assert_eq!(f.binding, "collision");
        let cap = two_stage_frontier(&bsc(), 0.0, 0.0, &search).unwrap();
        let exact = std::f64::consts::LN_2 - binary_entropy(0.11).unwrap();
        assert_abs_diff_eq!(cap.r_star, exact, epsilon = 1e-9);
    }

    #[test]
    fn block_ml_identical_bsc_reduces_to_g_half() {
        let forms = BscClosedForms::new(0.11).unwrap();
        assert_abs_diff_eq!(forms.g_half(), 0.20715, epsilon = 1e-5);
        let inputs = vec![ber(0.5); 3];
        let channels = vec![bsc(); 3];
        let pt = RegionPoint::new(0.05, 0.12, 0.02).unwrap();
        let t = block_ml_region_test(&pt, &inputs, &channels).unwrap();
        let b = t.binding();
        assert_eq!(b.name, "idle");
        assert_abs_diff_eq!(b.slack + 0.05 + 0.12 + 0.02, forms.g_half(), epsilon = 1e-6);
        let bad = RegionPoint::new(0.0, 0.1, 0.05).unwrap();
        assert!(!block_ml_region_test(&bad, &inputs, &channels).unwrap().inside());
    }

    #[test]
    fn block_ml_frontier_uniform_input() {
        let g = BscClosedForms::new(0.11).unwrap().g_half();
        let f = block_ml_frontier(&bsc(), 0.1, 0.02, &InputSearch::Fixed(ber(0.5))).unwrap();
        assert_abs_diff_eq!(f.r_star + 0.12, g, epsilon = 1e-9);
        assert_eq!(f.binding, "idle");
    }

    #[test]
    fn class_region_examples() {
        let asg = ChannelAssignment::new(vec![bsc()], vec![ber(0.5)], vec![0.0]).unwrap();
        let t = class_region_test(0.1, 0.0, &asg, &[0.5], 10).unwrap();
        assert!(t.region.inside());
        assert_eq!(t.identification_sum, 0.0);

        let twin = ChannelAssignment::new(vec![bsc(), bsc()], vec![ber(0.5), ber(0.5)], vec![0.01, 0.02]).unwrap();
        let t = class_region_test(0.05, 0.1, &twin, &[0.5, 0.5], 10).unwrap();
        assert_eq!(t.indistinguishable, vec![(0, 1)]);
        assert_eq!(t.identification_sum, 0.0);
        assert_eq!(t.nu, 0.02);

        let ones = class_region_test(0.05, 0.1, &twin, &[1.0, 1.0], 10).unwrap();
        assert!(ones.region.slack("missed_detection").unwrap() < 0.0);
    }

    #[test]
    fn converse_examples() {
        let inputs = vec![ber(0.5); 2];
        let channels = vec![bsc(); 2];
        let e = converse_exponents(&inputs, &channels, &[1.0, 1.0], 0.1, 0.02, 0.0, 10).unwrap();
        assert_eq!(e.code_exp, 0.0);
        let d = cond_kl(&bsc(), &idle_channel(&bsc()).unwrap(), &ber(0.5)).unwrap();
        assert_abs_diff_eq!(e.noise_exp, d - 0.12, epsilon = 1e-12);
        let half = converse_exponents(&inputs, &channels, &[1.0, 1.0], 0.1, 0.02, 0.5, 100).unwrap();
        assert_abs_diff_eq!(half.noise_exp - (d - 0.06), std::f64::consts::LN_2 / 100.0, epsilon = 1e-12);

        let pt = RegionPoint::new(0.5, 0.2, 0.05).unwrap();
        let t = converse_test(&pt, &inputs, &channels, &[0.5, 0.5], 0.0).unwrap();
        assert_eq!(t.witness, Some(Witness::Rate { user: 0 }));
        let bad = RegionPoint::new(0.0, 0.1, 0.05).unwrap();
        assert!(converse_test(&bad, &inputs, &channels, &[0.5, 0.5], 0.0).is_err());
    }

    #[test]
    fn occupancy_examples() {
        assert!(!occupancy_feasible(0.2, 0.3));
        assert!(occupancy_feasible(0.2, 0.2));
        assert!(occupancy_feasible(0.7, 0.0));
    }

    #[test]
    fn bsc_forms() {
        let f = BscClosedForms::new(0.11).unwrap();
        assert_abs_diff_eq!(f.eps_lambda(0.5), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(f.eps_lambda(1.0), 0.11, epsilon = 1e-15);
        assert_abs_diff_eq!(f.eps_lambda(0.0), 0.89, epsilon = 1e-15);
        let tiny = BscClosedForms::new(1e-12).unwrap();
        assert_abs_diff_eq!(tiny.g_half(), std::f64::consts::LN_2, epsilon = 1e-5);
        assert!(BscClosedForms::new(0.5).is_err());
    }

    #[test]
    fn lattice_sizes() {
        assert_eq!(simplex_lattice(2, 4).len(), 5);
        assert_eq!(simplex_lattice(3, 4).len(), 15);
        for p in simplex_lattice(3, 7) {
            assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn pairwise_ascent_finds_capacity_of_identity_channel() {
        let q = Channel::identity(4, 0).unwrap();
        let (p, v) = maximize_over_inputs(4, &InputSearch::default(), |p| {
            let i = mutual_info(p, &q)?;
            Ok((i, i))
        })
        .unwrap();
        assert_abs_diff_eq!(v, 4f64.ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(p.prob(2), 0.25, epsilon = 1e-9);
    }
}
