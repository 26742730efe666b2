//! Desk-scale Monte Carlo of the slotted asynchronous access channel.
//!
//! `K` users each pick one of `A` blocks of length `n` and one of `M`
//! messages uniformly at random; every other block carries the idle symbol.
//! Three receivers are simulated:
//!
//! - two-stage: per-block threshold test against every codeword, then joint
//!   ML over the superblock of active blocks (identical channels,
//!   constant-composition codebooks);
//! - three-stage: threshold test on output marginals, ML assignment of active
//!   blocks to channel classes, then per-class superblock ML (i.i.d.
//!   codebooks);
//! - block ML: per-block argmax over the idle hypothesis and every
//!   `(user, message)` pair.
//!
//! Colliding plans are not decoded and count as global errors.

use std::collections::HashSet;

use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identification::best_permutations;
use crate::prob::{
    kl_div, mutual_info, output_marginal, round_to_type, tilt_output, Channel, Distribution,
    TypeComposition, SUM_TOL,
};
use crate::regions::tilt_divergences;
use crate::rng::{setup_rng, trial_rng, SymbolSampler, TrialRng};

/// Largest `K! M^K` searched by superblock ML.
pub const MAX_SUPERBLOCK_HYPOTHESES: u128 = 100_000;

/// Largest `K` and `A` for occupancy enumeration.
pub const MAX_OCCUPANCY: usize = 8;

/// Redraw budget per codeword before giving up.
const MAX_REDRAWS: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookKind {
    ConstantComposition(TypeComposition),
    Iid(Distribution),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Codebook {
    codewords: Vec<Vec<usize>>,
    kind: CodebookKind,
    user_id: usize,
    redraws: u64,
}

impl Codebook {
    pub fn codewords(&self) -> &[Vec<usize>] {
        &self.codewords
    }

    pub fn codeword(&self, m: usize) -> &[usize] {
        &self.codewords[m]
    }

    pub fn kind(&self) -> &CodebookKind {
        &self.kind
    }

    pub fn user_id(&self) -> usize {
        self.user_id
    }

    /// Number of rejected draws (all-idle or repeated codewords).
    pub fn redraws(&self) -> u64 {
        self.redraws
    }

    pub fn messages(&self) -> usize {
        self.codewords.len()
    }

    pub fn block_length(&self) -> usize {
        self.codewords.first().map_or(0, Vec::len)
    }
}

enum CodewordSource {
    Composition(Vec<usize>),
    Iid(SymbolSampler),
}

impl CodewordSource {
    fn draw(&self, rng: &mut TrialRng, n: usize) -> Vec<usize> {
        match self {
            CodewordSource::Composition(symbols) => {
                let mut w = symbols.clone();
                w.shuffle(rng);
                w
            }
            CodewordSource::Iid(s) => s.sample_seq(rng, n),
        }
    }
}

fn check_codebook_args(n: usize, m: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::config("block length must be at least 1"));
    }
    if m == 0 {
        return Err(Error::config("codebooks need at least one message"));
    }
    Ok(())
}

fn composition_source(p: &Distribution, n: usize, idle: usize) -> Result<(CodebookKind, CodewordSource)> {
    let comp = round_to_type(p, n);
    if comp.counts.get(idle) == Some(&n) {
        return Err(Error::config("constant composition puts every symbol on the idle input"));
    }
    let symbols = comp
        .counts
        .iter()
        .enumerate()
        .flat_map(|(a, &c)| std::iter::repeat_n(a, c))
        .collect();
    Ok((CodebookKind::ConstantComposition(comp), CodewordSource::Composition(symbols)))
}

fn iid_source(p: &Distribution, idle: usize) -> Result<(CodebookKind, CodewordSource)> {
    if p.is_point_mass_on(idle) {
        return Err(Error::config("i.i.d. input is a point mass on the idle input"));
    }
    Ok((CodebookKind::Iid(p.clone()), CodewordSource::Iid(SymbolSampler::new(p))))
}

/// Draws `m` codewords, rejecting all-idle words and, when `taken` is given,
/// words already present in it.
fn draw_codebook(
    (kind, source): (CodebookKind, CodewordSource),
    n: usize,
    m: usize,
    idle: usize,
    user_id: usize,
    rng: &mut TrialRng,
    mut taken: Option<&mut HashSet<Vec<usize>>>,
) -> Result<Codebook> {
    let mut codewords = Vec::with_capacity(m);
    let mut redraws = 0u64;
    for _ in 0..m {
        let mut tries = 0u64;
        let word = loop {
            let w = source.draw(rng, n);
            let all_idle = w.iter().all(|&x| x == idle);
            let repeated = taken.as_ref().is_some_and(|t| t.contains(&w));
            if !all_idle && !repeated {
                break w;
            }
            tries += 1;
            if tries > MAX_REDRAWS {
                return Err(Error::guard(format!(
                    "user {user_id}: no admissible codeword after {MAX_REDRAWS} draws; \
                     increase n or reduce the number of codewords"
                )));
            }
        };
        redraws += tries;
        if let Some(t) = taken.as_mut() {
            t.insert(word.clone());
        }
        codewords.push(word);
    }
    Ok(Codebook {
        codewords,
        kind,
        user_id,
        redraws,
    })
}

/// `M` uniform draws from the type class of `round_to_type(p, n)`.
pub fn gen_codebook_cc(p: &Distribution, n: usize, m: usize, idle: usize, user_id: usize, seed: u64) -> Result<Codebook> {
    check_codebook_args(n, m)?;
    draw_codebook(composition_source(p, n, idle)?, n, m, idle, user_id, &mut trial_rng(seed, user_id as u64), None)
}

/// `M x n` i.i.d. draws from `p`; all-idle codewords are redrawn.
pub fn gen_codebook_iid(p: &Distribution, n: usize, m: usize, idle: usize, user_id: usize, seed: u64) -> Result<Codebook> {
    check_codebook_args(n, m)?;
    draw_codebook(iid_source(p, idle)?, n, m, idle, user_id, &mut trial_rng(seed, user_id as u64), None)
}

/// Slot and message of every user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TransmissionPlan {
    pub slots: Vec<usize>,
    pub messages: Vec<usize>,
    pub blocks: usize,
    pub n: usize,
}

impl TransmissionPlan {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, users: usize, blocks: usize, messages: usize, n: usize) -> Self {
        let slots = (0..users).map(|_| rng.random_range(0..blocks)).collect();
        let messages = (0..users).map(|_| rng.random_range(0..messages)).collect();
        TransmissionPlan {
            slots,
            messages,
            blocks,
            n,
        }
    }

    pub fn users(&self) -> usize {
        self.slots.len()
    }

    pub fn has_collision(&self) -> bool {
        self.slots.iter().duplicates().next().is_some()
    }

    /// `occupant[b]` is the user transmitting in block `b`, if any.
    pub fn occupants(&self) -> Vec<Option<usize>> {
        let mut occ = vec![None; self.blocks];
        for (u, &s) in self.slots.iter().enumerate() {
            occ[s] = Some(u);
        }
        occ
    }
}

/// `1 - A! / ((A - K)! A^K)`, the chance that some block holds two users.
pub fn collision_probability(blocks: usize, users: usize) -> f64 {
    if users > blocks {
        return 1.0;
    }
    let a = blocks as f64;
    1.0 - (0..users).map(|i| (a - i as f64) / a).product::<f64>()
}

/// Monte Carlo collision frequency over `plans` independent plans.
pub fn collision_frequency(blocks: usize, users: usize, plans: u64, seed: u64) -> u64 {
    (0..plans)
        .into_par_iter()
        .filter(|&t| TransmissionPlan::draw(&mut trial_rng(seed, t), users, blocks, 1, 1).has_collision())
        .count() as u64
}

/// Per-input output samplers and log-probability tables of a channel.
#[derive(Debug, Clone)]
struct ChannelTables {
    samplers: Vec<SymbolSampler>,
    /// `log_q[x][y] = log Q(y|x)`.
    log_q: Vec<Vec<f64>>,
}

impl ChannelTables {
    fn new(q: &Channel) -> Self {
        ChannelTables {
            samplers: q.rows().iter().map(|r| SymbolSampler::from_probs(r)).collect(),
            log_q: q.rows().iter().map(|r| r.iter().map(|v| v.ln()).collect()).collect(),
        }
    }

    fn loglik(&self, y: &[usize], x: &[usize]) -> f64 {
        y.iter().zip(x).map(|(&yy, &xx)| self.log_q[xx][yy]).sum()
    }
}

fn dist_loglik(log_p: &[f64], y: &[usize]) -> f64 {
    y.iter().map(|&v| log_p[v]).sum()
}

/// `(1/n)(a - b)` for log-likelihoods that may be `-inf`; an impossible
/// numerator gives `-inf` and an impossible denominator `+inf`.
fn normalized_llr(num: f64, den: f64, n: usize) -> f64 {
    if num == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else if den == f64::NEG_INFINITY {
        f64::INFINITY
    } else {
        (num - den) / n as f64
    }
}

/// Outputs of all `A` blocks, or a collision that was not transmitted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChannelOutput {
    Collision,
    Blocks(Vec<Vec<usize>>),
}

/// Channel model shared by all pipelines: per-user channels with a common
/// idle output distribution.
#[derive(Debug, Clone)]
pub struct MacModel {
    channels: Vec<Channel>,
    tables: Vec<ChannelTables>,
    idle_sampler: SymbolSampler,
    log_idle: Vec<f64>,
    idle_output: Distribution,
}

impl MacModel {
    pub fn new(channels: Vec<Channel>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::config("at least one user is required"))?;
        let idle_output = first.idle_output();
        for (u, q) in channels.iter().enumerate() {
            if q.outputs() != first.outputs() || q.inputs() != first.inputs() {
                return Err(Error::mismatch(format!("user {u} has a different channel shape")));
            }
            if q.idle_output().max_abs_diff(&idle_output) > SUM_TOL {
                return Err(Error::mismatch(format!("user {u} has a different idle output")));
            }
        }
        Ok(MacModel {
            tables: channels.iter().map(ChannelTables::new).collect(),
            idle_sampler: SymbolSampler::new(&idle_output),
            log_idle: idle_output.probs().iter().map(|v| v.ln()).collect(),
            idle_output,
            channels,
        })
    }

    pub fn users(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, user: usize) -> &Channel {
        &self.channels[user]
    }

    pub fn idle_output(&self) -> &Distribution {
        &self.idle_output
    }

    fn idle_loglik(&self, y: &[usize]) -> f64 {
        dist_loglik(&self.log_idle, y)
    }

    fn user_loglik(&self, user: usize, y: &[usize], x: &[usize]) -> f64 {
        self.tables[user].loglik(y, x)
    }
}

/// Sends every planned codeword through its user's channel; idle blocks are
/// drawn from the idle output distribution.
pub fn transmit<R: Rng + ?Sized>(
    codebooks: &[Codebook],
    plan: &TransmissionPlan,
    model: &MacModel,
    rng: &mut R,
) -> Result<ChannelOutput> {
    if plan.users() != codebooks.len() || model.users() != codebooks.len() {
        return Err(Error::mismatch(format!(
            "{} codebooks, {} planned users, {} channels",
            codebooks.len(),
            plan.users(),
            model.users()
        )));
    }
    if plan.has_collision() {
        return Ok(ChannelOutput::Collision);
    }
    let occupants = plan.occupants();
    let blocks = occupants
        .iter()
        .map(|occ| match occ {
            Some(u) => {
                let x = codebooks[*u].codeword(plan.messages[*u]);
                let t = &model.tables[*u];
                x.iter().map(|&xx| t.samplers[xx].sample(rng)).collect()
            }
            None => model.idle_sampler.sample_seq(rng, plan.n),
        })
        .collect();
    Ok(ChannelOutput::Blocks(blocks))
}

/// Blocks declared active by the codeword likelihood-ratio test
/// `max_{i,m} (1/n) log(Q(y|x_i(m)) / Q_star(y)) >= T`.
pub fn sync_threshold_decode(y: &[Vec<usize>], codebooks: &[Codebook], model: &MacModel, threshold: f64) -> Vec<usize> {
    y.iter()
        .enumerate()
        .filter(|(_, block)| block_llr_max(block, codebooks, model) >= threshold)
        .map(|(b, _)| b)
        .collect()
}

fn block_llr_max(block: &[usize], codebooks: &[Codebook], model: &MacModel) -> f64 {
    let idle = model.idle_loglik(block);
    let mut best = f64::NEG_INFINITY;
    for cb in codebooks {
        for x in cb.codewords() {
            let llr = normalized_llr(model.user_loglik(cb.user_id, block, x), idle, block.len());
            best = best.max(llr);
        }
    }
    best
}

/// Output-marginal test statistics of one class.
#[derive(Debug, Clone)]
pub struct MarginalTest {
    log_marginal: Vec<f64>,
    pub threshold: f64,
    /// Marginal equals the idle output, so the statistic is identically 0; the
    /// test never fires.
    pub degenerate: bool,
}

impl MarginalTest {
    pub fn new(marginal: &Distribution, idle: &Distribution, threshold: f64) -> Self {
        MarginalTest {
            log_marginal: marginal.probs().iter().map(|v| v.ln()).collect(),
            threshold,
            degenerate: marginal.max_abs_diff(idle) <= SUM_TOL,
        }
    }

    fn fires(&self, block: &[usize], idle_ll: f64) -> bool {
        !self.degenerate && normalized_llr(dist_loglik(&self.log_marginal, block), idle_ll, block.len()) >= self.threshold
    }
}

/// Blocks where some class's marginal likelihood ratio clears its threshold.
pub fn sync_marginal_decode(y: &[Vec<usize>], tests: &[MarginalTest], model: &MacModel) -> Vec<usize> {
    y.iter()
        .enumerate()
        .filter(|(_, block)| {
            let idle = model.idle_loglik(block);
            tests.iter().any(|t| t.fires(block, idle))
        })
        .map(|(b, _)| b)
        .collect()
}

/// ML assignment of active blocks to channel classes.
///
/// `class_of_slot` lists one class label per expected user; the result gives
/// the class label for each block, in block order. Users of one class are
/// interchangeable here, so ties are broken lexicographically.
pub fn identify_users(blocks: &[&[usize]], marginals: &[Distribution], class_of_slot: &[usize]) -> Result<Vec<usize>> {
    if blocks.len() != class_of_slot.len() {
        return Err(Error::mismatch(format!(
            "{} active blocks for {} users",
            blocks.len(),
            class_of_slot.len()
        )));
    }
    crate::identification::check_exhaustive(blocks.len())?;
    let logs: Vec<Vec<f64>> = marginals
        .iter()
        .map(|d| d.probs().iter().map(|v| v.ln()).collect())
        .collect();
    let ll: Vec<Vec<f64>> = blocks
        .iter()
        .map(|b| class_of_slot.iter().map(|&c| dist_loglik(&logs[c], b)).collect())
        .collect();
    let (_, ties) = best_permutations(&ll);
    Ok(ties[0].iter().map(|&s| class_of_slot[s]).collect())
}

fn factorial(k: usize) -> u128 {
    (1..=k as u128).product()
}

fn check_superblock(users: usize, messages: usize) -> Result<()> {
    let total = (messages as u128)
        .checked_pow(users as u32)
        .and_then(|p| p.checked_mul(factorial(users)));
    match total {
        Some(t) if t <= MAX_SUPERBLOCK_HYPOTHESES => Ok(()),
        _ => Err(Error::guard(format!(
            "superblock ML over {users}! x {messages}^{users} hypotheses exceeds {MAX_SUPERBLOCK_HYPOTHESES}"
        ))),
    }
}

/// Exact ML over every assignment of `users` to the given blocks and every
/// message tuple. Returns `(user, message)` per block; ties go to the
/// lexicographically smallest user order, then the smallest message.
pub fn decode_superblock_ml(
    blocks: &[&[usize]],
    users: &[usize],
    codebooks: &[Codebook],
    model: &MacModel,
) -> Result<Vec<(usize, usize)>> {
    if blocks.len() != users.len() {
        return Err(Error::mismatch(format!(
            "{} blocks for {} users",
            blocks.len(),
            users.len()
        )));
    }
    let m = users.first().map_or(1, |&u| codebooks[u].messages());
    check_superblock(users.len(), m)?;
    // best[b][k]: best message of users[k] in block b and its log-likelihood
    let best: Vec<Vec<(usize, f64)>> = blocks
        .iter()
        .map(|y| {
            users
                .iter()
                .map(|&u| {
                    let mut pick = (0, f64::NEG_INFINITY);
                    for (mi, x) in codebooks[u].codewords().iter().enumerate() {
                        let ll = model.user_loglik(u, y, x);
                        if mi == 0 || ll > pick.1 {
                            pick = (mi, ll);
                        }
                    }
                    pick
                })
                .collect()
        })
        .collect();
    let score: Vec<Vec<f64>> = best.iter().map(|row| row.iter().map(|&(_, ll)| ll).collect()).collect();
    let (_, ties) = best_permutations(&score);
    let order = &ties[0];
    Ok(order
        .iter()
        .enumerate()
        .map(|(b, &k)| (users[k], best[b][k].0))
        .collect())
}

/// Decision for one block of the block-by-block decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BlockDecision {
    Idle,
    User { user: usize, message: usize },
}

/// Per-block argmax over the idle hypothesis and every `(user, message)`;
/// the idle hypothesis wins ties, then the smallest `(user, message)`.
pub fn block_ml_decode(y: &[Vec<usize>], codebooks: &[Codebook], model: &MacModel) -> Vec<BlockDecision> {
    y.iter()
        .map(|block| {
            let mut best = model.idle_loglik(block);
            let mut decision = BlockDecision::Idle;
            for cb in codebooks {
                for (m, x) in cb.codewords().iter().enumerate() {
                    let ll = model.user_loglik(cb.user_id, block, x);
                    if ll > best {
                        best = ll;
                        decision = BlockDecision::User {
                            user: cb.user_id,
                            message: m,
                        };
                    }
                }
            }
            decision
        })
        .collect()
}

/// Outcome of one trial.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrialReport {
    pub trial: u64,
    pub collision: bool,
    /// Active blocks declared idle.
    pub sync_missed: usize,
    /// Idle blocks declared active.
    pub sync_false_alarm: usize,
    /// Every active block attributed to the right user (or class).
    pub ident_correct: bool,
    pub messages_correct: bool,
    pub global_error: bool,
}

impl TrialReport {
    fn collided(trial: u64) -> Self {
        TrialReport {
            trial,
            collision: true,
            sync_missed: 0,
            sync_false_alarm: 0,
            ident_correct: false,
            messages_correct: false,
            global_error: true,
        }
    }

    fn finish(trial: u64, sync_missed: usize, sync_false_alarm: usize, ident_correct: bool, messages_correct: bool) -> Self {
        TrialReport {
            trial,
            collision: false,
            sync_missed,
            sync_false_alarm,
            ident_correct,
            messages_correct,
            global_error: sync_missed > 0 || sync_false_alarm > 0 || !ident_correct || !messages_correct,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    #[serde(alias = "thm2")]
    TwoStage,
    #[serde(alias = "thm3")]
    ThreeStage,
    #[serde(alias = "thm4")]
    BlockMl,
}

/// How synchronization thresholds are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// Tilt equating the missed-detection and false-alarm exponents net of
    /// their multiplicities.
    #[default]
    Balanced,
    /// Midpoint of the admissible threshold interval.
    Midpoint,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserSetup {
    pub channel: Channel,
    pub input: Distribution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub pipeline: Pipeline,
    pub n: usize,
    pub blocks: usize,
    pub messages: usize,
    pub users: Vec<UserSetup>,
    pub threshold: ThresholdPolicy,
    pub trials: u64,
    pub seed: u64,
    /// Reject repeated codewords across all users.
    pub distinct_codewords: bool,
}

/// Thresholds actually used, one per class (a single entry for the
/// two-stage receiver).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdChoice {
    pub class: usize,
    pub threshold: Option<f64>,
    pub lambda: Option<f64>,
    /// Admissible interval `[-D(Q_star || Q), D(Q || Q_star)]`.
    pub interval: (f64, f64),
    pub policy: String,
    pub degenerate: bool,
}

/// Error rate with a normal-approximation 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateEstimate {
    pub count: u64,
    pub rate: f64,
    pub stderr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl RateEstimate {
    pub fn new(count: u64, trials: u64) -> Self {
        let rate = count as f64 / trials as f64;
        let stderr = (rate * (1.0 - rate) / trials as f64).sqrt();
        RateEstimate {
            count,
            rate,
            stderr,
            ci_low: (rate - 1.96 * stderr).max(0.0),
            ci_high: (rate + 1.96 * stderr).min(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub pipeline: Pipeline,
    pub n: usize,
    pub blocks: usize,
    pub users: usize,
    pub messages: usize,
    pub trials: u64,
    pub seed: u64,
    pub global_error: RateEstimate,
    pub collisions: u64,
    pub collision_probability: f64,
    /// Global errors among trials without a collision.
    pub non_collision_errors: u64,
    pub sync_miss_trials: u64,
    pub sync_false_alarm_trials: u64,
    pub ident_failures: u64,
    pub message_failures: u64,
    pub codebook_redraws: u64,
    pub thresholds: Vec<ThresholdChoice>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub trials: Vec<TrialReport>,
}

/// Exponents `(alpha, nu, R)` implied by the desk-scale sizes at block length `n`.
pub fn empirical_exponents(n: usize, blocks: usize, users: usize, messages: usize) -> (f64, f64, f64) {
    let n = n as f64;
    ((blocks as f64).ln() / n, (users as f64).ln() / n, (messages as f64).ln() / n)
}

fn midpoint_threshold(lo: f64, hi: f64) -> f64 {
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => 0.5 * (lo + hi),
        (false, false) => 0.0,
        (true, false) => 0.5 * lo,
        (false, true) => 0.5 * hi,
    }
}

/// Bisection for the root of a decreasing function on `[0, 1]`, clamped to
/// the endpoints when there is no sign change.
fn decreasing_root(f: impl Fn(f64) -> Result<f64>) -> Result<f64> {
    if f(1.0)? >= 0.0 {
        return Ok(1.0);
    }
    if f(0.0)? <= 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if f(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Threshold for the codeword test of identical channels at input `p`.
pub fn two_stage_threshold(
    q: &Channel,
    p: &Distribution,
    policy: ThresholdPolicy,
    alpha: f64,
    nu: f64,
    rate: f64,
) -> Result<ThresholdChoice> {
    let (d_star_q, _) = tilt_divergences(p, q, 0.0)?;
    let (_, d_q_star) = tilt_divergences(p, q, 1.0)?;
    let interval = (-d_star_q, d_q_star);
    let mid = || ThresholdChoice {
        class: 0,
        threshold: Some(midpoint_threshold(interval.0, interval.1)),
        lambda: None,
        interval,
        policy: "midpoint".into(),
        degenerate: false,
    };
    Ok(match policy {
        ThresholdPolicy::Fixed(t) => ThresholdChoice {
            threshold: Some(t),
            policy: "fixed".into(),
            ..mid()
        },
        ThresholdPolicy::Midpoint => mid(),
        ThresholdPolicy::Balanced => {
            if !(d_star_q.is_finite() && d_q_star.is_finite()) || tilt_divergences(p, q, 0.5)?.0.is_infinite() {
                mid()
            } else {
                let lambda = decreasing_root(|l| {
                    let (d_code, d_idle) = tilt_divergences(p, q, l)?;
                    Ok((d_code - nu) - (d_idle - alpha - nu - rate))
                })?;
                let (d_code, d_idle) = tilt_divergences(p, q, lambda)?;
                ThresholdChoice {
                    threshold: Some(d_idle - d_code),
                    lambda: Some(lambda),
                    policy: "balanced".into(),
                    ..mid()
                }
            }
        }
    })
}

/// Threshold for the output-marginal test of one class.
pub fn marginal_threshold(
    class: usize,
    marginal: &Distribution,
    idle: &Distribution,
    policy: ThresholdPolicy,
    alpha: f64,
    nu_j: f64,
) -> Result<ThresholdChoice> {
    let interval = (-kl_div(idle, marginal)?, kl_div(marginal, idle)?);
    let degenerate = marginal.max_abs_diff(idle) <= SUM_TOL;
    let mid = ThresholdChoice {
        class,
        threshold: Some(midpoint_threshold(interval.0, interval.1)),
        lambda: None,
        interval,
        policy: "midpoint".into(),
        degenerate,
    };
    if degenerate {
        return Ok(ThresholdChoice {
            threshold: None,
            policy: "disabled".into(),
            ..mid
        });
    }
    let divs = |l: f64| -> Result<(f64, f64)> {
        let t = tilt_output(marginal, idle, l)?;
        Ok((kl_div(&t, marginal)?, kl_div(&t, idle)?))
    };
    Ok(match policy {
        ThresholdPolicy::Fixed(t) => ThresholdChoice {
            threshold: Some(t),
            policy: "fixed".into(),
            ..mid
        },
        ThresholdPolicy::Midpoint => mid,
        ThresholdPolicy::Balanced => {
            if !(interval.0.is_finite() && interval.1.is_finite()) {
                mid
            } else {
                let lambda = decreasing_root(|l| {
                    let (d_code, d_idle) = divs(l)?;
                    Ok((d_code - nu_j) - (d_idle - alpha))
                })?;
                let (d_code, d_idle) = divs(lambda)?;
                ThresholdChoice {
                    threshold: Some(d_idle - d_code),
                    lambda: Some(lambda),
                    policy: "balanced".into(),
                    ..mid
                }
            }
        }
    })
}

/// Groups users by channel; users of one class must share the input.
fn channel_classes(users: &[UserSetup]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut reps: Vec<usize> = Vec::new();
    let mut class_of = Vec::with_capacity(users.len());
    for (u, s) in users.iter().enumerate() {
        match reps.iter().position(|&r| users[r].channel == s.channel) {
            Some(c) => {
                if users[reps[c]].input.max_abs_diff(&s.input) > SUM_TOL {
                    return Err(Error::config(format!(
                        "user {u} shares a channel with user {} but not its input",
                        reps[c]
                    )));
                }
                class_of.push(c);
            }
            None => {
                class_of.push(reps.len());
                reps.push(u);
            }
        }
    }
    Ok((reps, class_of))
}

enum Receiver {
    TwoStage { threshold: f64 },
    ThreeStage { tests: Vec<MarginalTest>, marginals: Vec<Distribution>, class_of: Vec<usize> },
    BlockMl,
}

struct Prepared {
    model: MacModel,
    codebooks: Vec<Codebook>,
    receiver: Receiver,
    thresholds: Vec<ThresholdChoice>,
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        if self.users.is_empty() {
            return Err(Error::config("at least one user is required"));
        }
        if self.n == 0 || self.blocks == 0 || self.messages == 0 || self.trials == 0 {
            return Err(Error::config("n, blocks, messages and trials must all be at least 1"));
        }
        for (u, s) in self.users.iter().enumerate() {
            if s.input.alphabet_size() != s.channel.inputs() {
                return Err(Error::mismatch(format!("user {u}: input and channel sizes differ")));
            }
        }
        if let ThresholdPolicy::Fixed(t) = self.threshold {
            if t.is_nan() {
                return Err(Error::config("threshold must be a number"));
            }
        }
        if self.pipeline == Pipeline::TwoStage {
            let first = &self.users[0];
            if self.users.iter().any(|s| s != first) {
                return Err(Error::config("the two-stage receiver needs identical channels and inputs"));
            }
        }
        Ok(())
    }

    fn prepare(&self) -> Result<Prepared> {
        self.validate()?;
        let model = MacModel::new(self.users.iter().map(|s| s.channel.clone()).collect())?;
        let idle = self.users[0].channel.idle();
        let mut rng = setup_rng(self.seed);
        let mut taken = self.distinct_codewords.then(HashSet::new);
        let mut codebooks = Vec::with_capacity(self.users.len());
        for (u, s) in self.users.iter().enumerate() {
            let (kind, source) = match self.pipeline {
                Pipeline::TwoStage => composition_source(&s.input, self.n, idle)?,
                Pipeline::ThreeStage | Pipeline::BlockMl => iid_source(&s.input, idle)?,
            };
            codebooks.push(draw_codebook((kind, source), self.n, self.messages, idle, u, &mut rng, taken.as_mut())?);
        }
        let (alpha, nu, rate) = empirical_exponents(self.n, self.blocks, self.users.len(), self.messages);
        let (receiver, thresholds) = match self.pipeline {
            Pipeline::TwoStage => {
                check_superblock(self.users.len(), self.messages)?;
                let s = &self.users[0];
                let input = match &codebooks[0].kind {
                    CodebookKind::ConstantComposition(c) => c.to_distribution()?,
                    CodebookKind::Iid(p) => p.clone(),
                };
                let choice = two_stage_threshold(&s.channel, &input, self.threshold, alpha, nu, rate)?;
                let threshold = choice.threshold.unwrap_or(f64::INFINITY);
                (Receiver::TwoStage { threshold }, vec![choice])
            }
            Pipeline::ThreeStage => {
                crate::identification::check_exhaustive(self.users.len())?;
                let (reps, class_of) = channel_classes(&self.users)?;
                let marginals: Vec<Distribution> = reps
                    .iter()
                    .map(|&r| output_marginal(&self.users[r].input, &self.users[r].channel))
                    .collect::<Result<_>>()?;
                let mut choices = Vec::with_capacity(reps.len());
                let mut tests = Vec::with_capacity(reps.len());
                for (c, marg) in marginals.iter().enumerate() {
                    let count = class_of.iter().filter(|&&k| k == c).count();
                    check_superblock(count, self.messages)?;
                    let nu_j = (count as f64).ln() / self.n as f64;
                    let choice = marginal_threshold(c, marg, model.idle_output(), self.threshold, alpha, nu_j)?;
                    let mut test = MarginalTest::new(marg, model.idle_output(), choice.threshold.unwrap_or(f64::INFINITY));
                    test.degenerate |= choice.threshold.is_none();
                    tests.push(test);
                    choices.push(choice);
                }
                (Receiver::ThreeStage { tests, marginals, class_of }, choices)
            }
            Pipeline::BlockMl => (Receiver::BlockMl, Vec::new()),
        };
        Ok(Prepared {
            model,
            codebooks,
            receiver,
            thresholds,
        })
    }
}

fn sync_errors(active: &[usize], occupants: &[Option<usize>]) -> (usize, usize) {
    let declared: HashSet<usize> = active.iter().copied().collect();
    let missed = occupants
        .iter()
        .enumerate()
        .filter(|(b, o)| o.is_some() && !declared.contains(b))
        .count();
    let false_alarm = active.iter().filter(|&&b| occupants[b].is_none()).count();
    (missed, false_alarm)
}

fn run_trial(exp: &Experiment, prep: &Prepared, trial: u64) -> Result<TrialReport> {
    let mut rng = trial_rng(exp.seed, trial);
    let plan = TransmissionPlan::draw(&mut rng, exp.users.len(), exp.blocks, exp.messages, exp.n);
    let y = match transmit(&prep.codebooks, &plan, &prep.model, &mut rng)? {
        ChannelOutput::Collision => return Ok(TrialReport::collided(trial)),
        ChannelOutput::Blocks(y) => y,
    };
    let occupants = plan.occupants();
    match &prep.receiver {
        Receiver::TwoStage { threshold } => {
            let active = sync_threshold_decode(&y, &prep.codebooks, &prep.model, *threshold);
            let (missed, fa) = sync_errors(&active, &occupants);
            if missed > 0 || fa > 0 {
                return Ok(TrialReport::finish(trial, missed, fa, false, false));
            }
            let blocks: Vec<&[usize]> = active.iter().map(|&b| y[b].as_slice()).collect();
            let users: Vec<usize> = (0..exp.users.len()).collect();
            let decoded = decode_superblock_ml(&blocks, &users, &prep.codebooks, &prep.model)?;
            let ident = decoded
                .iter()
                .zip(&active)
                .all(|(&(u, _), &b)| occupants[b] == Some(u));
            let msgs = ident && decoded.iter().all(|&(u, m)| plan.messages[u] == m);
            Ok(TrialReport::finish(trial, 0, 0, ident, msgs))
        }
        Receiver::ThreeStage { tests, marginals, class_of } => {
            let active = sync_marginal_decode(&y, tests, &prep.model);
            let (missed, fa) = sync_errors(&active, &occupants);
            if missed > 0 || fa > 0 {
                return Ok(TrialReport::finish(trial, missed, fa, false, false));
            }
            let blocks: Vec<&[usize]> = active.iter().map(|&b| y[b].as_slice()).collect();
            let labels = identify_users(&blocks, marginals, class_of)?;
            let ident = labels
                .iter()
                .zip(&active)
                .all(|(&c, &b)| occupants[b].is_some_and(|u| class_of[u] == c));
            if !ident {
                return Ok(TrialReport::finish(trial, 0, 0, false, false));
            }
            let mut msgs = true;
            for c in 0..marginals.len() {
                let idx: Vec<usize> = (0..active.len()).filter(|&i| labels[i] == c).collect();
                if idx.is_empty() {
                    continue;
                }
                let class_blocks: Vec<&[usize]> = idx.iter().map(|&i| blocks[i]).collect();
                let class_users: Vec<usize> = (0..class_of.len()).filter(|&u| class_of[u] == c).collect();
                let decoded = decode_superblock_ml(&class_blocks, &class_users, &prep.codebooks, &prep.model)?;
                msgs &= decoded
                    .iter()
                    .zip(&idx)
                    .all(|(&(u, m), &i)| occupants[active[i]] == Some(u) && plan.messages[u] == m);
            }
            Ok(TrialReport::finish(trial, 0, 0, true, msgs))
        }
        Receiver::BlockMl => {
            let decisions = block_ml_decode(&y, &prep.codebooks, &prep.model);
            let (mut missed, mut fa) = (0, 0);
            let (mut ident, mut msgs) = (true, true);
            for (d, occ) in decisions.iter().zip(&occupants) {
                match (d, occ) {
                    (BlockDecision::Idle, Some(_)) => missed += 1,
                    (BlockDecision::User { .. }, None) => fa += 1,
                    (BlockDecision::User { user, message }, Some(u)) => {
                        if user != u {
                            ident = false;
                        } else if plan.messages[*u] != *message {
                            msgs = false;
                        }
                    }
                    (BlockDecision::Idle, None) => {}
                }
            }
            let sync_ok = missed == 0 && fa == 0;
            Ok(TrialReport::finish(trial, missed, fa, sync_ok && ident, sync_ok && ident && msgs))
        }
    }
}

/// Runs all trials on the current rayon pool. Results depend only on the
/// experiment and its seed, never on the pool size.
pub fn run_experiment(exp: &Experiment) -> Result<ExperimentRun> {
    let prep = exp.prepare()?;
    let trials: Vec<TrialReport> = (0..exp.trials)
        .into_par_iter()
        .map(|t| run_trial(exp, &prep, t))
        .collect::<Result<_>>()?;
    let count = |f: &dyn Fn(&TrialReport) -> bool| trials.iter().filter(|t| f(t)).count() as u64;
    let global = count(&|t| t.global_error);
    let collisions = count(&|t| t.collision);
    let report = ExperimentReport {
        pipeline: exp.pipeline,
        n: exp.n,
        blocks: exp.blocks,
        users: exp.users.len(),
        messages: exp.messages,
        trials: exp.trials,
        seed: exp.seed,
        global_error: RateEstimate::new(global, exp.trials),
        collisions,
        collision_probability: collision_probability(exp.blocks, exp.users.len()),
        non_collision_errors: global - collisions,
        sync_miss_trials: count(&|t| t.sync_missed > 0),
        sync_false_alarm_trials: count(&|t| t.sync_false_alarm > 0),
        ident_failures: count(&|t| !t.collision && t.sync_missed == 0 && t.sync_false_alarm == 0 && !t.ident_correct),
        message_failures: count(&|t| t.ident_correct && !t.messages_correct),
        codebook_redraws: prep.codebooks.iter().map(Codebook::redraws).sum(),
        thresholds: prep.thresholds,
    };
    Ok(ExperimentRun { report, trials })
}

/// Rates implied by the experiment's sizes, checked against the rate
/// constraint `R + nu < I(P, Q)` of each user.
pub fn rate_margin(exp: &Experiment) -> Result<f64> {
    let (_, nu, rate) = empirical_exponents(exp.n, exp.blocks, exp.users.len(), exp.messages);
    exp.users
        .iter()
        .map(|s| Ok(mutual_info(&s.input, &s.channel)? - rate - nu))
        .try_fold(f64::INFINITY, |acc, v: Result<f64>| Ok(acc.min(v?)))
}

/// Occupancy vectors maximizing `K! / prod_a t_a!`, with a check of the
/// balancing-swap argument over every composition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArrangementCheck {
    pub users: usize,
    pub blocks: usize,
    /// All maximizers, in lexicographic order.
    pub argmax: Vec<Vec<usize>>,
    pub max_multinomial: u128,
    /// Largest `max_a t_a - min_b t_b` over the maximizers.
    pub argmax_max_gap: usize,
    /// Compositions containing a pair with `t_a - t_b > 1`.
    pub unbalanced: usize,
    /// Every such pair is strictly improved by moving one user from `a` to `b`.
    pub swap_verified: bool,
}

fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    fn rec(left: usize, parts: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() + 1 == parts {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for c in 0..=left {
            cur.push(c);
            rec(left - c, parts, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(total, parts, &mut Vec::with_capacity(parts), &mut out);
    out
}

pub fn multinomial(t: &[usize]) -> u128 {
    let k: usize = t.iter().sum();
    factorial(k) / t.iter().map(|&c| factorial(c)).product::<u128>()
}

pub fn arrangement_argmax(users: usize, blocks: usize) -> Result<ArrangementCheck> {
    if users > MAX_OCCUPANCY || blocks > MAX_OCCUPANCY {
        return Err(Error::guard(format!(
            "occupancy enumeration needs K, A <= {MAX_OCCUPANCY}, got K={users}, A={blocks}"
        )));
    }
    if blocks == 0 {
        return Err(Error::config("at least one block is required"));
    }
    let all = compositions(users, blocks);
    let max = all.iter().map(|t| multinomial(t)).max().unwrap_or(0);
    let argmax: Vec<Vec<usize>> = all.iter().filter(|t| multinomial(t) == max).cloned().collect();
    let argmax_max_gap = argmax
        .iter()
        .map(|t| t.iter().max().unwrap_or(&0) - t.iter().min().unwrap_or(&0))
        .max()
        .unwrap_or(0);
    let mut unbalanced = 0;
    let mut swap_verified = true;
    for t in &all {
        let mut any = false;
        for a in 0..blocks {
            for b in 0..blocks {
                if t[a] >= t[b] + 2 {
                    any = true;
                    let mut s = t.clone();
                    s[a] -= 1;
                    s[b] += 1;
                    swap_verified &= multinomial(&s) > multinomial(t);
                }
            }
        }
        unbalanced += usize::from(any);
    }
    Ok(ArrangementCheck {
        users,
        blocks,
        argmax,
        max_multinomial: max,
        argmax_max_gap,
        unbalanced,
        swap_verified,
    })
}

/// [`arrangement_argmax`] for every `1 <= K <= kmax`, `1 <= A <= amax`.
pub fn occupancy_sweep(kmax: usize, amax: usize) -> Result<Vec<ArrangementCheck>> {
    let mut rows = Vec::new();
    for k in 1..=kmax {
        for a in 1..=amax {
            rows.push(arrangement_argmax(k, a)?);
        }
    }
    Ok(rows)
}
