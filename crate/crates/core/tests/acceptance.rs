//! Acceptance gate. Runs every criterion and prints one PASS/FAIL line each;
//! exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sasmac::graph::{count_cycles, cycle_gain_check, cycle_gain_sweep, edge_count, enumerate_cycles, WeightedCompleteGraph};
use sasmac::identification::{pe_upper_bound, run_identification, IdentificationInstance};
use sasmac::prob::{chernoff_idle, chernoff_pair, cond_kl, fano_rhs, kl_div, map_error, mixture, mutual_info, output_marginal};
use sasmac::regions::{
    block_ml_best_rate, block_ml_frontier, block_ml_region_test, frontier_grid, two_stage_frontier, InputSearch,
    RegionPoint, Scheme,
};
use sasmac::sim::{
    collision_frequency, empirical_exponents, multinomial, occupancy_sweep, run_experiment, Experiment, Pipeline,
    ThresholdPolicy, UserSetup,
};
use sasmac::{Channel, Distribution};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn ber(p: f64) -> Distribution {
    Distribution::bernoulli(p).unwrap()
}

fn random_dist(rng: &mut ChaCha8Rng, m: usize) -> Distribution {
    Distribution::from_weights((0..m).map(|_| rng.random::<f64>() + 0.01).collect()).unwrap()
}

/// Random distribution concentrated near a vertex of the simplex.
fn peaked_dist(rng: &mut ChaCha8Rng, m: usize) -> Distribution {
    Distribution::from_weights((0..m).map(|_| rng.random::<f64>().powi(6) + 1e-3).collect()).unwrap()
}

fn oracle_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

fn binary_entropy_oracle(p: f64) -> f64 {
    -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
}

fn cycle_gain_bound() -> Check {
    let start = Instant::now();
    let rows = cycle_gain_sweep(3, 7, 200, 2024).map_err(e)?;
    let failing: Vec<_> = rows.iter().filter(|r| !r.holds).map(|r| (r.k, r.r)).collect();
    ensure!(failing.is_empty(), "inequality violated at (k, r) = {failing:?}");
    let worst = rows.iter().map(|r| r.worst_ratio).fold(0.0, f64::max);
    for k in 3..=7 {
        for r in 2..=k {
            for w in [0.37, 1.0] {
                let g = WeightedCompleteGraph::constant(k, w).map_err(e)?;
                let c = cycle_gain_check(&g, r).map_err(e)?;
                ensure!(
                    (c.lhs_mean - c.rhs).abs() <= 1e-12 * c.rhs,
                    "equal weights k={k} r={r}: {} vs {}",
                    c.lhs_mean,
                    c.rhs
                );
            }
        }
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(60), "took {took:?}");
    Ok(format!("{} (k, r) cells x 200 draws, worst lhs/rhs {worst:.6}, equality at equal weights, {took:.2?}", rows.len()))
}

fn cycle_counting() -> Check {
    let factorial = |n: usize| (1..=n as u128).product::<u128>();
    let binom = |n: usize, k: usize| factorial(n) / (factorial(k) * factorial(n - k));
    let mut cells = 0;
    let mut worst = 0.0f64;
    for k in 2..=8 {
        for r in 2..=k {
            let expected = if r == 2 { binom(k, 2) } else { binom(k, r) * factorial(r - 1) / 2 };
            let listed = enumerate_cycles(k, r).map_err(e)?;
            let distinct: std::collections::BTreeSet<Vec<usize>> = listed.iter().map(|c| c.vertices().to_vec()).collect();
            ensure!(listed.len() as u128 == expected, "k={k} r={r}: enumerated {} expected {expected}", listed.len());
            ensure!(distinct.len() == listed.len(), "k={k} r={r}: duplicate cycles");
            ensure!(count_cycles(k, r).map_err(e)? == expected, "k={k} r={r}: count formula");
            let ratio = expected as f64 / (edge_count(k) as f64).powf(r as f64 / 2.0);
            ensure!(ratio <= 4f64.powi(r as i32), "k={k} r={r}: ratio {ratio} above 4^r");
            worst = worst.max(ratio / 4f64.powi(r as i32));
            cells += 1;
        }
    }
    Ok(format!("{cells} (k, r) cells, max N/(n_k^(r/2) 4^r) = {worst:.4}"))
}

fn identification_bound() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let trials = 10_000;
    let mut finite = 0;
    let mut summary = Vec::new();
    for i in 0..20u64 {
        let a = [3, 4, 5][rng.random_range(0..3)];
        let n = [10, 20, 40][rng.random_range(0..3)];
        let m = if rng.random::<bool>() { 2 } else { 3 };
        // redraw until the bound is informative, giving up after a fixed budget
        let mut inst = IdentificationInstance::new((0..a).map(|_| random_dist(&mut rng, m)).collect(), n).map_err(e)?;
        for _ in 0..500 {
            if pe_upper_bound(&inst).is_finite() {
                break;
            }
            inst = IdentificationInstance::new((0..a).map(|_| peaked_dist(&mut rng, m)).collect(), n).map_err(e)?;
        }
        let bound = pe_upper_bound(&inst);
        let est = run_identification(&inst, trials, 1000 + i).map_err(e)?.estimate;
        if bound.is_finite() {
            finite += 1;
            ensure!(
                est.p_hat <= bound + 3.0 * est.stderr,
                "instance {i} (A={a}, n={n}): p_hat {} above bound {bound}",
                est.p_hat
            );
            summary.push(format!("{:.4}<={:.4}", est.p_hat, bound));
        }
    }
    let twin = IdentificationInstance::new(vec![ber(0.3), ber(0.3)], 10).map_err(e)?;
    let est = run_identification(&twin, trials, 7).map_err(e)?.estimate;
    let sigma = (0.25 / trials as f64).sqrt();
    ensure!((est.p_hat - 0.5).abs() <= 3.0 * sigma, "identical pair: p_hat {}", est.p_hat);
    Ok(format!(
        "{finite}/20 finite bounds respected [{}]; identical pair p_hat {:.4}",
        summary.join(" "),
        est.p_hat
    ))
}

fn dominant_error_event() -> Check {
    let dists = vec![ber(0.1), ber(0.35), ber(0.6), ber(0.85)];
    let inst = IdentificationInstance::new(dists, 12).map_err(e)?;
    let run = run_identification(&inst, 10_000, 44).map_err(e)?;
    let mode = run.r_histogram.iter().max_by_key(|(_, &c)| c).map(|(&r, _)| r);
    ensure!(mode == Some(2), "mode {mode:?}, histogram {:?}", run.r_histogram);
    Ok(format!("histogram {:?} over {} errors", run.r_histogram, run.estimate.errors))
}

fn bsc_closed_forms() -> Check {
    let delta: f64 = 0.11;
    let q = Channel::bsc(delta).map_err(e)?;
    let p = ber(0.5);
    let g_half = -(0.5 + (delta * (1.0 - delta)).sqrt()).ln();
    ensure!((g_half - 0.20715).abs() <= 1e-4, "closed form {g_half}");
    let best = block_ml_best_rate(&q, &p, 0.0, 0.0).map_err(e)?;
    ensure!((best.rate - g_half).abs() <= 1e-4, "block-ML binding value {}", best.rate);
    let c = chernoff_idle(&q.idle_output(), &p, &q).map_err(e)?;
    ensure!((c.value - g_half).abs() <= 1e-6, "chernoff_idle {} vs {g_half}", c.value);
    let info = mutual_info(&p, &q).map_err(e)?;
    let cap = 2f64.ln() - binary_entropy_oracle(delta);
    ensure!((info - 0.3466).abs() <= 1e-4 && (info - cap).abs() <= 1e-12, "mutual information {info}");
    Ok(format!(
        "binding {} = {:.6}, chernoff_idle {:.8} (closed {:.8}), I = {info:.6}",
        best.binding, best.rate, c.value, g_half
    ))
}

fn region_consistency() -> Check {
    let q = Channel::bsc(0.11).map_err(e)?;
    let search = InputSearch::Optimize { resolution: 200 };
    let cap = 2f64.ln() - binary_entropy_oracle(0.11);
    let origin = two_stage_frontier(&q, 0.0, 0.0, &search).map_err(e)?;
    ensure!((origin.r_star - cap).abs() <= 1e-3, "R*(0,0) = {} vs capacity {cap}", origin.r_star);

    let alphas: Vec<f64> = (0..=6).map(|i| i as f64 * 0.05).collect();
    let nus: Vec<f64> = (0..=4).map(|i| i as f64 * 0.025).collect();
    let grid = frontier_grid(Scheme::TwoStage, &q, &alphas, &nus, &search).map_err(e)?;
    let at = |i: usize, j: usize| &grid[i * nus.len() + j];
    for i in 0..alphas.len() {
        for j in 0..nus.len() {
            if j + 1 < nus.len() {
                ensure!(
                    at(i, j + 1).r_star <= at(i, j).r_star + 1e-12,
                    "R* rises with nu at alpha={}",
                    alphas[i]
                );
            }
            if i + 1 < alphas.len() && at(i, j).feasible && at(i + 1, j).feasible {
                ensure!(
                    at(i + 1, j).r_star <= at(i, j).r_star + 1e-12,
                    "R* rises with alpha at nu={}",
                    nus[j]
                );
            }
        }
    }

    let points = [(0.02, 0.005), (0.05, 0.01), (0.08, 0.02), (0.1, 0.03), (0.12, 0.04)];
    let mut gaps = Vec::new();
    for (alpha, nu) in points {
        let two = two_stage_frontier(&q, alpha, nu, &search).map_err(e)?;
        let block = block_ml_frontier(&q, alpha, nu, &search).map_err(e)?;
        ensure!(
            two.feasible && two.r_star > block.r_star,
            "({alpha}, {nu}): two-stage {} vs block ML {}",
            two.r_star,
            block.r_star
        );
        gaps.push(format!("{:.4}>{:.4}", two.r_star, block.r_star));
    }
    Ok(format!(
        "R*(0,0) = {:.6} (capacity {cap:.6}); monotone on 7x5 grid; dominance {}",
        origin.r_star,
        gaps.join(" ")
    ))
}

fn collision_statistics() -> Check {
    let plans = 100_000u64;
    let mut out = Vec::new();
    for (i, (a, k)) in [(8usize, 2usize), (16, 3), (32, 2)].into_iter().enumerate() {
        let no_collision: f64 = (0..k).map(|j| (a - j) as f64 / a as f64).product();
        let p = 1.0 - no_collision;
        let sigma = (p * (1.0 - p) / plans as f64).sqrt();
        let freq = collision_frequency(a, k, plans, 77 + i as u64) as f64 / plans as f64;
        ensure!((freq - p).abs() <= 3.0 * sigma, "(A={a}, K={k}): {freq} vs {p}");
        out.push(format!("({a},{k}) {freq:.5}~{p:.5}"));
    }
    Ok(out.join(" "))
}

fn noiseless_experiment() -> Result<Experiment, String> {
    let user = UserSetup {
        channel: Channel::identity(3, 0).map_err(e)?,
        input: Distribution::new(vec![0.0, 0.5, 0.5]).map_err(e)?,
    };
    Ok(Experiment {
        pipeline: Pipeline::TwoStage,
        n: 8,
        blocks: 8,
        messages: 2,
        users: vec![user.clone(), user],
        threshold: ThresholdPolicy::Balanced,
        trials: 1000,
        seed: 8,
        distinct_codewords: true,
    })
}

fn noiseless_sanity() -> Check {
    let run = run_experiment(&noiseless_experiment()?).map_err(e)?;
    let r = &run.report;
    ensure!(r.non_collision_errors == 0, "{} non-collision errors", r.non_collision_errors);
    Ok(format!(
        "{} trials, {} collisions, 0 non-collision errors",
        r.trials, r.collisions
    ))
}

fn noisy_trend() -> Check {
    let q = Channel::bsc(0.11).map_err(e)?;
    let p = ber(0.5);
    let trials = 20_000u64;
    let mut lines = Vec::new();
    for pipeline in [Pipeline::TwoStage, Pipeline::BlockMl] {
        let mut rates = Vec::new();
        let mut residual = Vec::new();
        for n in [30usize, 60, 120] {
            let (alpha, nu, rate) = empirical_exponents(n, 8, 2, 2);
            let point = RegionPoint::new(rate, alpha, nu).map_err(e)?;
            let test = block_ml_region_test(&point, &[p.clone(), p.clone()], &[q.clone(), q.clone()]).map_err(e)?;
            ensure!(test.inside(), "n={n}: sizes fall outside the block-ML region");
            let exp = Experiment {
                pipeline,
                n,
                blocks: 8,
                messages: 2,
                users: vec![UserSetup { channel: q.clone(), input: p.clone() }; 2],
                threshold: ThresholdPolicy::Balanced,
                trials,
                seed: 1,
                distinct_codewords: true,
            };
            let r = run_experiment(&exp).map_err(e)?.report;
            rates.push(r.global_error);
            residual.push(r.non_collision_errors);
        }
        for w in rates.windows(2) {
            let sigma = (w[0].stderr.powi(2) + w[1].stderr.powi(2)).sqrt();
            ensure!(
                w[1].rate <= w[0].rate + 3.0 * sigma,
                "{pipeline:?}: error rate rises {} -> {}",
                w[0].rate,
                w[1].rate
            );
        }
        let (first, last) = (residual[0] as f64, residual[2] as f64);
        ensure!(
            rates[2].rate < rates[0].rate && first - last > 3.0 * (first + last).sqrt(),
            "{pipeline:?}: no significant drop, non-collision errors {residual:?}"
        );
        lines.push(format!(
            "{pipeline:?} rates {:.4}/{:.4}/{:.4} non-collision {residual:?}",
            rates[0].rate, rates[1].rate, rates[2].rate
        ));
    }
    Ok(format!("{}; collision floor 1/8", lines.join("; ")))
}

fn random_channel(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize, idle_row: &[f64]) -> Channel {
    let mut rows: Vec<Vec<f64>> = (0..inputs)
        .map(|_| random_dist(rng, outputs).probs().to_vec())
        .collect();
    rows[0] = idle_row.to_vec();
    Channel::new(rows, 0).unwrap()
}

fn divergence_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut worst_comp = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(2..=5);
        let m = rng.random_range(2..=6);
        let parts: Vec<Distribution> = (0..k).map(|_| random_dist(&mut rng, m)).collect();
        let pi = random_dist(&mut rng, k);
        let r = random_dist(&mut rng, m);
        let bar = mixture(&parts, pi.probs()).map_err(e)?;
        let lhs = kl_div(&bar, &r).map_err(e)?
            + parts
                .iter()
                .zip(pi.probs())
                .map(|(p, w)| w * kl_div(p, &bar).unwrap())
                .sum::<f64>();
        let rhs: f64 = parts.iter().zip(pi.probs()).map(|(p, w)| w * kl_div(p, &r).unwrap()).sum();
        let rel = (lhs - rhs).abs() / rhs.abs().max(1e-300);
        ensure!(rel <= 1e-10, "compensation identity off by {rel}");
        worst_comp = worst_comp.max(rel);
    }

    let mut min_fano_gap = f64::INFINITY;
    for _ in 0..50 {
        let n_hyp = rng.random_range(2..=6);
        let m = rng.random_range(2..=6);
        let hyps: Vec<Distribution> = (0..n_hyp).map(|_| random_dist(&mut rng, m)).collect();
        let r_bar = map_error(&hyps).map_err(e)?;
        let mut oracle_best = 0.0;
        for y in 0..m {
            oracle_best += hyps.iter().map(|h| h.prob(y)).fold(0.0, f64::max);
        }
        ensure!((r_bar - (1.0 - oracle_best / n_hyp as f64)).abs() < 1e-12, "MAP error mismatch");
        let bar = mixture(&hyps, &vec![1.0; n_hyp]).map_err(e)?;
        let lhs: f64 = hyps.iter().map(|h| oracle_kl(h.probs(), bar.probs())).sum::<f64>() / n_hyp as f64;
        let gap = lhs - fano_rhs(n_hyp, r_bar);
        ensure!(gap >= -1e-12, "Fano violated by {gap}");
        min_fano_gap = min_fano_gap.min(gap);
    }

    let mut min_idle = f64::INFINITY;
    let mut min_pair = f64::INFINITY;
    for _ in 0..100 {
        let outputs = rng.random_range(2..=5);
        let idle_row = random_dist(&mut rng, outputs).probs().to_vec();
        let (xi, xj) = (rng.random_range(2..=4), rng.random_range(2..=4));
        let qi = random_channel(&mut rng, xi, outputs, &idle_row);
        let qj = random_channel(&mut rng, xj, outputs, &idle_row);
        let pi = random_dist(&mut rng, xi);
        let pj = random_dist(&mut rng, xj);
        let star = qj.idle_output();
        let out_j = output_marginal(&pj, &qj).map_err(e)?;
        let info_j = mutual_info(&pj, &qj).map_err(e)?;

        let idle_bound = info_j + oracle_kl(out_j.probs(), star.probs());
        let idle = chernoff_idle(&star, &pj, &qj).map_err(e)?.value;
        ensure!(idle <= idle_bound + 1e-9, "idle exponent {idle} above {idle_bound}");

        let flat = Channel::new(vec![out_j.probs().to_vec(); xi], 0).map_err(e)?;
        let cross = cond_kl(&flat, &qi, &pi).map_err(e)?;
        let cross_oracle: f64 = (0..xi).map(|x| pi.prob(x) * oracle_kl(out_j.probs(), qi.row(x))).sum();
        ensure!((cross - cross_oracle).abs() < 1e-10, "cross divergence mismatch");
        let pair_bound = info_j + cross_oracle;
        let pair = chernoff_pair(&pi, &qi, &pj, &qj).map_err(e)?.value;
        ensure!(pair <= pair_bound + 1e-9, "pair exponent {pair} above {pair_bound}");
        min_idle = min_idle.min(idle_bound - idle);
        min_pair = min_pair.min(pair_bound - pair);
    }
    Ok(format!(
        "compensation worst rel {worst_comp:.1e}; Fano min slack {min_fano_gap:.3e}; idle/pair bound min slack {min_idle:.3e}/{min_pair:.3e}"
    ))
}

fn balanced_occupancy() -> Check {
    let rows = occupancy_sweep(6, 6).map_err(e)?;
    let factorial = |n: usize| (1..=n as u128).product::<u128>();
    for r in &rows {
        ensure!(r.argmax_max_gap <= 1, "K={} A={}: argmax gap {}", r.users, r.blocks, r.argmax_max_gap);
        ensure!(r.swap_verified, "K={} A={}: a swap failed to improve", r.users, r.blocks);
        let (base, extra) = (r.users / r.blocks, r.users % r.blocks);
        let balanced: Vec<usize> = (0..r.blocks).map(|a| base + usize::from(a < extra)).collect();
        let oracle = factorial(r.users) / balanced.iter().map(|&t| factorial(t)).product::<u128>();
        ensure!(
            multinomial(&balanced) == oracle && r.max_multinomial == oracle,
            "K={} A={}: maximum {} vs balanced {oracle}",
            r.users,
            r.blocks,
            r.max_multinomial
        );
    }
    let unbalanced: usize = rows.iter().map(|r| r.unbalanced).sum();
    Ok(format!("{} (K, A) pairs, {unbalanced} unbalanced vectors all improved by a swap", rows.len()))
}

fn run_cli(dir: &Path, tag: &str, threads: usize, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = dir.join(format!("{tag}-{threads}.out"));
    let status = Command::new(env!("CARGO_BIN_EXE_sasmac"))
        .args(args)
        .arg("--threads")
        .arg(threads.to_string())
        .arg("--out")
        .arg(&out)
        .output()
        .map_err(e)?;
    ensure!(status.status.success(), "{tag}: exit {:?}", status.status.code());
    std::fs::read(&out).map_err(e)
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(e)?;
    let sim = dir.path().join("sim.json");
    std::fs::write(
        &sim,
        r#"{"pipeline": "two_stage", "n": 30, "A": 8, "K": 2, "M": 2, "channel": "bsc:0.11", "trials": 3000, "seed": 5}"#,
    )
    .map_err(e)?;
    let block = dir.path().join("block.json");
    std::fs::write(
        &block,
        r#"{"pipeline": "block_ml", "n": 30, "A": 8, "K": 2, "M": 2, "channel": "bsc:0.11", "trials": 3000, "seed": 5}"#,
    )
    .map_err(e)?;
    let ident = dir.path().join("ident.json");
    std::fs::write(&ident, r#"{"dists": [[0.2, 0.8], [0.5, 0.5], [0.7, 0.3], [0.9, 0.1]], "n": 10, "trials": 3000, "seed": 9}"#)
        .map_err(e)?;
    let sim = sim.to_str().unwrap();
    let block = block.to_str().unwrap();
    let ident = ident.to_str().unwrap();
    let jobs: Vec<(&str, Vec<&str>)> = vec![
        ("simulate", vec!["simulate", "--config", sim]),
        ("simulate-block-ml", vec!["simulate", "--config", block]),
        ("identify", vec!["identify", "--config", ident]),
        ("region", vec!["region", "--theorem", "2", "--channel", "bsc:0.11", "--resolution", "50"]),
        ("verify", vec!["verify", "--lemma1", "--kmax", "5", "--draws", "20"]),
    ];
    for (tag, args) in &jobs {
        let reference = run_cli(dir.path(), tag, 1, args)?;
        for threads in [2, 8] {
            let other = run_cli(dir.path(), tag, threads, args)?;
            ensure!(other == reference, "{tag}: output differs between 1 and {threads} threads");
        }
    }

    let exp = noiseless_experiment()?;
    let runs: Vec<String> = [1, 3]
        .into_iter()
        .map(|t| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap();
            let run = pool.install(|| run_experiment(&exp)).unwrap();
            serde_json::to_string(&(run.report, run.trials)).unwrap()
        })
        .collect();
    ensure!(runs[0] == runs[1], "library run differs across pools");
    Ok(format!("{} CLI jobs byte-identical at 1/2/8 threads; library run identical at 1/3 threads", jobs.len()))
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("mean cycle gain bound", cycle_gain_bound),
        ("cycle counting", cycle_counting),
        ("identification bound validity", identification_bound),
        ("dominant error event", dominant_error_event),
        ("BSC closed forms", bsc_closed_forms),
        ("region consistency", region_consistency),
        ("collision statistics", collision_statistics),
        ("noiseless end-to-end", noiseless_sanity),
        ("noisy end-to-end trend", noisy_trend),
        ("divergence identities and bounds", divergence_identities),
        ("balanced occupancy", balanced_occupancy),
        ("determinism across thread counts", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS [{:>2}] {name}: {detail} ({took:.2?})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{:>2}] {name}: {detail} ({took:.2?})", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
