use itertools::Itertools;
use proptest::prelude::*;

use sasmac::assignment::max_weight_assignment;
use sasmac::graph::{cycle_gain, cycle_gain_check, enumerate_cycles, identification_graph, Cycle, WeightedCompleteGraph};
use sasmac::identification::{
    assignment_decode, assignment_loglik, identifiability_sum, log_likelihood_matrix, mc_identification_error,
    ml_permutation_decode, pe_lower_bound, pe_upper_bound, IdentificationInstance,
};
use sasmac::Distribution;

fn dist(m: usize) -> impl Strategy<Value = Distribution> {
    prop::collection::vec(0.01f64..1.0, m).prop_map(|w| Distribution::from_weights(w).unwrap())
}

fn ber(p: f64) -> Distribution {
    Distribution::bernoulli(p).unwrap()
}

/// Instance plus one sequence per distribution, symbols drawn uniformly.
fn instance_with_samples() -> impl Strategy<Value = (IdentificationInstance, Vec<Vec<usize>>)> {
    (2usize..=5, 2usize..=3, 1usize..=6).prop_flat_map(|(a, m, n)| {
        (
            prop::collection::vec(dist(m), a),
            prop::collection::vec(prop::collection::vec(0..m, n), a),
        )
            .prop_map(move |(d, s)| (IdentificationInstance::new(d, n).unwrap(), s))
    })
}

fn brute_force_best(ll: &[Vec<f64>]) -> f64 {
    (0..ll.len())
        .permutations(ll.len())
        .map(|s| s.iter().enumerate().map(|(i, &j)| ll[i][j]).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max)
}

proptest! {
    #[test]
    fn mean_cycle_gain_bound(
        (k, weights) in (3usize..=6).prop_flat_map(|k| (Just(k), prop::collection::vec(1e-3f64..=1.0, k * (k - 1) / 2))),
        r_off in 0usize..6,
    ) {
        let r = 2 + r_off % (k - 1);
        let g = WeightedCompleteGraph::new(k, weights.clone()).unwrap();
        let check = cycle_gain_check(&g, r).unwrap();
        // independent mean over the enumerated cycles
        let cycles = enumerate_cycles(k, r).unwrap();
        let mean = cycles.iter().map(|c| cycle_gain(&g, c).unwrap()).sum::<f64>() / cycles.len() as f64;
        let rhs = (weights.iter().map(|a| a * a).sum::<f64>() / weights.len() as f64).powf(r as f64 / 2.0);
        prop_assert!((check.lhs_mean - mean).abs() <= 1e-12 * mean.max(1e-300));
        prop_assert!(mean <= rhs * (1.0 + 1e-12));
        prop_assert!(check.holds);
    }

    #[test]
    fn cycle_canonical_form_ignores_rotation_and_reflection(
        verts in Just((0usize..8).collect::<Vec<_>>()).prop_shuffle(),
        len in 3usize..=8,
        shift in 0usize..8,
    ) {
        let v: Vec<usize> = verts[..len].to_vec();
        let c = Cycle::new(v.clone()).unwrap();
        let mut rotated = v.clone();
        rotated.rotate_left(shift % len);
        prop_assert_eq!(Cycle::new(rotated).unwrap(), c.clone());
        let mut mirrored = v;
        mirrored.reverse();
        prop_assert_eq!(Cycle::new(mirrored).unwrap(), c.clone());
        prop_assert_eq!(c.reversed(), c.clone());
        prop_assert_eq!(c.vertices()[0], *c.vertices().iter().min().unwrap());
    }

    #[test]
    fn assignment_matches_exhaustive_search(
        ll in (2usize..=6).prop_flat_map(|a| prop::collection::vec(prop::collection::vec(-50.0f64..0.0, a), a))
    ) {
        let sigma = max_weight_assignment(&ll);
        let total: f64 = sigma.iter().enumerate().map(|(i, &j)| ll[i][j]).sum();
        let mut seen = sigma.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..ll.len()).collect::<Vec<_>>());
        prop_assert!((total - brute_force_best(&ll)).abs() < 1e-9);
    }

    #[test]
    fn ml_decoders_agree((inst, samples) in instance_with_samples()) {
        let ml = ml_permutation_decode(&samples, &inst).unwrap();
        let hung = assignment_decode(&samples, &inst).unwrap();
        let a = assignment_loglik(&samples, &inst, &ml).unwrap();
        let b = assignment_loglik(&samples, &inst, &hung).unwrap();
        let best = brute_force_best(&log_likelihood_matrix(&samples, inst.dists()).unwrap());
        prop_assert!((a - best).abs() < 1e-9 && (b - best).abs() < 1e-9);
    }

    #[test]
    fn ml_decoding_is_permutation_equivariant(
        (inst, samples) in instance_with_samples(),
        seed in any::<u64>(),
    ) {
        let a = samples.len();
        let mut pi: Vec<usize> = (0..a).collect();
        // deterministic shuffle from the seed
        let mut s = seed;
        for i in (1..a).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            pi.swap(i, (s >> 33) as usize % (i + 1));
        }
        let shuffled: Vec<Vec<usize>> = pi.iter().map(|&i| samples[i].clone()).collect();
        let original = ml_permutation_decode(&samples, &inst).unwrap();
        let permuted = ml_permutation_decode(&shuffled, &inst).unwrap();
        let lhs = assignment_loglik(&shuffled, &inst, &permuted).unwrap();
        let rhs = assignment_loglik(&samples, &inst, &original).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-9);
        // the shuffled decision composed with the shuffle is optimal for the original order
        let mut back = vec![0; a];
        for (pos, &i) in pi.iter().enumerate() {
            back[i] = permuted.as_slice()[pos];
        }
        let back = sasmac::identification::PermutationAssignment::new(back).unwrap();
        prop_assert!((assignment_loglik(&samples, &inst, &back).unwrap() - rhs).abs() < 1e-9);
    }

    #[test]
    fn identifiability_sum_is_total_two_cycle_gain(
        dists in (3usize..=6, 2usize..=3).prop_flat_map(|(a, m)| prop::collection::vec(dist(m), a)),
        n in 1usize..30,
    ) {
        let inst = IdentificationInstance::new(dists.clone(), n).unwrap();
        let g = identification_graph(&dists, n).unwrap();
        let two_cycles: f64 = enumerate_cycles(dists.len(), 2)
            .unwrap()
            .iter()
            .map(|c| cycle_gain(&g, c).unwrap())
            .sum();
        let s = identifiability_sum(&inst);
        prop_assert!((two_cycles - s).abs() <= 1e-12 * s.max(1e-300));
        let lower = pe_lower_bound(&inst);
        prop_assert!((0.0..1.0).contains(&lower));
        let upper = pe_upper_bound(&inst);
        prop_assert!(upper >= 16.0 * s * (1.0 - 1e-12));
        if 4.0 * s.sqrt() >= 1.0 {
            prop_assert!(upper.is_infinite());
        }
    }
}

#[test]
fn error_frequency_falls_with_block_length() {
    let dists = vec![ber(0.2), ber(0.45), ber(0.7)];
    let base = IdentificationInstance::new(dists, 5).unwrap();
    let mut last: Option<(f64, f64)> = None;
    for n in [5, 10, 20, 40] {
        let est = mc_identification_error(&base.with_n(n), 4000, 17).unwrap();
        if let Some((p, s)) = last {
            let sigma = (s * s + est.stderr * est.stderr).sqrt();
            assert!(est.p_hat <= p + 3.0 * sigma, "n={n}: {} after {p}", est.p_hat);
        }
        last = Some((est.p_hat, est.stderr));
    }
}

#[test]
fn monte_carlo_stays_below_upper_bound_on_separated_instances() {
    let cases = [
        (vec![ber(0.1), ber(0.5), ber(0.9)], 20),
        (vec![ber(0.05), ber(0.35), ber(0.65), ber(0.95)], 60),
        (vec![ber(0.2), ber(0.8)], 8),
    ];
    for (dists, n) in cases {
        let inst = IdentificationInstance::new(dists, n).unwrap();
        let est = mc_identification_error(&inst, 20_000, 3).unwrap();
        let upper = pe_upper_bound(&inst);
        assert!(upper.is_finite());
        assert!(est.p_hat <= upper + 3.0 * est.stderr, "{} > {upper}", est.p_hat);
    }
}
