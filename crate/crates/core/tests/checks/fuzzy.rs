//! Fuzzy c-means on random scalar sets.

use super::Verdict;
use evasion_core::fga::{fuzzy_cluster, fuzzy_objective, MAX_CLUSTER_ITERATIONS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 100 random sets: objective trace, membership rows and iteration count.
pub fn run() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut problems = Vec::new();
    let mut abs_rises = 0usize;
    let mut max_iters = 0usize;
    for set in 0..100 {
        let n = rng.gen_range(4..=60);
        let k = rng.gen_range(2..=4.min(n));
        let alpha = rng.gen_range(1.5..3.0);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let s = fuzzy_cluster(&scores, k, alpha, 1e-3, set).unwrap();
        max_iters = max_iters.max(s.iterations);
        if !s.converged || s.iterations > MAX_CLUSTER_ITERATIONS {
            problems.push(format!(
                "set {set}: {} iterations, converged {}",
                s.iterations, s.converged
            ));
        }
        for w in s.objective_trace.windows(2) {
            if w[1] > w[0] * (1.0 + 1e-12) + 1e-15 {
                problems.push(format!("set {set}: objective rose {} -> {}", w[0], w[1]));
            }
        }
        for row in &s.memberships {
            if (row.iter().sum::<f64>() - 1.0).abs() >= 1e-6 || !row.iter().all(|w| (0.0..=1.0).contains(w)) {
                problems.push(format!("set {set}: membership row {row:?}"));
            }
        }
        let last = fuzzy_objective(&scores, &s.centroids, &s.memberships, alpha);
        if (last - s.objective_trace.last().unwrap()).abs() >= 1e-12 {
            problems.push(format!(
                "set {set}: trace ends at {} but objective is {last}",
                s.objective_trace.last().unwrap()
            ));
        }
        // The updates minimize the squared form; steps that raise the
        // unsquared form are counted, not forbidden.
        abs_rises += s.objective_trace_abs.windows(2).filter(|w| w[1] > w[0] + 1e-12).count();
    }
    Verdict::new(
        problems.is_empty(),
        format!("at most {max_iters} iterations; unsquared objective rose on {abs_rises} half-steps"),
        problems,
    )
}
