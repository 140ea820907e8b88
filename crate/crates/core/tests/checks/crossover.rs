//! Parent selection frequencies against the closed-form softmax.

use super::Verdict;
use evasion_core::fga::{draw_index, fuzzy_cluster, select_mating_clusters};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Five populations, 10,000 draws each.
pub fn run() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut problems = Vec::new();
    let mut worst: f64 = 0.0;
    for trial in 0..5 {
        let n = rng.gen_range(8..=30);
        let alpha = 2.0;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let state = fuzzy_cluster(&scores, 4, alpha, 1e-3, trial).unwrap();
        let sel = select_mating_clusters(&state, &scores, alpha);

        // Closed form: f_i = w_ik^alpha |s_i - c_k| with k the survivor's more
        // likely mating cluster; p_i = exp(f_i) / sum exp(f_j).
        let f: Vec<f64> = sel
            .survivors
            .iter()
            .map(|&i| {
                let row = &state.memberships[i];
                let [a, b] = sel.clusters;
                let k = if row[b] > row[a] { b } else { a };
                row[k].powf(alpha) * (scores[i] - state.centroids[k]).abs()
            })
            .collect();
        let z: f64 = f.iter().map(|x| x.exp()).sum();
        let expected: Vec<f64> = f.iter().map(|x| x.exp() / z).collect();
        let probs = sel.parent_probabilities();
        for (i, (p, e)) in probs.iter().zip(&expected).enumerate() {
            if (p - e).abs() >= 1e-12 {
                problems.push(format!("trial {trial} parent {i}: probability {p} vs closed form {e}"));
            }
        }

        let draws = 10_000;
        let mut counts = vec![0usize; probs.len()];
        for _ in 0..draws {
            counts[draw_index(&probs, &mut rng)] += 1;
        }
        for (i, (c, e)) in counts.iter().zip(&expected).enumerate() {
            let dev = (*c as f64 / draws as f64 - e).abs();
            worst = worst.max(dev);
            if dev >= 0.02 {
                problems.push(format!("trial {trial} parent {i}: frequency off by {dev}"));
            }
        }
    }
    Verdict::new(
        problems.is_empty(),
        format!("worst frequency deviation {worst:.4}"),
        problems,
    )
}
