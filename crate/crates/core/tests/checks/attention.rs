//! Attention rows are distributions over positions for arbitrary inputs.

use super::Verdict;
use evasion_core::surrogate::network::{Dims, Forward, Params};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 1000 random inputs across ten models, one of them saturated.
pub fn run() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut problems = Vec::new();
    let mut models: Vec<Params> = (0..10)
        .map(|_| {
            let dims = Dims {
                vocab: 30,
                embed: rng.gen_range(2..=8),
                hidden: rng.gen_range(2..=8),
                key: rng.gen_range(2..=8),
                value: rng.gen_range(2..=8),
            };
            Params::init(dims, &mut rng)
        })
        .collect();
    // Large weights push the softmax towards saturation.
    for (_, t) in models[9].tensors_mut() {
        t.data.iter_mut().for_each(|v| *v *= 25.0);
    }
    let mut rows = 0usize;
    for input in 0..1000 {
        let p = &models[input % models.len()];
        let len = rng.gen_range(1..=40);
        let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..30)).collect();
        let f = Forward::run(p, &ids);
        if f.attention().len() != len {
            problems.push(format!("input {input}: {} rows for {len} tokens", f.attention().len()));
        }
        for row in f.attention() {
            rows += 1;
            if row.len() != len || !row.iter().all(|w| w.is_finite() && *w >= 0.0) {
                problems.push(format!("input {input}: malformed row"));
            }
            let err = (row.iter().sum::<f64>() - 1.0).abs();
            worst = worst.max(err);
            if err >= 1e-6 {
                problems.push(format!("input {input}: row sums to 1 + {err:e}"));
            }
        }
        let pooled: f64 = f.weights.iter().sum();
        if (pooled - 1.0).abs() >= 1e-6 {
            problems.push(format!("input {input}: token weights sum to {pooled}"));
        }
    }
    Verdict::new(
        problems.is_empty(),
        format!("{rows} rows, worst row-sum error {worst:e}"),
        problems,
    )
}
