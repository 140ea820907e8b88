//! Analytic gradients against central finite differences, every tensor.

use super::Verdict;
use evasion_core::surrogate::network::{Dims, Forward, Params};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn numeric(p: &Params, ids: &[usize], target: usize) -> Params {
    let mut g = p.zeros_like();
    let mut probe = p.clone();
    for (ti, (_, grad)) in g.tensors_mut().into_iter().enumerate() {
        for e in 0..grad.data.len() {
            let orig = probe.tensors()[ti].1.data[e];
            probe.tensors_mut()[ti].1.data[e] = orig + H;
            let up = Forward::run(&probe, ids).loss(target);
            probe.tensors_mut()[ti].1.data[e] = orig - H;
            let down = Forward::run(&probe, ids).loss(target);
            probe.tensors_mut()[ti].1.data[e] = orig;
            grad.data[e] = (up - down) / (2.0 * H);
        }
    }
    g
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Six models with every width at most 4.
pub fn run() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut problems = Vec::new();
    for case in 0..6 {
        let dims = Dims {
            vocab: 7,
            embed: rng.gen_range(2..=4),
            hidden: rng.gen_range(2..=4),
            key: rng.gen_range(2..=4),
            value: rng.gen_range(2..=4),
        };
        let mut p = Params::init(dims, &mut rng);
        // Move off the initial point so no gate or bias sits at a symmetric value.
        for (_, t) in p.tensors_mut() {
            for v in &mut t.data {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let len = rng.gen_range(1..=6);
        let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..7)).collect();
        let target = case % 2;

        let f = Forward::run(&p, &ids);
        let mut analytic = p.zeros_like();
        f.backward(&p, &ids, target, &mut analytic);
        let num = numeric(&p, &ids, target);
        for ((name, a), (_, n)) in analytic.tensors().into_iter().zip(num.tensors()) {
            let e = rel_err(&a.data, &n.data);
            worst = worst.max(e);
            if e >= 1e-4 {
                problems.push(format!("case {case} tensor {name}: relative error {e:e}"));
            }
        }
    }
    Verdict::new(problems.is_empty(), format!("worst relative error {worst:e}"), problems)
}
