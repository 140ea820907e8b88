//! SMO against an independent accelerated projected-gradient dual solver.

use super::Verdict;
use evasion_core::svmcore::{train_svm, SvmConfig, SvmModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn dataset(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<f64>) {
    loop {
        let n = rng.gen_range(8..=60);
        let d = rng.gen_range(2..=5);
        let normal: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let y: Vec<f64> = x
            .iter()
            .map(|xi| {
                let s = if dot(xi, &normal) + 0.2 > 0.0 { 1.0 } else { -1.0 };
                if rng.gen_bool(0.1) {
                    -s
                } else {
                    s
                }
            })
            .collect();
        let pos = y.iter().filter(|v| **v > 0.0).count();
        if pos >= 2 && n - pos >= 2 {
            return (x, y);
        }
    }
}

/// Euclidean projection onto {0 <= a <= c, y.a = 0} by bisection on the
/// multiplier of the equality constraint.
fn project(v: &[f64], y: &[f64], c: f64) -> Vec<f64> {
    let at = |mu: f64| -> Vec<f64> { v.iter().zip(y).map(|(vi, yi)| (vi - mu * yi).clamp(0.0, c)).collect() };
    let g = |mu: f64| dot(&at(mu), y);
    let (mut lo, mut hi) = (-1.0, 1.0);
    while g(lo) < 0.0 {
        lo *= 2.0;
    }
    while g(hi) > 0.0 {
        hi *= 2.0;
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(0.5 * (lo + hi))
}

struct Oracle {
    alpha: Vec<f64>,
    w: Vec<f64>,
    b: f64,
}

fn oracle(x: &[Vec<f64>], y: &[f64], c: f64) -> Oracle {
    let n = x.len();
    let q: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| y[i] * y[j] * dot(&x[i], &x[j])).collect())
        .collect();
    let qv = |a: &[f64]| -> Vec<f64> { q.iter().map(|row| dot(row, a)).collect() };
    // Lipschitz constant from power iteration, padded.
    let mut v = vec![1.0; n];
    let mut lip = 1.0;
    for _ in 0..500 {
        let next = qv(&v);
        lip = dot(&next, &next).sqrt();
        v = next.iter().map(|x| x / lip.max(1e-300)).collect();
    }
    let step = 1.0 / (lip * 1.05 + 1e-12);
    let mut a = vec![0.0; n];
    let mut z = a.clone();
    let mut t = 1.0f64;
    for _ in 0..25_000 {
        let grad: Vec<f64> = qv(&z).iter().map(|g| g - 1.0).collect();
        let next = project(
            &z.iter().zip(&grad).map(|(zi, gi)| zi - step * gi).collect::<Vec<_>>(),
            y,
            c,
        );
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        z = next
            .iter()
            .zip(&a)
            .map(|(n, o)| n + (t - 1.0) / t_next * (n - o))
            .collect();
        a = next;
        t = t_next;
    }
    let d = x[0].len();
    let mut w = vec![0.0; d];
    for i in 0..n {
        for k in 0..d {
            w[k] += a[i] * y[i] * x[i][k];
        }
    }
    let free: Vec<usize> = (0..n).filter(|&i| a[i] > 1e-7 * c && a[i] < c * (1.0 - 1e-7)).collect();
    let b = if free.is_empty() {
        // Midpoint of the interval allowed by the bound vectors.
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..n {
            let r = y[i] - dot(&w, &x[i]);
            let at_upper = a[i] >= c * (1.0 - 1e-7);
            if (y[i] > 0.0) != at_upper {
                lo = lo.max(r);
            } else {
                hi = hi.min(r);
            }
        }
        (lo + hi) / 2.0
    } else {
        free.iter().map(|&i| y[i] - dot(&w, &x[i])).sum::<f64>() / free.len() as f64
    };
    Oracle { alpha: a, w, b }
}

fn dual(x: &[Vec<f64>], y: &[f64], a: &[f64]) -> f64 {
    let n = x.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += a[i] * a[j] * y[i] * y[j] * dot(&x[i], &x[j]);
        }
    }
    0.5 * quad - a.iter().sum::<f64>()
}

fn kkt_residual(m: &SvmModel, x: &[Vec<f64>]) -> f64 {
    let c = m.c;
    let mut worst = m.alphas.iter().zip(&m.labels).map(|(a, y)| a * y).sum::<f64>().abs();
    for ((a, y), xi) in m.alphas.iter().zip(&m.labels).zip(x) {
        let yf = y * m.decision(xi);
        let r = if *a <= 1e-9 * c {
            (1.0 - yf).max(0.0)
        } else if *a >= c * (1.0 - 1e-9) {
            (yf - 1.0).max(0.0)
        } else {
            (yf - 1.0).abs()
        };
        worst = worst.max(r);
    }
    worst
}

/// 20 random problems: sign agreement on training points plus 200 probes
/// each, and the worst KKT residual of the SMO solution.
pub fn run() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut agree = 0usize;
    let mut total = 0usize;
    let mut worst_kkt: f64 = 0.0;
    let mut problems = Vec::new();
    for case in 0..20 {
        let (x, y) = dataset(&mut rng);
        let c = 10f64.powf(rng.gen_range(-1.3..1.3));
        let model = train_svm(
            &x,
            &y,
            &SvmConfig {
                c,
                ..SvmConfig::default()
            },
        )
        .unwrap();
        if !model.converged {
            problems.push(format!("case {case} did not converge"));
        }
        let reference = oracle(&x, &y, c);

        let (ds, dr) = (dual(&x, &y, &model.alphas), dual(&x, &y, &reference.alpha));
        if ds > dr + 1e-6 * dr.abs().max(1.0) {
            problems.push(format!("case {case}: smo dual {ds} vs oracle {dr}"));
        }
        worst_kkt = worst_kkt.max(kkt_residual(&model, &x));

        let d = x[0].len();
        let probes: Vec<Vec<f64>> = x
            .iter()
            .cloned()
            .chain((0..200).map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect()))
            .collect();
        for p in &probes {
            let fs = model.decision(p);
            let fr = dot(&reference.w, p) + reference.b;
            total += 1;
            if fs.signum() == fr.signum() {
                agree += 1;
            } else {
                problems.push(format!("case {case}: smo {fs:e} oracle {fr:e}"));
            }
        }
    }
    Verdict::new(
        agree == total && worst_kkt < 1e-4 && problems.is_empty(),
        format!("sign agreement {agree}/{total}, worst KKT residual {worst_kkt:e}"),
        problems,
    )
}
