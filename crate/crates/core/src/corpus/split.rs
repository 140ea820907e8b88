use super::{CodeSample, CorpusError, Label};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Fractions = [f64; 3];

/// Train / eval / test proportions.
pub const DEFAULT_FRACTIONS: Fractions = [0.70, 0.15, 0.15];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<CodeSample>,
    pub eval: Vec<CodeSample>,
    pub test: Vec<CodeSample>,
    pub fractions: Fractions,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.eval.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> impl Iterator<Item = &CodeSample> {
        self.train.iter().chain(&self.eval).chain(&self.test)
    }
}

/// Largest-remainder apportionment of `total` over `weights` (which sum to 1).
fn apportion(total: usize, weights: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    // Stable sort keeps the lower partition first on ties.
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra)
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Stratified, seeded three-way split.
///
/// Partition sizes are apportioned over the whole set first; the vulnerable
/// class is then apportioned over those sizes, and the non-vulnerable class
/// fills the remainder, so both the partition sizes and the per-class counts
/// are within one sample of their exact shares.
pub fn split(samples: &[CodeSample], seed: u64, fractions: Fractions) -> Result<DatasetSplit, CorpusError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (sum - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadFractions(fractions));
    }
    let n = samples.len();
    if n < 3 {
        return Err(CorpusError::TooFewSamples(n));
    }
    let targets = apportion(n, &fractions);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vuln: Vec<&CodeSample> = samples.iter().filter(|s| s.label == Label::Vulnerable).collect();
    let mut safe: Vec<&CodeSample> = samples.iter().filter(|s| s.label != Label::Vulnerable).collect();
    vuln.shuffle(&mut rng);
    safe.shuffle(&mut rng);

    let shares = targets.map(|t| t as f64 / n as f64);
    let vuln_counts = apportion(vuln.len(), &shares);

    let mut parts: [Vec<CodeSample>; 3] = Default::default();
    let (mut vi, mut si) = (0, 0);
    for p in 0..3 {
        let nv = vuln_counts[p];
        let ns = targets[p] - nv;
        parts[p].extend(vuln[vi..vi + nv].iter().map(|s| (*s).clone()));
        parts[p].extend(safe[si..si + ns].iter().map(|s| (*s).clone()));
        vi += nv;
        si += ns;
        parts[p].shuffle(&mut rng);
    }
    let [train, eval, test] = parts;
    Ok(DatasetSplit {
        train,
        eval,
        test,
        fractions,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LabelCounts, Language};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn corpus(vuln: usize, safe: usize) -> Vec<CodeSample> {
        (0..vuln + safe)
            .map(|i| {
                let label = if i < vuln {
                    Label::Vulnerable
                } else {
                    Label::Nonvulnerable
                };
                CodeSample::new(format!("s{i}"), "", label, Language::C)
            })
            .collect()
    }

    #[test]
    fn cwe399_sized_split() {
        let s = split(&corpus(1010, 1510), 7, DEFAULT_FRACTIONS).unwrap();
        assert_eq!((s.train.len(), s.eval.len(), s.test.len()), (1764, 378, 378));
    }

    #[test]
    fn same_seed_same_partitions() {
        let c = corpus(30, 70);
        assert_eq!(
            split(&c, 3, DEFAULT_FRACTIONS).unwrap(),
            split(&c, 3, DEFAULT_FRACTIONS).unwrap()
        );
        assert_ne!(
            split(&c, 3, DEFAULT_FRACTIONS).unwrap().train,
            split(&c, 4, DEFAULT_FRACTIONS).unwrap().train
        );
    }

    #[test]
    fn bad_fractions_rejected() {
        assert!(matches!(
            split(&corpus(5, 5), 0, [0.5, 0.5, 0.5]),
            Err(CorpusError::BadFractions(_))
        ));
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(matches!(
            split(&corpus(1, 1), 0, DEFAULT_FRACTIONS),
            Err(CorpusError::TooFewSamples(2))
        ));
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint_exhaustive_and_stratified(
            vuln in 0usize..60, safe in 0usize..60, seed in any::<u64>()
        ) {
            prop_assume!(vuln + safe >= 3);
            let c = corpus(vuln, safe);
            let s = split(&c, seed, DEFAULT_FRACTIONS).unwrap();
            let ids: Vec<&str> = s.all().map(|x| x.id.as_str()).collect();
            let unique: BTreeSet<&str> = ids.iter().copied().collect();
            prop_assert_eq!(ids.len(), c.len());
            prop_assert_eq!(unique, c.iter().map(|x| x.id.as_str()).collect::<BTreeSet<_>>());

            let n = c.len() as f64;
            let whole = LabelCounts::of(&c);
            for (part, f) in [&s.train, &s.eval, &s.test].iter().zip(DEFAULT_FRACTIONS) {
                prop_assert!((part.len() as f64 - f * n).abs() <= 1.0);
                let share = part.len() as f64 / n;
                let counts = LabelCounts::of(part);
                prop_assert!((counts.vulnerable as f64 - share * whole.vulnerable as f64).abs() <= 1.0);
                prop_assert!((counts.nonvulnerable as f64 - share * whole.nonvulnerable as f64).abs() <= 1.0);
            }
        }
    }
}
