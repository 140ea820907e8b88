//! The genetic search against exhaustive search on small pools.

use super::Verdict;
use evasion_core::attack::InsertOptions;
use evasion_core::corpus::{CodeSample, Label};
use evasion_core::featureid::ImportantFeature;
use evasion_core::fga::{fitness, run_fga, FgaConfig};
use evasion_core::par::Execution;
use evasion_core::pool::{AttackPool, PopulateConfig, SnippetId};
use evasion_core::snippetgen::OfflineGenerator;
use evasion_core::synth;
use evasion_core::targetzoo::BagOfTokensVictim;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

const FEATURES: &[&str] = &[
    "static", "const", "sizeof", "snprintf", "for", "while", "char", "printf", "unsigned",
];
const WEIGHTED: &[&str] = &[
    "static", "const", "sizeof", "snprintf", "for", "while", "char", "printf", "unsigned", "long", "if", "int",
];

/// A pool of `size` offline snippets and a victim weighting keyword tokens.
fn instance(seed: u64, size: usize) -> (AttackPool, Vec<CodeSample>, BagOfTokensVictim) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus = synth::benchmark_corpus(12, seed);
    let mut feats: Vec<&str> = FEATURES.to_vec();
    feats.shuffle(&mut rng);
    let features: Vec<ImportantFeature> = feats.iter().map(|t| ImportantFeature::manual(t)).collect();
    let mut full = AttackPool::new();
    full.populate(
        &OfflineGenerator,
        &features,
        &corpus,
        &PopulateConfig::default(),
        Execution::Sequential,
    );
    let mut ids: Vec<SnippetId> = full.ids().collect();
    ids.shuffle(&mut rng);
    let mut pool = AttackPool::new();
    for id in ids.into_iter().take(size) {
        let e = full.entry(id).unwrap();
        let host = corpus.iter().find(|h| h.id == e.host_id).unwrap();
        pool.add(e.snippet.clone(), host).unwrap();
    }
    let (mut weights, bias) = synth::benchmark_victim_weights();
    for t in WEIGHTED {
        weights.insert(t.to_string(), rng.gen_range(-1.2..0.4));
    }
    let group: Vec<CodeSample> = corpus
        .into_iter()
        .filter(|s| s.label == Label::Vulnerable)
        .take(8)
        .collect();
    (pool, group, BagOfTokensVictim::from_weights(weights, bias))
}

fn exhaustive_best(pool: &AttackPool, group: &[CodeSample], victim: &BagOfTokensVictim, config: &FgaConfig) -> f64 {
    let ids: Vec<SnippetId> = pool.ids().collect();
    let mut best = f64::NEG_INFINITY;
    let mut score = |g: &[SnippetId]| {
        let ind = fitness(
            g,
            group,
            pool,
            victim,
            config.lambda,
            &config.placement,
            config.location_seed,
        )
        .unwrap();
        best = best.max(ind.score);
    };
    for (i, &a) in ids.iter().enumerate() {
        score(&[a]);
        for &b in &ids[i + 1..] {
            score(&[a, b]);
        }
    }
    best
}

/// 20 seeded runs on pools of 6 to 10 snippets, genomes of at most two.
pub fn run() -> Verdict {
    let start = Instant::now();
    let mut hits = 0;
    let mut problems = Vec::new();
    for run in 0..20u64 {
        let size = 6 + (run as usize % 5);
        let (pool, group, victim) = instance(run, size);
        let config = FgaConfig {
            seed: run,
            location_seed: run,
            max_genome_len: 2,
            placement: InsertOptions::default(),
            ..FgaConfig::default()
        };
        let optimum = exhaustive_best(&pool, &group, &victim, &config);
        let out = run_fga(&config, &pool, &group, &victim).unwrap();
        let found = out.best().map_or(f64::NEG_INFINITY, |b| b.score);
        if pool.len() == size && (found - optimum).abs() < 1e-12 {
            hits += 1;
        } else {
            problems.push(format!(
                "run {run}: pool {} found {found} optimum {optimum}",
                pool.len()
            ));
        }
    }
    let elapsed = start.elapsed();
    if elapsed.as_secs_f64() >= 60.0 {
        problems.push(format!("took {elapsed:?}"));
    }
    Verdict::new(
        hits >= 19 && elapsed.as_secs_f64() < 60.0,
        format!("matched {hits}/20 in {:.1}s", elapsed.as_secs_f64()),
        problems,
    )
}
