//! Fuzzy-clustering genetic search over snippet combinations.
//!
//! Individuals are scored by how many vulnerable samples they flip minus a
//! per-line penalty. Each generation the valid scores are min-max
//! normalized, fuzzy-clustered, the two highest clusters survive (plus the
//! global best), and children are concatenations of parents drawn with
//! softmax weights over a membership-weighted centroid distance.

use crate::attack::{insert, AttackError, InsertOptions, DECISION_THRESHOLD};
use crate::corpus::CodeSample;
use crate::par::{self, Execution};
use crate::pool::{AttackPool, SnippetId};
use crate::targetzoo::{Concurrency, OracleError, VictimOracle};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashSet};
use thiserror::Error;

pub const MAX_CLUSTER_ITERATIONS: usize = 100;
const CROSSOVER_ATTEMPTS: usize = 20;
const FRESH_ATTEMPTS: usize = 64;

#[derive(Debug, Error)]
pub enum FgaError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("the snippet pool is empty")]
    EmptyPool,
    #[error("the vulnerable group is empty")]
    EmptyGroup,
    #[error("need at least {k} scores to form {k} clusters, got {n}")]
    TooFewScores { n: usize, k: usize },
    #[error("oracle: {0}")]
    Oracle(#[from] OracleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FgaConfig {
    pub k: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub population_size: usize,
    pub max_generations: usize,
    pub max_genome_len: usize,
    /// Oracle call budget for the whole search; unlimited when absent.
    pub max_queries: Option<u64>,
    pub seed: u64,
    pub location_seed: u64,
    pub placement: InsertOptions,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for FgaConfig {
    fn default() -> Self {
        FgaConfig {
            k: 4,
            alpha: 2.0,
            lambda: 0.01,
            epsilon: 1e-3,
            population_size: 30,
            max_generations: 50,
            max_genome_len: 4,
            max_queries: None,
            seed: 0,
            location_seed: 0,
            placement: InsertOptions::default(),
            execution: Execution::default(),
        }
    }
}

impl FgaConfig {
    pub fn validate(&self) -> Result<(), FgaError> {
        let bad = |m: &str| Err(FgaError::Config(m.to_string()));
        if self.k < 2 {
            return bad("k must be at least 2");
        }
        if !(self.alpha > 1.0 && self.alpha.is_finite()) {
            return bad("alpha must be a finite number above 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        if self.population_size < self.k {
            return bad("population_size must be at least k");
        }
        if self.max_genome_len == 0 {
            return bad("max_genome_len must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub genome: Vec<SnippetId>,
    /// `-inf` when some snippet fails validation on some host.
    #[serde(with = "score_serde")]
    pub score: f64,
    pub last_asr: f64,
    pub total_lines: usize,
}

impl Individual {
    pub fn is_valid(&self) -> bool {
        self.score.is_finite()
    }
}

mod score_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

/// Order-insensitive identity of a combination.
pub fn combination_key(genome: &[SnippetId]) -> Vec<SnippetId> {
    let set: BTreeSet<SnippetId> = genome.iter().copied().collect();
    set.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzyState {
    pub centroids: Vec<f64>,
    /// Row per score, column per cluster.
    pub memberships: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    /// All scores were equal; a single effective cluster.
    pub degenerate: bool,
    /// Objective after every membership and centroid half-step.
    pub objective_trace: Vec<f64>,
    /// The same points with unsquared distances.
    pub objective_trace_abs: Vec<f64>,
}

impl FuzzyState {
    pub fn non_empty_clusters(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }
}

/// Sum of membership^alpha times squared distance to the centroid.
pub fn fuzzy_objective(scores: &[f64], centroids: &[f64], memberships: &[Vec<f64>], alpha: f64) -> f64 {
    weighted_distance_sum(scores, centroids, memberships, alpha, |d| d * d)
}

/// The same sum with unsquared distances.
pub fn fuzzy_objective_abs(scores: &[f64], centroids: &[f64], memberships: &[Vec<f64>], alpha: f64) -> f64 {
    weighted_distance_sum(scores, centroids, memberships, alpha, f64::abs)
}

fn weighted_distance_sum(
    scores: &[f64],
    centroids: &[f64],
    memberships: &[Vec<f64>],
    alpha: f64,
    dist: impl Fn(f64) -> f64,
) -> f64 {
    scores
        .iter()
        .zip(memberships)
        .map(|(s, row)| {
            row.iter()
                .zip(centroids)
                .map(|(w, c)| w.powf(alpha) * dist(s - c))
                .sum::<f64>()
        })
        .sum()
}

fn membership_row(score: f64, centroids: &[f64], alpha: f64) -> Vec<f64> {
    let d: Vec<f64> = centroids.iter().map(|c| (score - c).abs()).collect();
    let zeros = d.iter().filter(|&&x| x == 0.0).count();
    if zeros > 0 {
        return d
            .iter()
            .map(|&x| if x == 0.0 { 1.0 / zeros as f64 } else { 0.0 })
            .collect();
    }
    let exponent = 2.0 / (alpha - 1.0);
    // w_k = 1 / sum_j (d_k / d_j)^e, evaluated as (1/d_k)^e / sum_j (1/d_j)^e
    // relative to the nearest centroid to stay finite.
    let dmin = d.iter().copied().fold(f64::INFINITY, f64::min);
    let inv: Vec<f64> = d.iter().map(|x| (dmin / x).powf(exponent)).collect();
    let total: f64 = inv.iter().sum();
    inv.iter().map(|x| x / total).collect()
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fuzzy c-means on scalars. Centroids start uniform over the score range.
pub fn fuzzy_cluster(scores: &[f64], k: usize, alpha: f64, epsilon: f64, seed: u64) -> Result<FuzzyState, FgaError> {
    if k < 2 || alpha.partial_cmp(&1.0) != Some(std::cmp::Ordering::Greater) {
        return Err(FgaError::Config(format!("k = {k}, alpha = {alpha}")));
    }
    if scores.len() < k {
        return Err(FgaError::TooFewScores { n: scores.len(), k });
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return Ok(FuzzyState {
            centroids: vec![lo; k],
            memberships: vec![vec![1.0 / k as f64; k]; scores.len()],
            labels: vec![0; scores.len()],
            iterations: 0,
            converged: true,
            degenerate: true,
            objective_trace: vec![0.0],
            objective_trace_abs: vec![0.0],
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<f64> = (0..k).map(|_| lo + rng.gen::<f64>() * (hi - lo)).collect();
    let mut memberships: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    let mut trace_abs = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_CLUSTER_ITERATIONS {
        iterations += 1;
        memberships = scores.iter().map(|&s| membership_row(s, &centroids, alpha)).collect();
        trace.push(fuzzy_objective(scores, &centroids, &memberships, alpha));
        trace_abs.push(fuzzy_objective_abs(scores, &centroids, &memberships, alpha));
        let new_labels: Vec<usize> = memberships.iter().map(|r| argmax_lowest(r)).collect();
        let mut movement: f64 = 0.0;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let (mut num, mut den) = (0.0, 0.0);
            for (s, row) in scores.iter().zip(&memberships) {
                let w = row[c].powf(alpha);
                num += w * s;
                den += w;
            }
            if den > 0.0 {
                let next = num / den;
                movement = movement.max((next - *centroid).abs());
                *centroid = next;
            }
        }
        trace.push(fuzzy_objective(scores, &centroids, &memberships, alpha));
        trace_abs.push(fuzzy_objective_abs(scores, &centroids, &memberships, alpha));
        let stable = new_labels == labels;
        labels = new_labels;
        if stable && movement < epsilon {
            converged = true;
            break;
        }
    }
    Ok(FuzzyState {
        centroids,
        memberships,
        labels,
        iterations,
        converged,
        degenerate: false,
        objective_trace: trace,
        objective_trace_abs: trace_abs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// The two mating clusters, highest centroid first.
    pub clusters: [usize; 2],
    /// Survivor indices into the clustered scores, ascending.
    pub survivors: Vec<usize>,
    /// Per survivor, the selected cluster it belongs to most (0 or 1).
    pub side: Vec<usize>,
    /// Per survivor, membership^alpha times distance to that cluster's centroid.
    pub affinity: Vec<f64>,
    /// Fewer than two non-empty clusters; survivors were split at the median.
    pub fallback: bool,
}

impl Selection {
    /// Parent-selection probabilities over survivors: softmax of affinity.
    pub fn parent_probabilities(&self) -> Vec<f64> {
        let m = self.affinity.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.affinity.iter().map(|f| (f - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|x| x / z).collect()
    }
}

/// Keeps the members of the two highest-centroid clusters and the global
/// best score. Centroid ties go to the lower cluster index.
pub fn select_mating_clusters(state: &FuzzyState, scores: &[f64], alpha: f64) -> Selection {
    let n = scores.len();
    let best = argmax_lowest(scores);
    let non_empty = state.non_empty_clusters();
    if state.degenerate || non_empty.len() < 2 {
        // Upper half by rank forms one side, the rest the other.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let upper = n.div_ceil(2);
        let mut side = vec![0; n];
        for &i in &order[upper..] {
            side[i] = 1;
        }
        let mean = |s: usize| {
            let members: Vec<f64> = (0..n).filter(|&i| side[i] == s).map(|i| scores[i]).collect();
            members.iter().sum::<f64>() / members.len().max(1) as f64
        };
        let means = [mean(0), mean(1)];
        return Selection {
            clusters: [0, 0],
            survivors: (0..n).collect(),
            affinity: (0..n).map(|i| (scores[i] - means[side[i]]).abs()).collect(),
            side,
            fallback: true,
        };
    }
    let mut ranked: Vec<usize> = non_empty.into_iter().collect();
    ranked.sort_by(|&a, &b| state.centroids[b].total_cmp(&state.centroids[a]).then(a.cmp(&b)));
    let clusters = [ranked[0], ranked[1]];
    let survivors: Vec<usize> = (0..n)
        .filter(|&i| i == best || clusters.contains(&state.labels[i]))
        .collect();
    let mut side = Vec::with_capacity(survivors.len());
    let mut affinity = Vec::with_capacity(survivors.len());
    for &i in &survivors {
        let row = &state.memberships[i];
        let s = usize::from(row[clusters[1]] > row[clusters[0]]);
        let c = clusters[s];
        side.push(s);
        affinity.push(row[c].powf(alpha) * (scores[i] - state.centroids[c]).abs());
    }
    Selection {
        clusters,
        survivors,
        side,
        affinity,
        fallback: false,
    }
}

/// Inverse-CDF draw from a probability vector.
pub fn draw_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Concatenation with repeated ids dropped, cut to `max_len`.
pub fn concat_child(a: &[SnippetId], b: &[SnippetId], max_len: usize) -> Vec<SnippetId> {
    let mut seen = HashSet::new();
    a.iter()
        .chain(b)
        .copied()
        .filter(|id| seen.insert(*id))
        .take(max_len)
        .collect()
}

/// Breeds up to `count` children whose combinations are not in `seen`.
/// Each child has two distinct parents; the first is drawn from the
/// selection probabilities, the second from them renormalized without the
/// first. When every attempt repeats a known combination an unseen random
/// combination (a singleton when one is left) is injected instead.
pub fn crossover(
    parents: &[&[SnippetId]],
    selection: &Selection,
    pool: &AttackPool,
    max_len: usize,
    count: usize,
    seen: &mut HashSet<Vec<SnippetId>>,
    rng: &mut impl Rng,
) -> Vec<Vec<SnippetId>> {
    let probs = selection.parent_probabilities();
    let mut out = Vec::new();
    for _ in 0..count {
        let mut child = None;
        if parents.len() >= 2 {
            for _ in 0..CROSSOVER_ATTEMPTS {
                let a = draw_index(&probs, rng);
                let mut rest = probs.clone();
                rest[a] = 0.0;
                let z: f64 = rest.iter().sum();
                let b = if z > 0.0 {
                    rest.iter_mut().for_each(|p| *p /= z);
                    draw_index(&rest, rng)
                } else {
                    (a + 1) % parents.len()
                };
                let c = concat_child(parents[a], parents[b], max_len);
                if seen.insert(combination_key(&c)) {
                    child = Some(c);
                    break;
                }
            }
        }
        match child.or_else(|| fresh_combination(pool, max_len, seen, rng)) {
            Some(c) => out.push(c),
            None => break,
        }
    }
    out
}

fn fresh_combination(
    pool: &AttackPool,
    max_len: usize,
    seen: &mut HashSet<Vec<SnippetId>>,
    rng: &mut impl Rng,
) -> Option<Vec<SnippetId>> {
    let ids: Vec<SnippetId> = pool.ids().collect();
    let singles: Vec<SnippetId> = ids.iter().copied().filter(|id| !seen.contains(&vec![*id])).collect();
    if let Some(&id) = singles.choose(rng) {
        seen.insert(vec![id]);
        return Some(vec![id]);
    }
    for _ in 0..FRESH_ATTEMPTS {
        let len = rng.gen_range(1..=max_len.min(ids.len()));
        let g: Vec<SnippetId> = ids.choose_multiple(rng, len).copied().collect();
        if seen.insert(combination_key(&g)) {
            return Some(g);
        }
    }
    None
}

/// Score of one genome: fraction of `vuln_group` classified non-vulnerable
/// after insertion, minus `lambda` per inserted line. A genome that fails
/// insertion on any host scores `-inf` without querying.
pub fn fitness(
    genome: &[SnippetId],
    vuln_group: &[CodeSample],
    pool: &AttackPool,
    oracle: &dyn VictimOracle,
    lambda: f64,
    placement: &InsertOptions,
    location_seed: u64,
) -> Result<Individual, FgaError> {
    let scorer = Scorer {
        vuln_group,
        pool,
        oracle,
        lambda,
        placement,
        location_seed,
        exec: Execution::Sequential,
        budget: None,
    };
    let mut used = 0;
    let (mut scored, _) = scorer.score(vec![genome.to_vec()], &mut used)?;
    Ok(scored.remove(0))
}

struct Scorer<'a> {
    vuln_group: &'a [CodeSample],
    pool: &'a AttackPool,
    oracle: &'a dyn VictimOracle,
    lambda: f64,
    placement: &'a InsertOptions,
    location_seed: u64,
    exec: Execution,
    budget: Option<u64>,
}

impl Scorer<'_> {
    /// Scores genomes in order while the budget lasts. Insertion and
    /// validation come first, so invalid genomes cost nothing; valid ones
    /// past the budget are dropped and reported through the flag.
    fn score(&self, genomes: Vec<Vec<SnippetId>>, queries_used: &mut u64) -> Result<(Vec<Individual>, bool), FgaError> {
        let exec = if self.oracle.concurrency() == Concurrency::Serial {
            Execution::Sequential
        } else {
            self.exec
        };
        let prepared: Vec<Option<Vec<CodeSample>>> = par::map(&genomes, exec, |g| {
            self.vuln_group
                .iter()
                .map(|s| insert(s, g, self.pool, self.placement, self.location_seed).map(|(adv, _)| adv))
                .collect::<Result<Vec<_>, AttackError>>()
                .ok()
        });
        let per_genome = self.vuln_group.len() as u64;
        let mut affordable = match self.budget {
            Some(max) => max.saturating_sub(*queries_used) / per_genome,
            None => u64::MAX,
        };
        let mut exhausted = false;
        let mut kept: Vec<(Vec<SnippetId>, Option<Vec<CodeSample>>)> = Vec::new();
        for (g, p) in genomes.into_iter().zip(prepared) {
            if p.is_some() {
                if affordable == 0 {
                    exhausted = true;
                    continue;
                }
                affordable -= 1;
            }
            kept.push((g, p));
        }
        let jobs: Vec<(usize, &CodeSample)> = kept
            .iter()
            .enumerate()
            .filter_map(|(gi, (_, p))| p.as_ref().map(|advs| advs.iter().map(move |a| (gi, a))))
            .flatten()
            .collect();
        let probs = par::map(&jobs, exec, |(_, adv)| self.oracle.predict(adv));
        *queries_used += jobs.len() as u64;
        let mut flips = vec![0usize; kept.len()];
        for ((gi, _), p) in jobs.iter().zip(probs) {
            if p? < DECISION_THRESHOLD {
                flips[*gi] += 1;
            }
        }
        let individuals = kept
            .into_iter()
            .zip(flips)
            .map(|((genome, prep), f)| {
                let total_lines = genome
                    .iter()
                    .filter_map(|id| self.pool.get(*id))
                    .map(|s| s.line_count())
                    .sum();
                let (score, last_asr) = match prep {
                    Some(_) => {
                        let asr = f as f64 / self.vuln_group.len() as f64;
                        (asr - self.lambda * total_lines as f64, asr)
                    }
                    None => (f64::NEG_INFINITY, 0.0),
                };
                Individual {
                    genome,
                    score,
                    last_asr,
                    total_lines,
                }
            })
            .collect();
        Ok((individuals, exhausted))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog {
    pub gen: usize,
    #[serde(with = "score_serde")]
    pub best_score: f64,
    #[serde(with = "score_serde")]
    pub mean_score: f64,
    pub best_genome: Vec<SnippetId>,
    pub queries_used: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// Some individual flipped the whole group.
    Success,
    MaxGenerations,
    /// The query budget ran out; the population is partial.
    BudgetExhausted,
    /// No unseen combination could be produced.
    SearchExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FgaOutcome {
    /// Sorted by score, best first.
    pub population: Vec<Individual>,
    pub log: Vec<GenerationLog>,
    pub stop: StopReason,
    pub queries_used: u64,
}

impl FgaOutcome {
    pub fn best(&self) -> Option<&Individual> {
        self.population.first().filter(|i| i.is_valid())
    }

    /// Valid genomes in rank order.
    pub fn ranked_genomes(&self) -> Vec<Vec<SnippetId>> {
        self.population
            .iter()
            .filter(|i| i.is_valid())
            .map(|i| i.genome.clone())
            .collect()
    }

    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|l| serde_json::to_string(l).unwrap() + "\n")
            .collect()
    }
}

fn sort_population(pop: &mut [Individual]) {
    // Stable: equal scores keep their age order.
    pop.sort_by(|a, b| b.score.total_cmp(&a.score));
}

fn log_entry(gen: usize, pop: &[Individual], queries_used: u64) -> GenerationLog {
    let valid: Vec<&Individual> = pop.iter().filter(|i| i.is_valid()).collect();
    let best = valid
        .iter()
        .max_by(|a, b| a.score.total_cmp(&b.score).then(std::cmp::Ordering::Greater));
    GenerationLog {
        gen,
        best_score: best.map_or(f64::NEG_INFINITY, |b| b.score),
        mean_score: if valid.is_empty() {
            f64::NEG_INFINITY
        } else {
            valid.iter().map(|i| i.score).sum::<f64>() / valid.len() as f64
        },
        best_genome: best.map(|b| b.genome.clone()).unwrap_or_default(),
        queries_used,
    }
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

fn initial_genomes(
    pool: &AttackPool,
    config: &FgaConfig,
    rng: &mut ChaCha8Rng,
    seen: &mut HashSet<Vec<SnippetId>>,
) -> Vec<Vec<SnippetId>> {
    let ids: Vec<SnippetId> = pool.ids().collect();
    let max_len = config.max_genome_len.min(ids.len());
    let total = (1..=max_len).fold(0usize, |acc, l| acc.saturating_add(binomial(ids.len(), l)));
    let mut out = Vec::new();
    if total <= config.population_size {
        // Small enough to start from every combination.
        let mut all: Vec<Vec<SnippetId>> = vec![vec![]];
        for &id in &ids {
            let extended: Vec<Vec<SnippetId>> = all
                .iter()
                .filter(|g| g.len() < max_len)
                .map(|g| [g.as_slice(), &[id]].concat())
                .collect();
            all.extend(extended);
        }
        all.retain(|g| !g.is_empty());
        all.shuffle(rng);
        for g in all {
            seen.insert(combination_key(&g));
            out.push(g);
        }
        return out;
    }
    let mut attempts = 0;
    while out.len() < config.population_size && attempts < config.population_size * 50 {
        attempts += 1;
        let len = rng.gen_range(1..=max_len);
        let g: Vec<SnippetId> = ids.choose_multiple(rng, len).copied().collect();
        if seen.insert(combination_key(&g)) {
            out.push(g);
        }
    }
    out
}

/// Evolves snippet combinations against `oracle` on `vuln_group`.
pub fn run_fga(
    config: &FgaConfig,
    pool: &AttackPool,
    vuln_group: &[CodeSample],
    oracle: &dyn VictimOracle,
) -> Result<FgaOutcome, FgaError> {
    config.validate()?;
    if pool.is_empty() {
        return Err(FgaError::EmptyPool);
    }
    if vuln_group.is_empty() {
        return Err(FgaError::EmptyGroup);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut seen = HashSet::new();
    let mut queries_used = 0u64;
    let scorer = Scorer {
        vuln_group,
        pool,
        oracle,
        lambda: config.lambda,
        placement: &config.placement,
        location_seed: config.location_seed,
        exec: config.execution,
        budget: config.max_queries,
    };

    let initial = initial_genomes(pool, config, &mut rng, &mut seen);
    let (mut population, mut exhausted) = scorer.score(initial, &mut queries_used)?;
    sort_population(&mut population);
    let mut log = vec![log_entry(0, &population, queries_used)];
    let success = |pop: &[Individual]| pop.iter().any(|i| i.is_valid() && i.last_asr >= 1.0);

    let mut stop = StopReason::MaxGenerations;
    for gen in 1..=config.max_generations {
        if exhausted {
            stop = StopReason::BudgetExhausted;
            break;
        }
        if success(&population) {
            stop = StopReason::Success;
            break;
        }
        let valid: Vec<usize> = (0..population.len()).filter(|&i| population[i].is_valid()).collect();
        let raw: Vec<f64> = valid.iter().map(|&i| population[i].score).collect();
        let (lo, hi) = raw
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &s| (l.min(s), h.max(s)));
        let norm: Vec<f64> = raw
            .iter()
            .map(|s| if hi > lo { (s - lo) / (hi - lo) } else { 0.0 })
            .collect();

        let selection = if valid.len() >= 2 {
            let k = config.k.min(valid.len());
            let state = fuzzy_cluster(&norm, k, config.alpha, config.epsilon, rng.gen())?;
            Some(select_mating_clusters(&state, &norm, config.alpha))
        } else {
            None
        };
        let survivors: Vec<Individual> = match &selection {
            Some(sel) => sel.survivors.iter().map(|&j| population[valid[j]].clone()).collect(),
            None => valid.iter().map(|&i| population[i].clone()).collect(),
        };
        let parents: Vec<&[SnippetId]> = survivors.iter().map(|i| i.genome.as_slice()).collect();
        let target = config
            .population_size
            .saturating_sub(survivors.len())
            .max(config.population_size / 2);
        let children = match &selection {
            Some(sel) => crossover(&parents, sel, pool, config.max_genome_len, target, &mut seen, &mut rng),
            None => (0..target)
                .map_while(|_| fresh_combination(pool, config.max_genome_len, &mut seen, &mut rng))
                .collect(),
        };
        if children.is_empty() {
            stop = StopReason::SearchExhausted;
            break;
        }
        let (offspring, ran_out) = scorer.score(children, &mut queries_used)?;
        exhausted = ran_out;
        population = survivors;
        population.extend(offspring);
        sort_population(&mut population);
        population.truncate(config.population_size);
        log.push(log_entry(gen, &population, queries_used));
    }
    if exhausted {
        stop = StopReason::BudgetExhausted;
    } else if stop == StopReason::MaxGenerations && success(&population) {
        stop = StopReason::Success;
    }
    Ok(FgaOutcome {
        population,
        log,
        stop,
        queries_used,
    })
}
