//! Inserting snippet combinations into vulnerable functions, querying the
//! victim, and scoring the campaign.

use crate::corpus::lexer::{self, LexError, TokenKind};
use crate::corpus::{CodeSample, Label};
use crate::par::{self, Execution};
use crate::pool::{AttackPool, PoolError, SnippetId};
use crate::snippetgen::{apply_suffixes, validate_snippet, Snippet, SuffixError, ValidationReport};
use crate::targetzoo::{Concurrency, OracleError, VictimOracle};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

/// Vulnerable-probability at or above which a sample counts as detected.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("sample {0} has no legal insertion point")]
    NoBoundary(String),
    #[error("sample {id}: {source}")]
    Lex { id: String, source: LexError },
    #[error("sample {id}, snippet {snippet}: {source}")]
    Suffix {
        id: String,
        snippet: SnippetId,
        source: SuffixError,
    },
    #[error("sample {id}, snippet {snippet}: {report}")]
    Validation {
        id: String,
        snippet: SnippetId,
        report: ValidationReport,
    },
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("no results to score")]
    EmptyResults,
    #[error("k must be between 1 and {max}, got {k}")]
    BadK { k: usize, max: usize },
    #[error("clean set must contain both classes")]
    SingleClass,
    #[error("projection needs at least 3 points of equal dimension, got {0}")]
    TooFewPoints(usize),
    #[error("{0} representations, {1} labels and {2} flags do not line up")]
    Misaligned(usize, usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocationPolicy {
    /// Right after the first complete statement in the body.
    AfterFirstStatement,
    /// Boundaries drawn uniformly without replacement.
    UniformRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InsertOptions {
    pub policy: LocationPolicy,
    /// Put every snippet at one boundary instead of distinct ones.
    pub single_location: bool,
    /// Rename colliding identifiers before validation.
    pub suffix: bool,
}

impl Default for InsertOptions {
    fn default() -> Self {
        InsertOptions {
            policy: LocationPolicy::UniformRandom,
            single_location: false,
            suffix: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsertionPlan {
    pub sample_id: String,
    /// Per snippet, the 0-based original line after which it was inserted.
    pub locations: Vec<usize>,
    pub genome: Vec<SnippetId>,
    pub suffix_maps: Vec<BTreeMap<String, String>>,
}

/// Lines after which a statement may be inserted: inside a function body,
/// outside any data initializer or parenthesis, after a line ending in `;`,
/// `{` or `}`, not inside a comment or preprocessor directive, and not
/// splitting `if`/`else` or `do`/`while`.
pub fn statement_boundaries(sample: &CodeSample) -> Result<Vec<usize>, LexError> {
    let src = &sample.source;
    let all = lexer::lex(src, sample.language)?;
    let line_starts: Vec<usize> = std::iter::once(0)
        .chain(src.match_indices('\n').map(|(i, _)| i + 1))
        .collect();
    let line_of = |offset: usize| line_starts.partition_point(|&s| s <= offset) - 1;
    let n_lines = line_starts.len();

    // Lines belonging to preprocessor directives, including continuations.
    let mut directive = vec![false; n_lines];
    let mut continued = false;
    for (l, text) in src.split('\n').enumerate() {
        let is_dir = continued || text.trim_start().starts_with('#');
        directive[l] = is_dir;
        continued = is_dir && text.trim_end().ends_with('\\');
    }
    // Lines whose end falls inside a multi-line token.
    let mut spanned = vec![false; n_lines];
    for t in &all {
        let (a, b) = (line_of(t.start), line_of(t.end.saturating_sub(1).max(t.start)));
        for s in spanned.iter_mut().take(b).skip(a) {
            *s = true;
        }
    }

    let code: Vec<&lexer::Token<'_>> = all
        .iter()
        .filter(|t| t.kind != TokenKind::Comment && !directive[line_of(t.start)])
        .collect();
    // true = statement block, false = aggregate initializer or type body.
    let mut braces: Vec<bool> = Vec::new();
    let mut parens = 0usize;
    let mut out = Vec::new();
    for (i, t) in code.iter().enumerate() {
        match t.text {
            "(" | "[" => parens += 1,
            ")" | "]" => parens = parens.saturating_sub(1),
            "{" => {
                let prev = i.checked_sub(1).map(|j| code[j].text);
                let data = matches!(prev, Some("=" | "," | "(" | "[" | "return"))
                    || code[i.saturating_sub(3)..i]
                        .iter()
                        .any(|p| matches!(p.text, "struct" | "union" | "enum"))
                        && !matches!(prev, Some(")"));
                braces.push(!data);
            }
            "}" => {
                braces.pop();
            }
            _ => {}
        }
        let line = line_of(t.start);
        let last_on_line = code.get(i + 1).is_none_or(|n| line_of(n.start) != line);
        if !last_on_line || spanned[line] {
            continue;
        }
        let ends_ok = matches!(t.text, ";" | "{" | "}");
        let in_body = !braces.is_empty() && braces.iter().all(|&b| b);
        let next_ok = code
            .get(i + 1)
            .is_none_or(|n| !matches!(n.text, "else" | "while" | "catch" | "finally"));
        if ends_ok && in_body && parens == 0 && next_ok {
            out.push(line);
        }
    }
    Ok(out)
}

fn indentation_of(line: &str) -> &str {
    &line[..line.len() - line.trim_start().len()]
}

fn location_seed(seed: u64, sample_id: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(sample_id.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Picks one boundary per snippet. Distinct boundaries are used while they
/// last; a body with fewer boundaries than snippets reuses them in order.
fn choose_locations(
    boundaries: &[usize],
    count: usize,
    options: &InsertOptions,
    seed: u64,
    sample_id: &str,
) -> Vec<usize> {
    if count == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(location_seed(seed, sample_id));
    let distinct = if options.single_location {
        1
    } else {
        count.min(boundaries.len())
    };
    let mut picked: Vec<usize> = match options.policy {
        LocationPolicy::AfterFirstStatement => {
            // Skip the opening-brace boundary when a statement follows it.
            let start = usize::from(boundaries.len() > 1);
            (0..distinct)
                .map(|i| boundaries[(start + i) % boundaries.len()])
                .collect()
        }
        LocationPolicy::UniformRandom => {
            if options.single_location {
                vec![boundaries[rng.gen_range(0..boundaries.len())]]
            } else {
                sample_indices(&mut rng, boundaries.len(), distinct)
                    .into_iter()
                    .map(|i| boundaries[i])
                    .collect()
            }
        }
    };
    picked.sort_unstable();
    (0..count).map(|i| picked[i % picked.len()]).collect()
}

/// Suffixes every genome snippet against the host plus the snippets placed
/// before it, validates it against the host, and splices it in.
pub fn insert(
    sample: &CodeSample,
    genome: &[SnippetId],
    pool: &AttackPool,
    options: &InsertOptions,
    seed: u64,
) -> Result<(CodeSample, InsertionPlan), AttackError> {
    let boundaries = statement_boundaries(sample).map_err(|source| AttackError::Lex {
        id: sample.id.clone(),
        source,
    })?;
    if genome.is_empty() {
        let plan = InsertionPlan {
            sample_id: sample.id.clone(),
            locations: vec![],
            genome: vec![],
            suffix_maps: vec![],
        };
        return Ok((sample.clone(), plan));
    }
    if boundaries.is_empty() {
        return Err(AttackError::NoBoundary(sample.id.clone()));
    }
    let mut context = sample.clone();
    let mut prepared: Vec<Snippet> = Vec::with_capacity(genome.len());
    for &id in genome {
        let original = pool.snippet(id)?;
        let snippet = if options.suffix {
            apply_suffixes(original, &context).map_err(|source| AttackError::Suffix {
                id: sample.id.clone(),
                snippet: id,
                source,
            })?
        } else {
            original.clone()
        };
        let report = validate_snippet(&snippet, &context);
        if !report.passed() {
            return Err(AttackError::Validation {
                id: sample.id.clone(),
                snippet: id,
                report,
            });
        }
        context.source.push('\n');
        context.source.push_str(&snippet.text());
        prepared.push(snippet);
    }
    let locations = choose_locations(&boundaries, genome.len(), options, seed, &sample.id);

    let lines: Vec<&str> = sample.source.split('\n').collect();
    let mut by_line: BTreeMap<usize, Vec<&Snippet>> = BTreeMap::new();
    for (loc, snip) in locations.iter().zip(&prepared) {
        by_line.entry(*loc).or_default().push(snip);
    }
    let mut out: Vec<String> =
        Vec::with_capacity(lines.len() + prepared.iter().map(Snippet::line_count).sum::<usize>());
    for (i, line) in lines.iter().enumerate() {
        out.push(line.to_string());
        if let Some(snips) = by_line.get(&i) {
            // Match the indentation of the following code line.
            let next = lines[i + 1..]
                .iter()
                .find(|l| !l.trim().is_empty())
                .copied()
                .unwrap_or(line);
            let indent = if next.trim_start().starts_with('}') {
                format!("{}    ", indentation_of(next))
            } else {
                indentation_of(next).to_string()
            };
            for s in snips {
                out.extend(s.lines.iter().map(|l| format!("{indent}{l}")));
            }
        }
    }
    let mut adversarial = CodeSample::new(sample.id.clone(), out.join("\n"), sample.label, sample.language);
    if !sample.tokens.is_empty() {
        adversarial.tokenize().map_err(|source| AttackError::Lex {
            id: sample.id.clone(),
            source,
        })?;
    }
    let plan = InsertionPlan {
        sample_id: sample.id.clone(),
        locations,
        genome: genome.to_vec(),
        suffix_maps: prepared.into_iter().map(|s| s.suffix_map).collect(),
    };
    Ok((adversarial, plan))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub sample_id: String,
    pub orig_prob: f64,
    pub adv_prob: f64,
    pub bypassed: bool,
    pub genome: Vec<SnippetId>,
    pub inserted_lines: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvadeOutcome {
    /// In sample-id order.
    pub results: Vec<AttackResult>,
    /// Cases the victim already considered non-vulnerable, with their probability.
    pub excluded: Vec<(String, f64)>,
    /// Cases that could not be evaluated.
    pub errors: Vec<(String, String)>,
}

/// Truncates `best` to `size` or pads it with unseen snippets from the
/// following ranked genomes, then from the pool in id order.
pub fn fit_genome(best: &[SnippetId], ranked: &[Vec<SnippetId>], pool: &AttackPool, size: usize) -> Vec<SnippetId> {
    let mut out: Vec<SnippetId> = Vec::with_capacity(size);
    let mut seen = BTreeSet::new();
    let candidates = best.iter().chain(ranked.iter().flatten()).copied().chain(pool.ids());
    for id in candidates {
        if out.len() == size {
            break;
        }
        if seen.insert(id) {
            out.push(id);
        }
    }
    out
}

fn exec_for(oracle: &dyn VictimOracle) -> Execution {
    match oracle.concurrency() {
        Concurrency::Serial => Execution::Sequential,
        Concurrency::Concurrent => Execution::default(),
    }
}

/// Inserts `genome` into every vulnerable case and queries the victim before
/// and after. Cases already scored below the threshold are excluded.
pub fn evade(
    oracle: &dyn VictimOracle,
    vuln_cases: &[CodeSample],
    genome: &[SnippetId],
    pool: &AttackPool,
    options: &InsertOptions,
    seed: u64,
    exec: Execution,
) -> EvadeOutcome {
    let exec = if exec_for(oracle) == Execution::Sequential {
        Execution::Sequential
    } else {
        exec
    };
    let inserted_lines: usize = genome
        .iter()
        .filter_map(|id| pool.get(*id))
        .map(Snippet::line_count)
        .sum();
    enum Case {
        Done(AttackResult),
        Excluded(f64),
        Failed(String),
    }
    let per_case = par::map(vuln_cases, exec, |case| {
        let orig = match oracle.predict(case) {
            Ok(p) => p,
            Err(e) => return Case::Failed(e.to_string()),
        };
        if orig < DECISION_THRESHOLD {
            return Case::Excluded(orig);
        }
        let adv = match insert(case, genome, pool, options, seed) {
            Ok((adv, _)) => adv,
            Err(e) => return Case::Failed(e.to_string()),
        };
        match oracle.predict(&adv) {
            Ok(p) => Case::Done(AttackResult {
                sample_id: case.id.clone(),
                orig_prob: orig,
                adv_prob: p,
                bypassed: p < DECISION_THRESHOLD,
                genome: genome.to_vec(),
                inserted_lines,
            }),
            Err(e) => Case::Failed(e.to_string()),
        }
    });
    let mut out = EvadeOutcome::default();
    for (case, r) in vuln_cases.iter().zip(per_case) {
        match r {
            Case::Done(r) => out.results.push(r),
            Case::Excluded(p) => out.excluded.push((case.id.clone(), p)),
            Case::Failed(m) => out.errors.push((case.id.clone(), m)),
        }
    }
    out.results.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    out.excluded.sort_by(|a, b| a.0.cmp(&b.0));
    out.errors.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Fraction of results that bypassed the victim.
pub fn compute_asr(results: &[AttackResult]) -> Result<f64, AttackError> {
    if results.is_empty() {
        return Err(AttackError::EmptyResults);
    }
    Ok(results.iter().filter(|r| r.bypassed).count() as f64 / results.len() as f64)
}

/// ASR over the `k` cases with the highest original probability (ties by id).
pub fn compute_topk(results: &[AttackResult], k: usize) -> Result<f64, AttackError> {
    if k < 1 || k > results.len() {
        return Err(AttackError::BadK { k, max: results.len() });
    }
    let mut ranked: Vec<&AttackResult> = results.iter().collect();
    ranked.sort_by(|a, b| {
        b.orig_prob
            .total_cmp(&a.orig_prob)
            .then_with(|| a.sample_id.cmp(&b.sample_id))
    });
    Ok(ranked[..k].iter().filter(|r| r.bypassed).count() as f64 / k as f64)
}

/// F1 on the vulnerable class at the decision threshold.
pub fn compute_f1(oracle: &dyn VictimOracle, clean_test: &[CodeSample]) -> Result<f64, AttackError> {
    let pos = clean_test.iter().filter(|s| s.label.is_vulnerable()).count();
    if pos == 0 || pos == clean_test.len() {
        return Err(AttackError::SingleClass);
    }
    let preds = par::map(clean_test, exec_for(oracle), |s| oracle.predict(s));
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (s, p) in clean_test.iter().zip(preds) {
        let flagged = p? >= DECISION_THRESHOLD;
        match (flagged, s.label.is_vulnerable()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub asr: f64,
    pub topk: BTreeMap<String, f64>,
    pub clean_f1: f64,
    pub snippet_size: usize,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub query_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method")]
pub enum Projection {
    /// Top two principal axes.
    Principal,
    /// Exact t-SNE; stochastic in the seed, slow beyond a few hundred points.
    Tsne {
        perplexity: f64,
        iterations: usize,
        seed: u64,
    },
}

fn center(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x / points.len() as f64;
        }
    }
    points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect()
}

/// Leading eigenvector of `cov` by power iteration from a fixed start,
/// with sign fixed so the largest-magnitude entry is positive.
fn leading_axis(cov: &[Vec<f64>]) -> Vec<f64> {
    let d = cov.len();
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 / d as f64).collect();
    for _ in 0..1000 {
        let mut next: Vec<f64> = cov
            .iter()
            .map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return vec![0.0; d];
        }
        next.iter_mut().for_each(|x| *x /= norm);
        let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = next;
        if delta < 1e-13 {
            break;
        }
    }
    let pivot = v
        .iter()
        .copied()
        .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

fn principal_2d(points: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let c = center(points);
    let d = c[0].len();
    let mut cov = vec![vec![0.0; d]; d];
    for p in &c {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += p[i] * p[j];
            }
        }
    }
    let a1 = leading_axis(&cov);
    let lambda1: f64 = cov
        .iter()
        .zip(&a1)
        .map(|(row, ai)| ai * row.iter().zip(&a1).map(|(x, y)| x * y).sum::<f64>())
        .sum();
    for i in 0..d {
        for j in 0..d {
            cov[i][j] -= lambda1 * a1[i] * a1[j];
        }
    }
    let a2 = leading_axis(&cov);
    let dot = |p: &[f64], a: &[f64]| p.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
    c.iter().map(|p| [dot(p, &a1), dot(p, &a2)]).collect()
}

fn tsne_2d(points: &[Vec<f64>], perplexity: f64, iterations: usize, seed: u64) -> Vec<[f64; 2]> {
    let n = points.len();
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let target = perplexity.clamp(1.0, (n - 1) as f64).ln();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        let d: Vec<f64> = (0..n).map(|j| dist2(&points[i], &points[j])).collect();
        let (mut lo, mut hi, mut beta) = (0.0, f64::INFINITY, 1.0);
        for _ in 0..64 {
            let mut sum = 0.0;
            let mut h = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let w = (-d[j] * beta).exp();
                p[i][j] = w;
                sum += w;
                h += d[j] * w;
            }
            let sum = sum.max(1e-300);
            let entropy = sum.ln() + beta * h / sum;
            p[i].iter_mut().for_each(|x| *x /= sum);
            if (entropy - target).abs() < 1e-6 {
                break;
            }
            if entropy > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    let mut pij = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            pij[i][j] = ((p[i][j] + p[j][i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.gen_range(-1e-2..1e-2), rng.gen_range(-1e-2..1e-2)])
        .collect();
    let mut vel = vec![[0.0; 2]; n];
    for it in 0..iterations {
        let exaggeration = if it < iterations / 4 { 4.0 } else { 1.0 };
        let momentum = if it < iterations / 4 { 0.5 } else { 0.8 };
        let mut num = vec![vec![0.0; n]; n];
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let q = 1.0 / (1.0 + (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2));
                    num[i][j] = q;
                    z += q;
                }
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in (0..n).filter(|&j| j != i) {
                let coef = 4.0 * (exaggeration * pij[i][j] - num[i][j] / z) * num[i][j];
                g[0] += coef * (y[i][0] - y[j][0]);
                g[1] += coef * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                vel[i][k] = momentum * vel[i][k] - 100.0 * g[k];
            }
        }
        for i in 0..n {
            y[i][0] += vel[i][0];
            y[i][1] += vel[i][1];
        }
    }
    y
}

/// Writes `x,y,label,adversarial` rows, one per representation.
pub fn export_projection(
    representations: &[Vec<f64>],
    labels: &[Label],
    adversarial: &[bool],
    path: &Path,
    method: Projection,
) -> Result<(), AttackError> {
    std::fs::write(path, projection_csv(representations, labels, adversarial, method)?)?;
    Ok(())
}

pub fn projection_csv(
    representations: &[Vec<f64>],
    labels: &[Label],
    adversarial: &[bool],
    method: Projection,
) -> Result<String, AttackError> {
    let n = representations.len();
    if labels.len() != n || adversarial.len() != n {
        return Err(AttackError::Misaligned(n, labels.len(), adversarial.len()));
    }
    if n < 3
        || representations
            .iter()
            .any(|r| r.is_empty() || r.len() != representations[0].len())
    {
        return Err(AttackError::TooFewPoints(n));
    }
    let xy = match method {
        Projection::Principal => principal_2d(representations),
        Projection::Tsne {
            perplexity,
            iterations,
            seed,
        } => tsne_2d(representations, perplexity, iterations, seed),
    };
    let mut out = String::from("x,y,label,adversarial\n");
    for ((p, label), adv) in xy.iter().zip(labels).zip(adversarial) {
        writeln!(out, "{},{},{},{}", p[0], p[1], label.as_str(), adv).unwrap();
    }
    Ok(out)
}
