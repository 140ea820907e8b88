//! One function per subcommand. Each reads its upstream artifacts from the
//! workspace, writes its own and a manifest, and returns a one-line summary.

use crate::artifacts::*;
use crate::config::{GeneratorKind, RunConfig, VictimKind, BUNDLED};
use anyhow::{bail, Context, Result};
use evasion_core::attack::{
    self, compute_asr, compute_f1, compute_topk, evade, fit_genome, insert, EvadeOutcome, MetricsReport,
};
use evasion_core::corpus::{self, build_vocab, tokenize_all, CodeSample, DatasetSplit, LabelCounts, Vocabulary};
use evasion_core::featureid::{rank_features, ImportantFeature};
use evasion_core::fga::{run_fga, FgaOutcome, Individual, StopReason};
use evasion_core::par::{self, Execution};
use evasion_core::pool::{generate_candidates, AttackPool, Candidate, PopulateReport, SnippetId};
use evasion_core::snippetgen::{GeneratorClient, OfflineGenerator, RemoteGenerator, ReplayGenerator};
use evasion_core::surrogate::{train, SurrogateModel};
use evasion_core::svmcore::{encode_labels, important_samples, train_svm};
use evasion_core::targetzoo::{
    surrogate_as_victim, train_bow_victim, BagOfTokensVictim, RemoteVictim, ReplayVictim, VictimOracle,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Duration;

/// Synthetic benchmark corpus shipped with the binary.
pub const BUNDLED_DATASET: &str = include_str!("../data/benchmark.jsonl");
/// Reference bag-of-tokens victim for the bundled corpus.
pub const BUNDLED_VICTIM: &str = include_str!("../data/victim.json");

/// Runs one subcommand.
pub fn run_stage(stage: Stage, config: &RunConfig, ws: &mut Workspace) -> Result<String> {
    match stage {
        Stage::Ingest => ingest(config, ws),
        Stage::TrainSurrogate => train_surrogate(config, ws),
        Stage::ExtractFeatures => extract_features(config, ws),
        Stage::GenSnippets => gen_snippets(config, ws),
        Stage::BuildPool => build_pool(config, ws),
        Stage::RunFga => fga(config, ws),
        Stage::Attack => attack_stage(config, ws),
        Stage::Report => report(config, ws),
        Stage::Project => project(config, ws),
    }
}

/// Every stage in order.
pub fn run_pipeline(config: &RunConfig, ws: &mut Workspace) -> Result<Vec<String>> {
    Stage::ALL
        .iter()
        .map(|s| run_stage(*s, config, ws).with_context(|| format!("stage {s}")))
        .collect()
}

fn load_split(ws: &Workspace) -> Result<DatasetSplit> {
    Ok(ws.read_stamped::<DatasetSplit>(SPLIT, Stage::Ingest)?.data)
}

fn load_vocab(ws: &Workspace) -> Result<Vocabulary> {
    Ok(ws.read_stamped::<Vocabulary>(VOCAB, Stage::Ingest)?.data)
}

fn load_surrogate(ws: &Workspace) -> Result<SurrogateModel> {
    let vocab = load_vocab(ws)?;
    let ckpt = ws
        .read_stamped::<serde_json::Value>(SURROGATE, Stage::TrainSurrogate)?
        .data;
    Ok(SurrogateModel::from_checkpoint_json(&ckpt.to_string(), vocab)?)
}

fn load_pool(ws: &Workspace) -> Result<AttackPool> {
    Ok(AttackPool::from_jsonl(&ws.read(POOL, Stage::BuildPool)?)?)
}

pub fn ingest(config: &RunConfig, ws: &mut Workspace) -> Result<String> {
    config.validate_dataset()?;
    let mut samples = if config.dataset.path == BUNDLED {
        corpus::parse_dataset(BUNDLED_DATASET)?
    } else {
        corpus::load_dataset(config.dataset.path.as_ref())?
    };
    tokenize_all(&mut samples)?;
    let split = corpus::split(&samples, config.seeds.split, config.dataset.fractions)?;
    let vocab = build_vocab(&split.train, config.dataset.min_doc_freq);
    let counts = LabelCounts::of(&samples);
    ws.write_stamped(SPLIT, config, &split)?;
    ws.write_stamped(VOCAB, config, &vocab)?;
    ws.finish(Stage::Ingest, config)?;
    Ok(format!(
        "{} samples ({} vulnerable), split {}/{}/{}, vocabulary {}",
        counts.total(),
        counts.vulnerable,
        split.train.len(),
        split.eval.len(),
        split.test.len(),
        vocab.len()
    ))
}

pub fn train_surrogate(config: &RunConfig, ws: &mut Workspace) -> Result<String> {
    let split = load_split(ws)?;
    let vocab = load_vocab(ws)?;
    let sc = config.surrogate_config();
    sc.validate()?;
    let model = train(&split, &vocab, &sc)?;
    let ckpt: serde_json::Value = serde_json::from_str(&model.to_checkpoint_json())?;
    ws.write_stamped(SURROGATE, config, &ckpt)?;
    ws.finish(Stage::TrainSurrogate, config)?;
    let correct = split
        .eval
        .iter()
        .filter(|s| {
            model
                .predict_proba(s)
                .map(|p| (p >= 0.5) == s.label.is_vulnerable())
                .unwrap_or(false)
        })
        .count();
    Ok(format!(
        "trained {} epochs, final eval loss {:.4}, eval accuracy {}/{}",
        sc.epochs,
        model.eval_losses().last().copied().unwrap_or(f64::NAN),
        correct,
        split.eval.len()
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureArtifact {
    pub support_vectors: usize,
    /// `(sample id, dual coefficient)` of the non-vulnerable support vectors.
    pub important: Vec<(String, f64)>,
    pub features: Vec<ImportantFeature>,
}

pub fn extract_features(config: &RunConfig, ws: &mut Workspace) -> Result<String> {
    config.validate_features()?;
    let split = load_split(ws)?;
    let model = load_surrogate(ws)?;
    let reps = par::map(&split.train, Execution::default(), |s| model.final_representation(s));
    let reps: Vec<Vec<f64>> = reps.into_iter().collect::<Result<_, _>>()?;
    let svm = train_svm(&reps, &encode_labels(&split.train), &config.svm_config())?;
    let important = important_samples(&svm, &split.train, &reps)?;
    let features = rank_features(
        &model,
        &important,
        &split.train,
        config.features.top_n,
        config.features.min_doc_freq,
    )?;
    if features.is_empty() {
        bail!("no token passed the feature filters");
    }
    let artifact = FeatureArtifact {
        support_vectors: svm.support_indices.len(),
        important: important.members.iter().map(|m| (m.id.clone(), m.alpha)).collect(),
        features,
    };
    ws.write_stamped(FEATURES, config, &artifact)?;
    ws.finish(Stage::ExtractFeatures, config)?;
    let tokens: Vec<&str> = artifact.features.iter().map(|f| f.token.as_str()).collect();
    Ok(format!(
        "{} important samples of {} support vectors; features {}",
        artifact.important.len(),
        artifact.support_vectors,
        tokens.join(" ")
    ))
}

/// Vulnerable training functions, drawn with the sampling seed.
fn prompt_hosts(config: &RunConfig, split: &DatasetSplit) -> Vec<CodeSample> {
    let mut hosts: Vec<CodeSample> = split
        .train
        .iter()
        .filter(|s| s.label.is_vulnerable())
        .cloned()
        .collect();
    hosts.sort_by(|a, b| a.id.cmp(&b.id));
    hosts.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seeds.sampling));
    hosts.truncate(config.generator.hosts);
    hosts
}

fn generator(config: &RunConfig) -> Result<Box<dyn GeneratorClient>> {
    let g = &config.generator;
    Ok(match g.kind {
        GeneratorKind::Offline => Box::new(OfflineGenerator),
        GeneratorKind::Remote => match &g.replay {
            Some(p) => Box::new(ReplayGenerator::load(p)?),
            None => {
                let url = std::env::var(evasion_core::snippetgen::GEN_URL_ENV)
                    .with_context(|| format!("remote generator needs {}", evasion_core::snippetgen::GEN_URL_ENV))?;
                let key = std::env::var(evasion_core::snippetgen::GEN_KEY_ENV).ok();
                let mut client = RemoteGenerator::new(url, key, Duration::from_secs(g.timeout_secs), g.max_in_flight);
                if let Some(p) = &g.record {
                    client = client.recording_to(p)?;
                }
                Box::new(client)
            }
        },
    })
}

pub fn gen_snippets(config: &RunConfig, ws: &mut Workspace) -> Result<String> {
    config.validate_generator()?;
    let split = load_split(ws)?;
    let features = ws
        .read_stamped::<FeatureArtifact>(FEATURES, Stage::ExtractFeatures)?
        .data
        .features;
    let hosts = prompt_hosts(config, &split);
    if hosts.is_empty() {
        bail!("the training split has no vulnerable functions to host snippets");
    }
    let client = generator(config)?;
    let candidates = generate_candidates(
        client.as_ref(),
        &features,
        &hosts,
        &config.populate_config(),
        Execution::default(),
    );
    let text: String = candidates
        .iter()
        .map(|c| serde_json::to_string(c).unwrap() + "\n")
        .collect();
    ws.write(CANDIDATES, &text)?;
    ws.finish(Stage::GenSnippets, config)?;
    let ok = candidates.iter().filter(|c| c.result.is_ok()).count();
    Ok(format!(
        "{} prompts over {} hosts, {} snippets generated",
        candidates.len(),
        hosts.len(),
        ok
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolArtifact {
    pub size: usize,
    pub base: usize,
    pub report: PopulateReport,
}

pub fn build_pool(config: &RunConfig, ws: &mut Workspace) -> Result<String> {
    config.validate_pool()?;
    let split = load_split(ws)?;
    let mut pool = match &config.pool.path {
        Some(p) => AttackPool::load(p)?,
        None => AttackPool::new(),
    };
    let base = pool.len();
    let candidates: Vec<Candidate> = if config.pool.path.is_some() && !ws.exists(CANDIDATES) {
        Vec::new()
    } else {
        ws.read(CANDIDATES, Stage::GenSnippets)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()
            .context("parsing candidates")?
    };
    let report = pool.admit(&candidates, &split.train);
    if pool.is_empty() {
        bail!("no snippet survived validation; the pool is empty");
    }
    ws.write(POOL, &pool.to_jsonl())?;
    let artifact = PoolArtifact {
        size: pool.len(),
        base,
        report,
    };
    ws.write_stamped(POOL_REPORT, config, &artifact)?;
    ws.finish(Stage::BuildPool, config)?;
    Ok(format!(
        "pool of {} snippets ({} added, {} duplicates, {} rejected)",
        artifact.size,
        artifact.report.added.len(),
        artifact.report.duplicates,
        artifact.report.rejected.len()
    ))
}

/// The victim named by the config.
pub fn victim(config: &RunConfig, ws: &Workspace) -> Result<Box<dyn VictimOracle>> {
    config.validate_victim()?;
    let v = &config.victim;
    Ok(match v.kind {
        VictimKind::Bow => Box::new(match v.weights.as_str() {
            BUNDLED => BagOfTokensVictim::from_json(BUNDLED_VICTIM)?,
            "train" => train_bow_victim(&load_split(ws)?, &load_vocab(ws)?, &v.bow)?,
            path => BagOfTokensVictim::from_json(
                &std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?,
            )?,
        }),
        VictimKind::SelfModel => Box::new(surrogate_as_victim(load_surrogate(ws)?)),
        VictimKind::Remote => match &v.replay {
            Some(p) => Box::new(ReplayVictim::load(p)?),
            None => {
                let mut r =
                    RemoteVictim::from_env(Duration::from_secs(v.timeout_secs))?.with_max_in_flight(v.max_in_flight);
                if let Some(p) = &v.record {
                    r = r.recording_to(p)?;
                }
                Box::new(r)
            }
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FgaArtifact {
    pub victim: String,
    pub group: Vec<String>,
    pub stop: StopReason,
    pub queries_used: u64,
    pub generations: usize,
    pub population: Vec<Individual>,
}

pub fn fga(config: &RunConfig, ws: &mut Workspace) -> Result<String> {
    config.validate_fga()?;
    let split = load_split(ws)?;
    let pool = load_pool(ws)?;
    let oracle = victim(config, ws)?;
    // Only cases the victim currently flags can be flipped.
    let mut group = Vec::new();
    for s in split.test.iter().filter(|s| s.label.is_vulnerable()) {
        if oracle.predict(s)? >= attack::DECISION_THRESHOLD {
            group.push(s.clone());
        }
    }
    group.sort_by(|a, b| a.id.cmp(&b.id));
    group.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seeds.sampling));
    if let Some(n) = config.fga.group_size {
        group.truncate(n);
    }
    if group.is_empty() {
        bail!("the victim flags no vulnerable test function; nothing to optimize against");
    }
    let outcome: FgaOutcome = run_fga(&config.fga_config(), &pool, &group, oracle.as_ref())?;
    ws.write(GENERATION_LOG, &outcome.log_jsonl())?;
    let artifact = FgaArtifact {
        victim: oracle.name(),
        group: group.iter().map(|s| s.id.clone()).collect(),
        stop: outcome.stop,
        queries_used: outcome.queries_used,
        generations: outcome.log.len(),
        population: outcome.population,
    };
    ws.write_stamped(FGA_RESULT, config, &artifact)?;
    ws.finish(Stage::RunFga, config)?;
    let best = match artifact.population.first() {
        Some(b) => {
            let ids: Vec<String> = b.genome.iter().map(|id| id.to_string()).collect();
            format!("[{}] scoring {:.4}", ids.join(", "), b.score)
        }
        None => "none".to_string(),
    };
    Ok(format!(
        "{:?} after {} generations, {} queries; best {best}",
        artifact.stop, artifact.generations, artifact.queries_used
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackArtifact {
    pub victim: String,
    pub genome: Vec<SnippetId>,
    pub snippets: Vec<String>,
    pub clean_f1_before: f64,
    pub clean_f1_after: f64,
    pub outcome: EvadeOutcome,
}

pub fn attack_stage(config: &RunConfig, ws: &mut Workspace) -> Result<String> {
    config.validate_attack()?;
    if !ws.exists(FGA_RESULT) || !ws.exists(GENERATION_LOG) || !ws.exists(POOL) {
        let producer = if ws.exists(POOL) {
            Stage::RunFga
        } else {
            Stage::BuildPool
        };
        bail!(
            "attack requires generation log / pool in {}: run `{producer}` first",
            ws.root().display()
        );
    }
    let split = load_split(ws)?;
    let pool = load_pool(ws)?;
    let fga = ws.read_stamped::<FgaArtifact>(FGA_RESULT, Stage::RunFga)?.data;
    let ranked: Vec<Vec<SnippetId>> = fga
        .population
        .iter()
        .filter(|i| i.is_valid())
        .map(|i| i.genome.clone())
        .collect();
    let best = ranked.first().cloned().unwrap_or_default();
    let genome = fit_genome(&best, &ranked, &pool, config.attack.snippet_size);

    let oracle = victim(config, ws)?;
    let f1_before = compute_f1(oracle.as_ref(), &split.test)?;
    let cases: Vec<CodeSample> = split.test.iter().filter(|s| s.label.is_vulnerable()).cloned().collect();
    let options = config.insert_options();
    let q0 = oracle.query_count();
    let outcome = evade(
        oracle.as_ref(),
        &cases,
        &genome,
        &pool,
        &options,
        config.seeds.location,
        Execution::default(),
    );
    let queries = oracle.query_count() - q0;
    let f1_after = compute_f1(oracle.as_ref(), &split.test)?;
    if f1_before.to_bits() != f1_after.to_bits() {
        bail!("clean F1 changed during the campaign: {f1_before} -> {f1_after}");
    }
    if !outcome.errors.is_empty() {
        bail!("{} cases failed, first: {:?}", outcome.errors.len(), outcome.errors[0]);
    }
    let asr = compute_asr(&outcome.results)?;
    let mut topk = BTreeMap::new();
    for &k in &config.attack.topk {
        if k <= outcome.results.len() {
            topk.insert(k.to_string(), compute_topk(&outcome.results, k)?);
        }
    }
    let metrics = MetricsReport {
        asr,
        topk,
        clean_f1: f1_before,
        snippet_size: genome.len(),
        config_hash: config.hash(),
        seeds: config.seed_map(),
        query_count: queries,
    };

    let by_id: BTreeMap<&str, &CodeSample> = cases.iter().map(|c| (c.id.as_str(), c)).collect();
    let mut adversarial = Vec::with_capacity(outcome.results.len());
    for r in &outcome.results {
        let (adv, _) = insert(
            by_id[r.sample_id.as_str()],
            &genome,
            &pool,
            &options,
            config.seeds.location,
        )?;
        adversarial.push(adv);
    }
    let artifact = AttackArtifact {
        victim: oracle.name(),
        snippets: genome
            .iter()
            .map(|id| pool.get(*id).map(|s| s.text()).unwrap_or_default())
            .collect(),
        genome,
        clean_f1_before: f1_before,
        clean_f1_after: f1_after,
        outcome,
    };
    ws.write(METRICS, &(serde_json::to_string_pretty(&metrics)? + "\n"))?;
    ws.write_stamped(ATTACK_RESULTS, config, &artifact)?;
    ws.write(ADVERSARIAL, &corpus::write_dataset(&adversarial))?;
    ws.finish(Stage::Attack, config)?;
    Ok(format!(
        "ASR {:.3} over {} cases ({} excluded) with {} snippets; clean F1 {:.4}",
        metrics.asr,
        artifact.outcome.results.len(),
        artifact.outcome.excluded.len(),
        metrics.snippet_size,
        metrics.clean_f1
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub samples: usize,
    pub split: [usize; 3],
    pub features: Vec<String>,
    pub pool_size: usize,
    pub fga: FgaSummary,
    pub genome: Vec<SnippetId>,
    pub metrics: MetricsReport,
    /// Stage name to its artifacts and their SHA-256.
    pub artifacts: BTreeMap<String, BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FgaSummary {
    pub stop: StopReason,
    pub generations: usize,
    pub queries_used: u64,
    pub best_score: Option<f64>,
}

pub fn report(config: &RunConfig, ws: &mut Workspace) -> Result<String> {
    let hash = config.hash();
    let manifests = ws.check_consistent(&hash)?;
    let split = load_split(ws)?;
    let features = ws
        .read_stamped::<FeatureArtifact>(FEATURES, Stage::ExtractFeatures)?
        .data;
    let pool = ws.read_stamped::<PoolArtifact>(POOL_REPORT, Stage::BuildPool)?.data;
    let fga = ws.read_stamped::<FgaArtifact>(FGA_RESULT, Stage::RunFga)?.data;
    let attack = ws.read_stamped::<AttackArtifact>(ATTACK_RESULTS, Stage::Attack)?.data;
    let metrics: MetricsReport = serde_json::from_str(&ws.read(METRICS, Stage::Attack)?)?;
    let doc = CampaignReport {
        config_hash: hash,
        seeds: config.seed_map(),
        samples: split.len(),
        split: [split.train.len(), split.eval.len(), split.test.len()],
        features: features.features.iter().map(|f| f.token.clone()).collect(),
        pool_size: pool.size,
        fga: FgaSummary {
            stop: fga.stop,
            generations: fga.generations,
            queries_used: fga.queries_used,
            best_score: fga.population.first().filter(|i| i.is_valid()).map(|i| i.score),
        },
        genome: attack.genome,
        metrics,
        artifacts: manifests
            .into_iter()
            .filter(|m| m.stage != Stage::Report)
            .map(|m| (m.stage.name().to_string(), m.artifacts))
            .collect(),
    };
    ws.write(REPORT, &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    ws.finish(Stage::Report, config)?;
    Ok(format!(
        "report over {} stages, ASR {:.3}",
        doc.artifacts.len(),
        doc.metrics.asr
    ))
}

pub fn project(config: &RunConfig, ws: &mut Workspace) -> Result<String> {
    config.validate_projection()?;
    let split = load_split(ws)?;
    let model = load_surrogate(ws)?;
    let mut adversarial = corpus::parse_dataset(&ws.read(ADVERSARIAL, Stage::Attack)?)?;
    tokenize_all(&mut adversarial)?;
    let points: Vec<&CodeSample> = split.test.iter().chain(&adversarial).collect();
    let reps = par::map(&points, Execution::default(), |s| model.final_representation(s));
    let reps: Vec<Vec<f64>> = reps.into_iter().collect::<Result<_, _>>()?;
    let labels: Vec<_> = points.iter().map(|s| s.label).collect();
    let flags: Vec<bool> = (0..points.len()).map(|i| i >= split.test.len()).collect();
    let csv = attack::projection_csv(&reps, &labels, &flags, config.projection())?;
    ws.write(PROJECTION, &csv)?;
    ws.finish(Stage::Project, config)?;
    Ok(format!(
        "{} clean and {} adversarial points projected",
        split.test.len(),
        adversarial.len()
    ))
}
