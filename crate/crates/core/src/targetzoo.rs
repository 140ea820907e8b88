//! Black-box victim oracles: a bag-of-tokens reference victim, the surrogate
//! in self-attack mode, an HTTP client, its replay counterpart, and a query
//! budget wrapper.

use crate::corpus::{lexer, CodeSample, DatasetSplit, Vocabulary};
use crate::http::{self, HttpError, ReplayLog, RetryPolicy, Semaphore};
use crate::surrogate::tensor::sigmoid;
use crate::surrogate::SurrogateModel;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;
use thiserror::Error;

pub const VICTIM_URL_ENV: &str = "EVASION_VICTIM_URL";
pub const VICTIM_KEY_ENV: &str = "EVASION_VICTIM_KEY";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("retryable victim failure: {0}")]
    Retryable(String),
    #[error("victim protocol error: {0}")]
    Protocol(String),
    #[error("victim failure: {0}")]
    Failed(String),
    #[error("query budget of {0} exhausted")]
    BudgetExhausted(u64),
    #[error("no recorded prediction for input {0}")]
    MissingReplay(String),
    #[error("input {id} rejected: {message}")]
    Input { id: String, message: String },
}

impl From<HttpError> for OracleError {
    fn from(e: HttpError) -> Self {
        match e {
            HttpError::Retryable(m) => OracleError::Retryable(m),
            HttpError::Protocol(m) => OracleError::Protocol(m),
            HttpError::Fatal(m) => OracleError::Failed(m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Concurrency {
    Serial,
    Concurrent,
}

/// A deployed detector seen only through its predictions.
pub trait VictimOracle: Send + Sync {
    /// Probability that `sample` is vulnerable.
    fn predict(&self, sample: &CodeSample) -> Result<f64, OracleError>;
    /// Number of `predict` calls so far.
    fn query_count(&self) -> u64;
    fn concurrency(&self) -> Concurrency;
    fn name(&self) -> String;
}

impl<T: VictimOracle + ?Sized> VictimOracle for Arc<T> {
    fn predict(&self, sample: &CodeSample) -> Result<f64, OracleError> {
        (**self).predict(sample)
    }
    fn query_count(&self) -> u64 {
        (**self).query_count()
    }
    fn concurrency(&self) -> Concurrency {
        (**self).concurrency()
    }
    fn name(&self) -> String {
        (**self).name()
    }
}

fn lex_input(sample: &CodeSample) -> Result<Vec<String>, OracleError> {
    lexer::tokenize(&sample.source, sample.language).map_err(|e| OracleError::Input {
        id: sample.id.clone(),
        message: e.to_string(),
    })
}

/// Logistic model over token counts.
#[derive(Debug, Serialize, Deserialize)]
pub struct BagOfTokensVictim {
    weights: BTreeMap<String, f64>,
    bias: f64,
    #[serde(skip)]
    queries: AtomicU64,
}

impl Clone for BagOfTokensVictim {
    fn clone(&self) -> Self {
        BagOfTokensVictim {
            weights: self.weights.clone(),
            bias: self.bias,
            queries: AtomicU64::new(0),
        }
    }
}

impl PartialEq for BagOfTokensVictim {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights && self.bias == other.bias
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BowConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for BowConfig {
    fn default() -> Self {
        BowConfig {
            iterations: 300,
            learning_rate: 0.5,
            l2: 1e-3,
        }
    }
}

impl BagOfTokensVictim {
    /// Panics on non-finite weights.
    pub fn from_weights(weights: BTreeMap<String, f64>, bias: f64) -> Self {
        assert!(
            bias.is_finite() && weights.values().all(|w| w.is_finite()),
            "weights must be finite"
        );
        BagOfTokensVictim {
            weights,
            bias,
            queries: AtomicU64::new(0),
        }
    }

    pub fn weights(&self) -> &BTreeMap<String, f64> {
        &self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    /// Logit of a token sequence. Does not count as a query.
    pub fn score_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> f64 {
        self.bias + tokens.iter().filter_map(|t| self.weights.get(t.as_ref())).sum::<f64>()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("weights serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let v: BagOfTokensVictim = serde_json::from_str(text)?;
        if !(v.bias.is_finite() && v.weights.values().all(|w| w.is_finite())) {
            return Err(serde::de::Error::custom("weights must be finite"));
        }
        Ok(v)
    }
}

impl VictimOracle for BagOfTokensVictim {
    fn predict(&self, sample: &CodeSample) -> Result<f64, OracleError> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        let tokens = lex_input(sample)?;
        Ok(sigmoid(self.score_tokens(&tokens)))
    }

    fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Concurrent
    }

    fn name(&self) -> String {
        "bag-of-tokens".into()
    }
}

#[derive(Debug, Error)]
pub enum BowTrainError {
    #[error("training split must contain both classes")]
    SingleClass,
    #[error("sample {0}: {1}")]
    Lex(String, lexer::LexError),
}

/// Full-batch gradient descent on L2-regularized logistic loss over token
/// counts restricted to `vocab`. Fully deterministic.
pub fn train_bow_victim(
    split: &DatasetSplit,
    vocab: &Vocabulary,
    config: &BowConfig,
) -> Result<BagOfTokensVictim, BowTrainError> {
    let train = &split.train;
    if !(train.iter().any(|s| s.label.is_vulnerable()) && train.iter().any(|s| !s.label.is_vulnerable())) {
        return Err(BowTrainError::SingleClass);
    }
    let tokens: Vec<&str> = vocab.tokens().map(|(t, _)| t).collect();
    let index: HashMap<&str, usize> = tokens.iter().enumerate().map(|(i, t)| (*t, i)).collect();
    let rows: Vec<(Vec<(usize, f64)>, f64)> = train
        .iter()
        .map(|s| {
            let lexed;
            let toks = if s.tokens.is_empty() {
                lexed = lexer::tokenize(&s.source, s.language).map_err(|e| BowTrainError::Lex(s.id.clone(), e))?;
                &lexed
            } else {
                &s.tokens
            };
            let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
            for t in toks {
                if let Some(&i) = index.get(t.as_str()) {
                    *counts.entry(i).or_default() += 1.0;
                }
            }
            let y = if s.label.is_vulnerable() { 1.0 } else { 0.0 };
            Ok((counts.into_iter().collect(), y))
        })
        .collect::<Result<_, BowTrainError>>()?;

    let n = rows.len() as f64;
    let mut w = vec![0.0; tokens.len()];
    let mut b = 0.0;
    for _ in 0..config.iterations {
        let mut gw: Vec<f64> = w.iter().map(|wi| config.l2 * wi).collect();
        let mut gb = 0.0;
        for (x, y) in &rows {
            let z = b + x.iter().map(|&(i, c)| w[i] * c).sum::<f64>();
            let r = (sigmoid(z) - y) / n;
            gb += r;
            for &(i, c) in x {
                gw[i] += r * c;
            }
        }
        b -= config.learning_rate * gb;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= config.learning_rate * g;
        }
    }
    let weights = tokens
        .iter()
        .zip(&w)
        .filter(|(_, &wi)| wi != 0.0)
        .map(|(t, &wi)| (t.to_string(), wi))
        .collect();
    Ok(BagOfTokensVictim::from_weights(weights, b))
}

/// The attacker's own surrogate queried as if it were the victim.
pub struct SurrogateVictim {
    model: SurrogateModel,
    queries: AtomicU64,
}

pub fn surrogate_as_victim(model: SurrogateModel) -> SurrogateVictim {
    SurrogateVictim {
        model,
        queries: AtomicU64::new(0),
    }
}

impl VictimOracle for SurrogateVictim {
    fn predict(&self, sample: &CodeSample) -> Result<f64, OracleError> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        self.model.predict_proba(sample).map_err(|e| OracleError::Input {
            id: sample.id.clone(),
            message: e.to_string(),
        })
    }

    fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Concurrent
    }

    fn name(&self) -> String {
        "surrogate".into()
    }
}

fn input_key(source: &str, language: &str) -> String {
    let mut h = Sha256::new();
    h.update(language.as_bytes());
    h.update([0]);
    h.update(source.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Serialize, Deserialize)]
struct VictimExchange {
    input_hash: String,
    language: String,
    source: String,
    probability: f64,
}

fn check_probability(p: f64) -> Result<f64, OracleError> {
    if p.is_finite() && (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(OracleError::Protocol(format!("probability {p} outside [0, 1]")))
    }
}

/// HTTP victim: POST `{source, language}`, expect `{probability}`.
pub struct RemoteVictim {
    url: String,
    key: Option<String>,
    agent: ureq::Agent,
    policy: RetryPolicy,
    limiter: Semaphore,
    log: Option<ReplayLog>,
    queries: AtomicU64,
}

pub fn remote_victim(url: impl Into<String>, timeout: Duration, auth: Option<String>) -> RemoteVictim {
    RemoteVictim {
        url: url.into(),
        key: auth,
        agent: http::agent(timeout),
        policy: RetryPolicy::default(),
        limiter: Semaphore::new(4),
        log: None,
        queries: AtomicU64::new(0),
    }
}

impl RemoteVictim {
    pub fn from_env(timeout: Duration) -> Result<Self, OracleError> {
        let url =
            std::env::var(VICTIM_URL_ENV).map_err(|_| OracleError::Failed(format!("{VICTIM_URL_ENV} is not set")))?;
        Ok(remote_victim(url, timeout, std::env::var(VICTIM_KEY_ENV).ok()))
    }

    pub fn with_backoff(mut self, max_attempts: u32, base: Duration) -> Self {
        self.policy = RetryPolicy {
            max_attempts,
            base_backoff: base,
        };
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.limiter = Semaphore::new(n);
        self
    }

    pub fn recording_to(mut self, path: &Path) -> std::io::Result<Self> {
        self.log = Some(ReplayLog::append_to(path)?);
        Ok(self)
    }
}

impl VictimOracle for RemoteVictim {
    fn predict(&self, sample: &CodeSample) -> Result<f64, OracleError> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        let language = sample.language.as_str();
        let body = json!({ "source": sample.source, "language": language });
        let value = {
            let _permit = self.limiter.acquire();
            http::with_retries(&self.policy, || {
                http::post_json(&self.agent, &self.url, self.key.as_deref(), &body)
            })?
        };
        let p = value
            .get("probability")
            .and_then(|p| p.as_f64())
            .ok_or_else(|| OracleError::Protocol(format!("response has no numeric \"probability\": {value}")))?;
        let p = check_probability(p)?;
        if let Some(log) = &self.log {
            log.record(&VictimExchange {
                input_hash: input_key(&sample.source, language),
                language: language.to_string(),
                source: sample.source.clone(),
                probability: p,
            })
            .map_err(|e| OracleError::Failed(format!("replay log: {e}")))?;
        }
        Ok(p)
    }

    fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Concurrent
    }

    fn name(&self) -> String {
        "remote".into()
    }
}

/// Answers from a remote victim's replay log.
pub struct ReplayVictim {
    by_input: HashMap<String, f64>,
    queries: AtomicU64,
}

impl ReplayVictim {
    pub fn load(path: &Path) -> Result<Self, OracleError> {
        let text = std::fs::read_to_string(path).map_err(|e| OracleError::Failed(e.to_string()))?;
        let mut by_input = HashMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let ex: VictimExchange = serde_json::from_str(line)
                .map_err(|e| OracleError::Protocol(format!("replay log line {}: {e}", i + 1)))?;
            by_input.insert(ex.input_hash, check_probability(ex.probability)?);
        }
        Ok(ReplayVictim {
            by_input,
            queries: AtomicU64::new(0),
        })
    }
}

impl VictimOracle for ReplayVictim {
    fn predict(&self, sample: &CodeSample) -> Result<f64, OracleError> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        let key = input_key(&sample.source, sample.language.as_str());
        self.by_input.get(&key).copied().ok_or(OracleError::MissingReplay(key))
    }

    fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Concurrent
    }

    fn name(&self) -> String {
        "remote".into()
    }
}

/// Refuses every query past the first `budget`.
pub struct BudgetedOracle {
    inner: Arc<dyn VictimOracle>,
    budget: u64,
    issued: AtomicU64,
}

impl BudgetedOracle {
    pub fn new(inner: Arc<dyn VictimOracle>, budget: u64) -> Self {
        BudgetedOracle {
            inner,
            budget,
            issued: AtomicU64::new(0),
        }
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn remaining(&self) -> u64 {
        self.budget.saturating_sub(self.issued.load(Ordering::SeqCst))
    }
}

impl VictimOracle for BudgetedOracle {
    fn predict(&self, sample: &CodeSample) -> Result<f64, OracleError> {
        let n = self.issued.fetch_add(1, Ordering::SeqCst);
        if n >= self.budget {
            self.issued.fetch_sub(1, Ordering::SeqCst);
            return Err(OracleError::BudgetExhausted(self.budget));
        }
        self.inner.predict(sample)
    }

    fn query_count(&self) -> u64 {
        self.inner.query_count()
    }

    fn concurrency(&self) -> Concurrency {
        self.inner.concurrency()
    }

    fn name(&self) -> String {
        self.inner.name()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, split, Label, Language, DEFAULT_FRACTIONS};
    use crate::synth;

    fn sample(src: &str) -> CodeSample {
        CodeSample::new("x", src, Label::Vulnerable, Language::C)
    }

    #[test]
    fn logistic_over_counts() {
        let v = BagOfTokensVictim::from_weights([("gets".to_string(), 2.0), ("static".to_string(), -1.0)].into(), -0.5);
        let p = v.predict(&sample("gets(b); gets(b); static int q;")).unwrap();
        assert!((p - sigmoid(-0.5 + 4.0 - 1.0)).abs() < 1e-15);
        assert_eq!(v.query_count(), 1);
    }

    #[test]
    fn negative_token_lowers_probability() {
        let v = BagOfTokensVictim::from_weights([("gets".to_string(), 0.5), ("static".to_string(), -0.3)].into(), 0.0);
        let before = v.predict(&sample("void f() { gets(b); }")).unwrap();
        let after = v.predict(&sample("void f() { static int q; gets(b); }")).unwrap();
        assert!(after < before);
    }

    #[test]
    fn trained_victim_separates_synthetic_corpus() {
        let samples = synth::benchmark_corpus(40, 5);
        let s = split(&samples, 5, DEFAULT_FRACTIONS).unwrap();
        let vocab = build_vocab(&s.train, 1);
        let v = train_bow_victim(&s, &vocab, &BowConfig::default()).unwrap();
        let correct = s
            .train
            .iter()
            .filter(|x| (v.predict(x).unwrap() >= 0.5) == x.label.is_vulnerable())
            .count();
        assert!(
            correct as f64 >= 0.95 * s.train.len() as f64,
            "{correct}/{}",
            s.train.len()
        );

        let zero = train_bow_victim(
            &s,
            &vocab,
            &BowConfig {
                iterations: 0,
                ..BowConfig::default()
            },
        )
        .unwrap();
        assert!(s.test.iter().all(|x| zero.predict(x).unwrap() == 0.5));
    }

    #[test]
    fn single_class_training_rejected() {
        let samples: Vec<CodeSample> = synth::benchmark_corpus(10, 1)
            .into_iter()
            .filter(|s| s.label.is_vulnerable())
            .collect();
        let s = DatasetSplit {
            train: samples.clone(),
            eval: vec![],
            test: vec![],
            fractions: DEFAULT_FRACTIONS,
            seed: 0,
        };
        let vocab = build_vocab(&samples, 1);
        assert!(matches!(
            train_bow_victim(&s, &vocab, &BowConfig::default()),
            Err(BowTrainError::SingleClass)
        ));
    }

    #[test]
    fn budget_is_exact() {
        let inner: Arc<dyn VictimOracle> = Arc::new(BagOfTokensVictim::from_weights(BTreeMap::new(), 0.0));
        let b = BudgetedOracle::new(inner, 3);
        let x = sample("int a;");
        for _ in 0..3 {
            assert_eq!(b.predict(&x).unwrap(), 0.5);
        }
        assert_eq!(b.predict(&x), Err(OracleError::BudgetExhausted(3)));
        assert_eq!(b.query_count(), 3);
        assert_eq!(b.remaining(), 0);
    }

    #[test]
    fn json_round_trip() {
        let (w, bias) = synth::benchmark_victim_weights();
        let v = BagOfTokensVictim::from_weights(w, bias);
        assert_eq!(BagOfTokensVictim::from_json(&v.to_json()).unwrap(), v);
        assert!(BagOfTokensVictim::from_json("{\"weights\": {}, \"bias\": 1e999}").is_err());
    }
}
