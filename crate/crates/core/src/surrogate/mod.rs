//! Attacker-side surrogate classifier: a BiLSTM with self-attention.
//!
//! The model exposes three views of an input: the vulnerable-class
//! probability, per-token attention weights, and the pooled representation
//! that feeds the classifier head (used downstream by the SVM).

pub mod network;
pub mod tensor;

use crate::corpus::{CodeSample, DatasetSplit, Label, Vocabulary};
use network::{Dims, Forward, Params};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("training set must contain both classes")]
    SingleClass,
    #[error("sample {0:?} has no tokens")]
    EmptyInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch} on sample {sample:?}")]
    NonFiniteLoss { epoch: usize, sample: String },
    #[error("checkpoint vocabulary hash {found} does not match supplied vocabulary {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Query/key width, `d_k` in the attention scaling.
    pub key_dim: usize,
    /// Value width; also the width of the final representation.
    pub value_dim: usize,
    pub max_seq_len: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip applied per mini-batch; `None` disables it.
    pub clip_norm: Option<f64>,
    pub optimizer: Optimizer,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

/// First and second moment estimates for Adam.
struct AdamState {
    m: Params,
    v: Params,
    step: i32,
}

impl AdamState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(p: &Params) -> Self {
        AdamState {
            m: p.zeros_like(),
            v: p.zeros_like(),
            step: 0,
        }
    }

    fn apply(&mut self, params: &mut Params, grad: &Params, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for (((_, p), (_, g)), ((_, m), (_, v))) in tensors {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = Self::BETA1 * m.data[i] + (1.0 - Self::BETA1) * gi;
                v.data[i] = Self::BETA2 * v.data[i] + (1.0 - Self::BETA2) * gi * gi;
                p.data[i] -= lr * (m.data[i] / c1) / ((v.data[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            embed_dim: 32,
            hidden_dim: 32,
            key_dim: 32,
            value_dim: 32,
            max_seq_len: 512,
            epochs: 20,
            learning_rate: 0.01,
            batch_size: 8,
            clip_norm: Some(5.0),
            optimizer: Optimizer::Adam,
            seed: 0,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<(), SurrogateError> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("key_dim", self.key_dim),
            ("value_dim", self.value_dim),
            ("max_seq_len", self.max_seq_len),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(SurrogateError::Config(format!("{name} must be at least 1")));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(SurrogateError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Per-token attention weights for one (possibly truncated) input.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionMap {
    pub tokens: Vec<String>,
    pub weights: Vec<f64>,
}

impl AttentionMap {
    /// Tokens ordered by descending weight, ties by position.
    pub fn ranked(&self) -> Vec<(&str, f64)> {
        let mut idx: Vec<usize> = (0..self.tokens.len()).collect();
        idx.sort_by(|&a, &b| self.weights[b].total_cmp(&self.weights[a]).then(a.cmp(&b)));
        idx.into_iter()
            .map(|i| (self.tokens[i].as_str(), self.weights[i]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    config: SurrogateConfig,
    vocab: Vocabulary,
    params: Params,
    eval_losses: Vec<f64>,
}

fn class_index(label: Label) -> usize {
    usize::from(label.is_vulnerable())
}

impl SurrogateModel {
    /// Fresh model at its seeded initialisation.
    pub fn initialize(vocab: Vocabulary, config: SurrogateConfig) -> Result<Self, SurrogateError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = Params::init(
            Dims {
                vocab: vocab.len(),
                embed: config.embed_dim,
                hidden: config.hidden_dim,
                key: config.key_dim,
                value: config.value_dim,
            },
            &mut rng,
        );
        Ok(SurrogateModel {
            config,
            vocab,
            params,
            eval_losses: Vec::new(),
        })
    }

    pub fn config(&self) -> &SurrogateConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Mean eval-set loss after each epoch (empty when the eval split is empty).
    pub fn eval_losses(&self) -> &[f64] {
        &self.eval_losses
    }

    fn truncated<'a>(&self, tokens: &'a [String]) -> &'a [String] {
        &tokens[..tokens.len().min(self.config.max_seq_len)]
    }

    /// Vocabulary indices of the (truncated) token sequence.
    pub fn encode(&self, sample: &CodeSample) -> Result<Vec<usize>, SurrogateError> {
        if sample.tokens.is_empty() {
            return Err(SurrogateError::EmptyInput(sample.id.clone()));
        }
        Ok(self.vocab.encode(self.truncated(&sample.tokens)))
    }

    fn forward(&self, sample: &CodeSample) -> Result<Forward, SurrogateError> {
        let ids = self.encode(sample)?;
        Ok(Forward::run(&self.params, &ids))
    }

    /// Probability that `sample` is vulnerable.
    pub fn predict_proba(&self, sample: &CodeSample) -> Result<f64, SurrogateError> {
        Ok(self.forward(sample)?.probs[1])
    }

    pub fn attention_scores(&self, sample: &CodeSample) -> Result<AttentionMap, SurrogateError> {
        let f = self.forward(sample)?;
        Ok(AttentionMap {
            tokens: self.truncated(&sample.tokens).to_vec(),
            weights: f.weights,
        })
    }

    pub fn final_representation(&self, sample: &CodeSample) -> Result<Vec<f64>, SurrogateError> {
        Ok(self.forward(sample)?.representation)
    }

    /// Loss and full gradient for one encoded input; `label` 1 = vulnerable.
    pub fn loss_and_gradient(&self, ids: &[usize], label: usize) -> (f64, Params) {
        let f = Forward::run(&self.params, ids);
        let mut grad = self.params.zeros_like();
        f.backward(&self.params, ids, label, &mut grad);
        (f.loss(label), grad)
    }

    pub fn loss(&self, ids: &[usize], label: usize) -> f64 {
        Forward::run(&self.params, ids).loss(label)
    }

    fn mean_loss(&self, samples: &[CodeSample]) -> Result<f64, SurrogateError> {
        let mut total = 0.0;
        for s in samples {
            total += self.forward(s)?.loss(class_index(s.label));
        }
        Ok(total / samples.len() as f64)
    }
}

/// Trains by mini-batch gradient descent on cross-entropy. Deterministic for
/// a given split, vocabulary and config.
pub fn train(
    split: &DatasetSplit,
    vocab: &Vocabulary,
    config: &SurrogateConfig,
) -> Result<SurrogateModel, SurrogateError> {
    let has_vuln = split.train.iter().any(|s| s.label.is_vulnerable());
    let has_safe = split.train.iter().any(|s| !s.label.is_vulnerable());
    if !(has_vuln && has_safe) {
        return Err(SurrogateError::SingleClass);
    }
    let mut model = SurrogateModel::initialize(vocab.clone(), config.clone())?;
    let encoded: Vec<(Vec<usize>, usize)> = split
        .train
        .iter()
        .map(|s| Ok((model.encode(s)?, class_index(s.label))))
        .collect::<Result<_, SurrogateError>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_7a41);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut adam = AdamState::new(&model.params);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut grad = model.params.zeros_like();
            for &i in batch {
                let (ids, label) = &encoded[i];
                let f = Forward::run(&model.params, ids);
                let loss = f.loss(*label);
                if !loss.is_finite() {
                    return Err(SurrogateError::NonFiniteLoss {
                        epoch,
                        sample: split.train[i].id.clone(),
                    });
                }
                f.backward(&model.params, ids, *label, &mut grad);
            }
            grad.scale(1.0 / batch.len() as f64);
            if let Some(clip) = config.clip_norm {
                let norm = grad.norm();
                if norm > clip {
                    grad.scale(clip / norm);
                }
            }
            match config.optimizer {
                Optimizer::Sgd => model.params.add_scaled(&grad, -config.learning_rate),
                Optimizer::Adam => adam.apply(&mut model.params, &grad, config.learning_rate),
            }
        }
        if !split.eval.is_empty() {
            let loss = model.mean_loss(&split.eval)?;
            if !loss.is_finite() {
                return Err(SurrogateError::NonFiniteLoss {
                    epoch,
                    sample: "<eval>".into(),
                });
            }
            model.eval_losses.push(loss);
        }
    }
    Ok(model)
}

const CHECKPOINT_FORMAT: &str = "surrogate-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: SurrogateConfig,
    vocab_hash: String,
    vocab_size: usize,
    eval_losses: Vec<f64>,
    params: Params,
}

impl SurrogateModel {
    pub fn to_checkpoint_json(&self) -> String {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocab_hash: self.vocab.hash(),
            vocab_size: self.vocab.len(),
            eval_losses: self.eval_losses.clone(),
            params: self.params.clone(),
        };
        serde_json::to_string(&ckpt).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(text: &str, vocab: Vocabulary) -> Result<Self, SurrogateError> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| SurrogateError::Checkpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(SurrogateError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let expected = vocab.hash();
        if ckpt.vocab_hash != expected {
            return Err(SurrogateError::VocabMismatch {
                expected,
                found: ckpt.vocab_hash,
            });
        }
        if ckpt.params.embedding.rows != vocab.len() {
            return Err(SurrogateError::Checkpoint(
                "embedding rows do not match vocabulary".into(),
            ));
        }
        Ok(SurrogateModel {
            config: ckpt.config,
            vocab,
            params: ckpt.params,
            eval_losses: ckpt.eval_losses,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), SurrogateError> {
        std::fs::write(path, self.to_checkpoint_json())?;
        Ok(())
    }

    pub fn load(path: &Path, vocab: Vocabulary) -> Result<Self, SurrogateError> {
        Self::from_checkpoint_json(&std::fs::read_to_string(path)?, vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, split, Language, DEFAULT_FRACTIONS};
    use crate::synth;

    fn small_config() -> SurrogateConfig {
        SurrogateConfig {
            embed_dim: 8,
            hidden_dim: 8,
            key_dim: 8,
            value_dim: 8,
            epochs: 15,
            learning_rate: 0.02,
            batch_size: 4,
            seed: 3,
            ..SurrogateConfig::default()
        }
    }

    fn memcpy_setup() -> (DatasetSplit, Vocabulary) {
        let samples = synth::memcpy_corpus(80, 1);
        let s = split(&samples, 1, DEFAULT_FRACTIONS).unwrap();
        let vocab = build_vocab(&s.train, 1);
        (s, vocab)
    }

    #[test]
    fn zero_epochs_is_roughly_uniform() {
        let (s, vocab) = memcpy_setup();
        let model = train(
            &s,
            &vocab,
            &SurrogateConfig {
                epochs: 0,
                ..small_config()
            },
        )
        .unwrap();
        let mean: f64 = s.train.iter().map(|x| model.predict_proba(x).unwrap()).sum::<f64>() / s.train.len() as f64;
        assert!((mean - 0.5).abs() < 0.1, "mean {mean}");
        assert!(model.eval_losses().is_empty());
    }

    #[test]
    fn separable_corpus_is_learned() {
        let (s, vocab) = memcpy_setup();
        let model = train(&s, &vocab, &small_config()).unwrap();
        let held_out: Vec<&CodeSample> = s.eval.iter().chain(&s.test).collect();
        let correct = held_out
            .iter()
            .filter(|x| (model.predict_proba(x).unwrap() >= 0.5) == x.label.is_vulnerable())
            .count();
        assert!(
            correct as f64 / held_out.len() as f64 >= 0.9,
            "{correct}/{}",
            held_out.len()
        );
        let vulnerable = held_out.iter().find(|x| x.label.is_vulnerable()).unwrap();
        assert!(model.predict_proba(vulnerable).unwrap() > 0.5);
        assert!(model.params().is_finite());
        assert_eq!(model.eval_losses().len(), 15);
    }

    #[test]
    fn training_is_deterministic() {
        let (s, vocab) = memcpy_setup();
        let cfg = SurrogateConfig {
            epochs: 2,
            ..small_config()
        };
        assert_eq!(
            train(&s, &vocab, &cfg).unwrap().params(),
            train(&s, &vocab, &cfg).unwrap().params()
        );
    }

    #[test]
    fn single_class_is_rejected() {
        let (mut s, vocab) = memcpy_setup();
        s.train.retain(|x| x.label.is_vulnerable());
        assert!(matches!(
            train(&s, &vocab, &small_config()),
            Err(SurrogateError::SingleClass)
        ));
    }

    #[test]
    fn empty_tokens_are_rejected() {
        let (_, vocab) = memcpy_setup();
        let model = SurrogateModel::initialize(vocab, small_config()).unwrap();
        let empty = CodeSample::new("e", "", Label::Vulnerable, Language::C);
        assert!(matches!(
            model.predict_proba(&empty),
            Err(SurrogateError::EmptyInput(_))
        ));
    }

    #[test]
    fn long_inputs_are_truncated() {
        let (_, vocab) = memcpy_setup();
        let model = SurrogateModel::initialize(
            vocab,
            SurrogateConfig {
                max_seq_len: 5,
                ..small_config()
            },
        )
        .unwrap();
        let mut s = CodeSample::new("long", "", Label::Vulnerable, Language::C);
        s.tokens = vec!["int".into(); 50];
        let map = model.attention_scores(&s).unwrap();
        assert_eq!(map.weights.len(), 5);
        assert_eq!(model.final_representation(&s).unwrap().len(), 8);
    }

    #[test]
    fn checkpoint_round_trip_and_vocab_guard() {
        let (s, vocab) = memcpy_setup();
        let model = train(
            &s,
            &vocab,
            &SurrogateConfig {
                epochs: 1,
                ..small_config()
            },
        )
        .unwrap();
        let json = model.to_checkpoint_json();
        let back = SurrogateModel::from_checkpoint_json(&json, vocab.clone()).unwrap();
        assert_eq!(back, model);
        let other = build_vocab(&s.test, 1);
        assert!(matches!(
            SurrogateModel::from_checkpoint_json(&json, other),
            Err(SurrogateError::VocabMismatch { .. })
        ));
    }
}
