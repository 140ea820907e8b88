//! Run configuration: TOML file, command-line overrides, content hash.

use anyhow::{bail, Context, Result};
use evasion_core::attack::{InsertOptions, LocationPolicy, Projection};
use evasion_core::corpus::Fractions;
use evasion_core::fga::FgaConfig;
use evasion_core::pool::PopulateConfig;
use evasion_core::surrogate::{Optimizer, SurrogateConfig};
use evasion_core::svmcore::SvmConfig;
use evasion_core::targetzoo::BowConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Dataset and weights shipped inside the binary.
pub const BUNDLED: &str = "bundled";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub seeds: Seeds,
    pub surrogate: SurrogateSection,
    pub svm: SvmSection,
    pub features: FeatureSection,
    pub generator: GeneratorSection,
    pub pool: PoolSection,
    pub fga: FgaSection,
    pub attack: AttackSection,
    pub victim: VictimSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// JSON-lines dataset, or `bundled`.
    pub path: String,
    pub fractions: Fractions,
    /// Vocabulary cut-off on training-split document frequency.
    pub min_doc_freq: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub split: u64,
    pub fga: u64,
    pub location: u64,
    /// Surrogate initialization and batching, host and group draws.
    pub sampling: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub max_seq_len: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub optimizer: Optimizer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmSection {
    pub c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    pub top_n: usize,
    pub min_doc_freq: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Offline,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub kind: GeneratorKind,
    /// Answer remote prompts from this log instead of the network.
    pub replay: Option<PathBuf>,
    /// Append live remote exchanges here.
    pub record: Option<PathBuf>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    /// Vulnerable training functions used as prompt context and validation hosts.
    pub hosts: usize,
    pub per_category: usize,
    pub features_per_prompt: usize,
    pub optimize: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSection {
    /// Preserved pool to start from; new candidates are added to a copy.
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FgaSection {
    pub k: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub population_size: usize,
    pub max_generations: usize,
    pub max_queries: Option<u64>,
    /// Cap on the flagged vulnerable test functions the search is scored on;
    /// all of them when absent.
    pub group_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMethod {
    Principal,
    Tsne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub snippet_size: usize,
    pub location_policy: LocationPolicy,
    pub single_location: bool,
    pub topk: Vec<usize>,
    pub projection: ProjectionMethod,
    pub perplexity: f64,
    pub tsne_iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum VictimKind {
    Bow,
    #[value(name = "self")]
    #[serde(rename = "self")]
    SelfModel,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VictimSection {
    pub kind: VictimKind,
    /// Bag-of-tokens weights: `bundled`, `train` (fit on the training split) or a JSON path.
    pub weights: String,
    pub bow: BowConfig,
    pub replay: Option<PathBuf>,
    pub record: Option<PathBuf>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            path: BUNDLED.into(),
            fractions: evasion_core::corpus::DEFAULT_FRACTIONS,
            min_doc_freq: 1,
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            split: 1,
            fga: 1,
            location: 1,
            sampling: 1,
        }
    }
}

impl Default for SurrogateSection {
    fn default() -> Self {
        SurrogateSection {
            embed_dim: 12,
            hidden_dim: 12,
            key_dim: 12,
            value_dim: 12,
            max_seq_len: 256,
            epochs: 12,
            learning_rate: 0.02,
            batch_size: 4,
            clip_norm: Some(5.0),
            optimizer: Optimizer::Adam,
        }
    }
}

// The surrogate separates the bundled corpus widely; a soft margin keeps
// enough support vectors for the attention step to see both classes.
impl Default for SvmSection {
    fn default() -> Self {
        SvmSection { c: 0.001 }
    }
}

impl Default for FeatureSection {
    fn default() -> Self {
        FeatureSection {
            top_n: 10,
            min_doc_freq: 2,
        }
    }
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let p = PopulateConfig::default();
        GeneratorSection {
            kind: GeneratorKind::Offline,
            replay: None,
            record: None,
            timeout_secs: 60,
            max_in_flight: 4,
            hosts: 8,
            per_category: p.per_category,
            features_per_prompt: p.features_per_prompt,
            optimize: p.optimize,
        }
    }
}

impl Default for FgaSection {
    fn default() -> Self {
        let f = FgaConfig::default();
        FgaSection {
            k: f.k,
            alpha: f.alpha,
            lambda: f.lambda,
            epsilon: f.epsilon,
            population_size: f.population_size,
            max_generations: f.max_generations,
            max_queries: f.max_queries,
            group_size: None,
        }
    }
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            snippet_size: 4,
            location_policy: LocationPolicy::UniformRandom,
            single_location: false,
            topk: vec![5, 10, 15, 20],
            projection: ProjectionMethod::Principal,
            perplexity: 10.0,
            tsne_iterations: 500,
        }
    }
}

impl Default for VictimSection {
    fn default() -> Self {
        VictimSection {
            kind: VictimKind::Bow,
            weights: BUNDLED.into(),
            bow: BowConfig::default(),
            replay: None,
            record: None,
            timeout_secs: 30,
            max_in_flight: 4,
        }
    }
}

/// Values given on the command line; they win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub snippet_size: Option<usize>,
    pub victim: Option<VictimKind>,
    pub generator: Option<GeneratorKind>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).context("invalid configuration")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Defaults, then `path` if given, then `overrides`.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        config.apply(overrides);
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seeds = Seeds {
                split: s,
                fga: s,
                location: s,
                sampling: s,
            };
        }
        if let Some(n) = o.snippet_size {
            self.attack.snippet_size = n;
        }
        if let Some(v) = o.victim {
            self.victim.kind = v;
        }
        if let Some(g) = o.generator {
            self.generator.kind = g;
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn seed_map(&self) -> BTreeMap<String, u64> {
        let s = self.seeds;
        [
            ("split", s.split),
            ("fga", s.fga),
            ("location", s.location),
            ("sampling", s.sampling),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn surrogate_config(&self) -> SurrogateConfig {
        let s = &self.surrogate;
        SurrogateConfig {
            embed_dim: s.embed_dim,
            hidden_dim: s.hidden_dim,
            key_dim: s.key_dim,
            value_dim: s.value_dim,
            max_seq_len: s.max_seq_len,
            epochs: s.epochs,
            learning_rate: s.learning_rate,
            batch_size: s.batch_size,
            clip_norm: s.clip_norm,
            optimizer: s.optimizer,
            seed: self.seeds.sampling,
        }
    }

    pub fn svm_config(&self) -> SvmConfig {
        SvmConfig {
            c: self.svm.c,
            ..SvmConfig::default()
        }
    }

    pub fn populate_config(&self) -> PopulateConfig {
        PopulateConfig {
            per_category: self.generator.per_category,
            features_per_prompt: self.generator.features_per_prompt,
            optimize: self.generator.optimize,
            suffix: true,
        }
    }

    pub fn insert_options(&self) -> InsertOptions {
        InsertOptions {
            policy: self.attack.location_policy,
            single_location: self.attack.single_location,
            suffix: true,
        }
    }

    pub fn fga_config(&self) -> FgaConfig {
        let f = &self.fga;
        FgaConfig {
            k: f.k,
            alpha: f.alpha,
            lambda: f.lambda,
            epsilon: f.epsilon,
            population_size: f.population_size,
            max_generations: f.max_generations,
            // Genomes are searched at the size they will be attacked with.
            max_genome_len: self.attack.snippet_size,
            max_queries: f.max_queries,
            seed: self.seeds.fga,
            location_seed: self.seeds.location,
            placement: self.insert_options(),
            ..FgaConfig::default()
        }
    }

    pub fn projection(&self) -> Projection {
        match self.attack.projection {
            ProjectionMethod::Principal => Projection::Principal,
            ProjectionMethod::Tsne => Projection::Tsne {
                perplexity: self.attack.perplexity,
                iterations: self.attack.tsne_iterations,
                seed: self.seeds.sampling,
            },
        }
    }

    pub fn validate_dataset(&self) -> Result<()> {
        let sum: f64 = self.dataset.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.dataset.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            bail!("dataset.fractions must be in [0, 1] and sum to 1");
        }
        if self.dataset.path != BUNDLED {
            require_path(Path::new(&self.dataset.path), "dataset.path")?;
        }
        Ok(())
    }

    pub fn validate_features(&self) -> Result<()> {
        if self.features.top_n < 1 {
            bail!("features.top_n must be at least 1");
        }
        if !(self.svm.c > 0.0 && self.svm.c.is_finite()) {
            bail!("svm.c must be positive");
        }
        Ok(())
    }

    pub fn validate_generator(&self) -> Result<()> {
        let g = &self.generator;
        if g.hosts < 1 || g.per_category < 1 || g.features_per_prompt < 1 {
            bail!("generator.hosts, per_category and features_per_prompt must be at least 1");
        }
        if let Some(p) = &g.replay {
            require_path(p, "generator.replay")?;
        }
        Ok(())
    }

    pub fn validate_pool(&self) -> Result<()> {
        if let Some(p) = &self.pool.path {
            require_path(p, "pool.path")?;
        }
        Ok(())
    }

    pub fn validate_fga(&self) -> Result<()> {
        self.fga_config().validate()?;
        if self.fga.group_size == Some(0) {
            bail!("fga.group_size must be at least 1");
        }
        self.validate_victim()
    }

    pub fn validate_attack(&self) -> Result<()> {
        let a = &self.attack;
        if a.snippet_size < 1 {
            bail!("attack.snippet_size must be at least 1");
        }
        if a.topk.iter().any(|k| *k < 1) {
            bail!("attack.topk entries must be at least 1");
        }
        self.validate_victim()
    }

    pub fn validate_projection(&self) -> Result<()> {
        if self.attack.projection == ProjectionMethod::Tsne
            && (self.attack.perplexity.is_nan() || self.attack.perplexity <= 0.0)
        {
            bail!("attack.perplexity must be positive");
        }
        Ok(())
    }

    pub fn validate_victim(&self) -> Result<()> {
        let v = &self.victim;
        if v.kind == VictimKind::Bow && v.weights != BUNDLED && v.weights != "train" {
            require_path(Path::new(&v.weights), "victim.weights")?;
        }
        if v.kind == VictimKind::Remote {
            if let Some(p) = &v.replay {
                require_path(p, "victim.replay")?;
            }
        }
        Ok(())
    }
}

fn require_path(path: &Path, key: &str) -> Result<()> {
    if !path.exists() {
        bail!("{key}: {} does not exist", path.display());
    }
    Ok(())
}
