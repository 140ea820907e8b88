//! Output directory layout, manifests and upstream checks.

use crate::config::RunConfig;
use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    TrainSurrogate,
    ExtractFeatures,
    GenSnippets,
    BuildPool,
    RunFga,
    Attack,
    Report,
    Project,
}

impl Stage {
    /// Pipeline order.
    pub const ALL: [Stage; 9] = [
        Stage::Ingest,
        Stage::TrainSurrogate,
        Stage::ExtractFeatures,
        Stage::GenSnippets,
        Stage::BuildPool,
        Stage::RunFga,
        Stage::Attack,
        Stage::Report,
        Stage::Project,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::TrainSurrogate => "train-surrogate",
            Stage::ExtractFeatures => "extract-features",
            Stage::GenSnippets => "gen-snippets",
            Stage::BuildPool => "build-pool",
            Stage::RunFga => "run-fga",
            Stage::Attack => "attack",
            Stage::Report => "report",
            Stage::Project => "project",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const SPLIT: &str = "split.json";
pub const VOCAB: &str = "vocab.json";
pub const SURROGATE: &str = "surrogate.json";
pub const FEATURES: &str = "features.json";
pub const CANDIDATES: &str = "candidates.jsonl";
pub const POOL: &str = "pool.jsonl";
pub const POOL_REPORT: &str = "pool_report.json";
pub const GENERATION_LOG: &str = "generation_log.jsonl";
pub const FGA_RESULT: &str = "fga_result.json";
pub const METRICS: &str = "metrics.json";
pub const ATTACK_RESULTS: &str = "attack_results.json";
pub const ADVERSARIAL: &str = "adversarial.jsonl";
pub const REPORT: &str = "report.json";
pub const PROJECTION: &str = "projection.csv";

const MANIFEST_DIR: &str = "manifests";

/// Written next to each stage's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Stage,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// File name to SHA-256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

/// JSON artifact carrying the hash of the config that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    pub data: T,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct Workspace {
    root: PathBuf,
    written: Vec<(String, String)>,
}

impl Workspace {
    pub fn open(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root.join(MANIFEST_DIR)).with_context(|| format!("creating {}", root.display()))?;
        Ok(Workspace {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).is_file()
    }

    /// Path of an upstream artifact, or an error naming the stage that makes it.
    pub fn require(&self, name: &str, producer: Stage) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.is_file() {
            bail!("missing {name} in {}: run `{producer}` first", self.root.display());
        }
        Ok(p)
    }

    pub fn read(&self, name: &str, producer: Stage) -> Result<String> {
        let p = self.require(name, producer)?;
        std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))
    }

    pub fn read_stamped<T: DeserializeOwned>(&self, name: &str, producer: Stage) -> Result<Stamped<T>> {
        serde_json::from_str(&self.read(name, producer)?).with_context(|| format!("parsing {name}"))
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        self.written.push((name.to_string(), sha256_hex(contents.as_bytes())));
        Ok(())
    }

    pub fn write_stamped<T: Serialize>(&mut self, name: &str, config: &RunConfig, data: &T) -> Result<()> {
        let stamped = Stamped {
            config_hash: config.hash(),
            data,
        };
        self.write(name, &(serde_json::to_string_pretty(&stamped)? + "\n"))
    }

    /// Records everything written since the last manifest.
    pub fn finish(&mut self, stage: Stage, config: &RunConfig) -> Result<Manifest> {
        let manifest = Manifest {
            stage,
            config_hash: config.hash(),
            seeds: config.seed_map(),
            artifacts: self.written.drain(..).collect(),
        };
        let name = format!("{MANIFEST_DIR}/{stage}.json");
        std::fs::write(self.path(&name), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }

    /// Manifests present, in pipeline order.
    pub fn manifests(&self) -> Result<Vec<Manifest>> {
        let mut out = Vec::new();
        for stage in Stage::ALL {
            let p = self.path(&format!("{MANIFEST_DIR}/{stage}.json"));
            if p.is_file() {
                let text = std::fs::read_to_string(&p)?;
                out.push(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?);
            }
        }
        Ok(out)
    }

    /// Every manifest carries `hash` and every recorded artifact still has
    /// the recorded content.
    pub fn check_consistent(&self, hash: &str) -> Result<Vec<Manifest>> {
        let manifests = self.manifests()?;
        let stale: Vec<String> = manifests
            .iter()
            .filter(|m| m.config_hash != hash)
            .map(|m| format!("{} ({})", m.stage, &m.config_hash[..12.min(m.config_hash.len())]))
            .collect();
        if !stale.is_empty() {
            bail!(
                "config hash mismatch: current config is {}, but {} were produced by a different config",
                &hash[..12],
                stale.join(", ")
            );
        }
        for m in &manifests {
            for (name, sha) in &m.artifacts {
                let bytes = std::fs::read(self.path(name)).map_err(|e| anyhow!("{name} from {}: {e}", m.stage))?;
                if &sha256_hex(&bytes) != sha {
                    bail!("{name} changed since `{}` wrote it", m.stage);
                }
                if name.ends_with(".json") {
                    let v: serde_json::Value = serde_json::from_slice(&bytes)?;
                    if let Some(h) = v.get("config_hash").and_then(|h| h.as_str()) {
                        if h != hash {
                            bail!("{name} embeds config hash {h}, expected {hash}");
                        }
                    }
                }
            }
        }
        Ok(manifests)
    }
}
