//! The preserved attack pool: validated snippets indexed by keyword category.

use crate::attack::statement_boundaries;
use crate::corpus::CodeSample;
use crate::featureid::{ImportantFeature, KeywordCategory};
use crate::par::{self, Execution};
use crate::snippetgen::{
    apply_suffixes, build_prompt, function_top_line, generate_snippet, optimize_prompt, validate_snippet,
    GeneratorClient, PromptSpec, Provenance, Snippet, ValidationReport, CONTEXT_PHRASES,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const POOL_FORMAT: &str = "attack-pool";
pub const POOL_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SnippetId(pub u32);

impl fmt::Display for SnippetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("snippet rejected: {0}")]
    Rejected(ValidationReport),
    #[error("duplicate of snippet {0}")]
    Duplicate(SnippetId),
    #[error("unknown snippet {0}")]
    UnknownId(SnippetId),
    #[error("pool file schema {found} is not supported (expected {POOL_FORMAT} schema {POOL_SCHEMA})")]
    Schema { found: String },
    #[error("pool file line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("no snippets match the filter")]
    Empty,
    #[error("asked for {requested} seeds but only {available} are available")]
    TooMany { requested: usize, available: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub snippet: Snippet,
    /// Id of the sample the snippet was validated against.
    pub host_id: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    schema: u32,
    version: u64,
    next_id: u32,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: SnippetId,
    lines: Vec<String>,
    keywords: Vec<String>,
    categories: Vec<KeywordCategory>,
    provenance: Provenance,
    host_id: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttackPool {
    snippets: BTreeMap<SnippetId, PoolEntry>,
    by_category: BTreeMap<KeywordCategory, Vec<SnippetId>>,
    by_hash: HashMap<String, SnippetId>,
    version: u64,
    next_id: u32,
}

impl AttackPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Validates `snippet` against `host` and stores it under a fresh id.
    pub fn add(&mut self, snippet: Snippet, host: &CodeSample) -> Result<SnippetId, PoolError> {
        let report = validate_snippet(&snippet, host);
        if !report.passed() {
            return Err(PoolError::Rejected(report));
        }
        let hash = snippet.normalized_hash();
        if let Some(&existing) = self.by_hash.get(&hash) {
            return Err(PoolError::Duplicate(existing));
        }
        let id = SnippetId(self.next_id);
        self.next_id += 1;
        self.version += 1;
        self.index(id, &snippet, hash);
        self.snippets.insert(
            id,
            PoolEntry {
                snippet,
                host_id: host.id.clone(),
            },
        );
        Ok(id)
    }

    fn index(&mut self, id: SnippetId, snippet: &Snippet, hash: String) {
        for cat in snippet.categories() {
            self.by_category.entry(cat).or_default().push(id);
        }
        self.by_hash.insert(hash, id);
    }

    pub fn get(&self, id: SnippetId) -> Option<&Snippet> {
        self.snippets.get(&id).map(|e| &e.snippet)
    }

    pub fn entry(&self, id: SnippetId) -> Option<&PoolEntry> {
        self.snippets.get(&id)
    }

    pub fn snippet(&self, id: SnippetId) -> Result<&Snippet, PoolError> {
        self.get(id).ok_or(PoolError::UnknownId(id))
    }

    pub fn len(&self) -> usize {
        self.snippets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }

    /// Ids in ascending order.
    pub fn ids(&self) -> impl Iterator<Item = SnippetId> + '_ {
        self.snippets.keys().copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (SnippetId, &PoolEntry)> {
        self.snippets.iter().map(|(id, e)| (*id, e))
    }

    pub fn by_category(&self, category: KeywordCategory) -> &[SnippetId] {
        self.by_category.get(&category).map_or(&[], Vec::as_slice)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Total line count of a genome.
    pub fn total_lines(&self, genome: &[SnippetId]) -> Result<usize, PoolError> {
        genome.iter().map(|&id| Ok(self.snippet(id)?.line_count())).sum()
    }

    /// `n` distinct ids drawn without replacement, optionally restricted to
    /// one category.
    pub fn sample_seeds(
        &self,
        n: usize,
        filter: Option<KeywordCategory>,
        seed: u64,
    ) -> Result<Vec<SnippetId>, PoolError> {
        let mut candidates: Vec<SnippetId> = match filter {
            Some(cat) => self.by_category(cat).to_vec(),
            None => self.ids().collect(),
        };
        if candidates.is_empty() {
            return Err(PoolError::Empty);
        }
        if n > candidates.len() {
            return Err(PoolError::TooMany {
                requested: n,
                available: candidates.len(),
            });
        }
        candidates.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        candidates.shuffle(&mut rng);
        candidates.truncate(n);
        Ok(candidates)
    }

    /// JSON-lines: a header line, then one snippet per line in id order.
    pub fn to_jsonl(&self) -> String {
        let header = Header {
            format: POOL_FORMAT.into(),
            schema: POOL_SCHEMA,
            version: self.version,
            next_id: self.next_id,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for (id, e) in &self.snippets {
            let rec = Record {
                id: *id,
                lines: e.snippet.lines.clone(),
                keywords: e.snippet.keywords.clone(),
                categories: e.snippet.categories().into_iter().collect(),
                provenance: e.snippet.provenance.clone(),
                host_id: e.host_id.clone(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, PoolError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(PoolError::Corrupt {
            line: 1,
            message: "missing header".into(),
        })?;
        let header: Header = serde_json::from_str(first).map_err(|e| PoolError::Corrupt {
            line: 1,
            message: format!("bad header: {e}"),
        })?;
        if header.format != POOL_FORMAT || header.schema != POOL_SCHEMA {
            return Err(PoolError::Schema {
                found: format!("{} schema {}", header.format, header.schema),
            });
        }
        let mut pool = AttackPool {
            version: header.version,
            next_id: header.next_id,
            ..AttackPool::default()
        };
        for (i, line) in lines {
            let corrupt = |message: String| PoolError::Corrupt { line: i + 1, message };
            let rec: Record = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
            if rec.id.0 >= pool.next_id {
                return Err(corrupt(format!("id {} not below next_id {}", rec.id, pool.next_id)));
            }
            if pool.snippets.contains_key(&rec.id) {
                return Err(corrupt(format!("duplicate id {}", rec.id)));
            }
            let snippet = Snippet {
                lines: rec.lines,
                requested: rec.keywords.clone(),
                keywords: rec.keywords,
                suffix_map: BTreeMap::new(),
                provenance: rec.provenance,
            };
            let computed: Vec<KeywordCategory> = snippet.categories().into_iter().collect();
            if computed != rec.categories {
                return Err(corrupt(format!(
                    "categories {:?} disagree with keywords",
                    rec.categories
                )));
            }
            let hash = snippet.normalized_hash();
            if let Some(prev) = pool.by_hash.get(&hash) {
                return Err(corrupt(format!("duplicate text of {prev}")));
            }
            pool.index(rec.id, &snippet, hash);
            pool.snippets.insert(
                rec.id,
                PoolEntry {
                    snippet,
                    host_id: rec.host_id,
                },
            );
        }
        Ok(pool)
    }

    pub fn save(&self, path: &Path) -> Result<(), PoolError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PoolError> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulateConfig {
    /// Prompts per keyword category, plus as many mixing top-ranked features.
    pub per_category: usize,
    pub features_per_prompt: usize,
    /// Add the several-lines, dense-format constraints.
    pub optimize: bool,
    pub suffix: bool,
}

impl Default for PopulateConfig {
    fn default() -> Self {
        PopulateConfig {
            per_category: 5,
            features_per_prompt: 3,
            optimize: true,
            suffix: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PopulateReport {
    pub prompts: usize,
    pub added: Vec<SnippetId>,
    pub duplicates: usize,
    /// `(prompt hash, reason)` for generation, suffixing or validation failures.
    pub rejected: Vec<(String, String)>,
}

/// Prompt plan: per category, windows of 1..=`features_per_prompt` features
/// rotating through the category's ranked features, then the same over the
/// full ranking. Hosts and context variants rotate with the prompt index.
pub fn plan_prompts(
    features: &[ImportantFeature],
    hosts: &[CodeSample],
    config: &PopulateConfig,
) -> Vec<(PromptSpec, usize)> {
    let mut groups: Vec<Vec<ImportantFeature>> = Vec::new();
    let mut by_cat: BTreeMap<KeywordCategory, Vec<ImportantFeature>> = BTreeMap::new();
    for f in features {
        by_cat.entry(f.category).or_default().push(f.clone());
    }
    groups.extend(by_cat.into_values());
    if !features.is_empty() {
        groups.push(features.to_vec());
    }
    let width = config.features_per_prompt.max(1);
    let mut out = Vec::new();
    for (g, group) in groups.iter().enumerate() {
        for j in 0..config.per_category {
            let size = (1 + j % width).min(group.len());
            let window: Vec<ImportantFeature> = (0..size).map(|k| group[(j + k) % group.len()].clone()).collect();
            let h = (g + j) % hosts.len().max(1);
            let Some(host) = hosts.get(h) else { continue };
            let line = match statement_boundaries(host) {
                Ok(b) if !b.is_empty() => b[j % b.len()] + 1,
                _ => function_top_line(host),
            };
            if let Ok(mut prompt) = build_prompt(&window, host, line, (g + j) % CONTEXT_PHRASES.len()) {
                if config.optimize {
                    prompt = optimize_prompt(&prompt);
                }
                out.push((prompt, h));
            }
        }
    }
    out
}

/// What came back for one planned prompt, suffixed against its host.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub prompt_hash: String,
    pub host_id: String,
    pub result: Result<Snippet, String>,
}

/// Runs the prompt plan through `client`. Generation may run in parallel;
/// candidates come back in plan order.
pub fn generate_candidates(
    client: &dyn GeneratorClient,
    features: &[ImportantFeature],
    hosts: &[CodeSample],
    config: &PopulateConfig,
    exec: Execution,
) -> Vec<Candidate> {
    let plan = plan_prompts(features, hosts, config);
    par::map(&plan, exec, |(prompt, h)| {
        let host = &hosts[*h];
        let result = generate_snippet(client, prompt)
            .map_err(|e| e.to_string())
            .and_then(|snippet| {
                if config.suffix {
                    apply_suffixes(&snippet, host).map_err(|e| e.to_string())
                } else {
                    Ok(snippet)
                }
            });
        Candidate {
            prompt_hash: prompt.hash(),
            host_id: host.id.clone(),
            result,
        }
    })
}

impl AttackPool {
    /// Validates candidates against their hosts and keeps the ones that pass,
    /// in order.
    pub fn admit(&mut self, candidates: &[Candidate], hosts: &[CodeSample]) -> PopulateReport {
        let by_id: HashMap<&str, &CodeSample> = hosts.iter().map(|h| (h.id.as_str(), h)).collect();
        let mut report = PopulateReport {
            prompts: candidates.len(),
            ..PopulateReport::default()
        };
        for c in candidates {
            let outcome = match (&c.result, by_id.get(c.host_id.as_str())) {
                (Err(e), _) => Err(e.clone()),
                (Ok(_), None) => Err(format!("unknown host {}", c.host_id)),
                (Ok(s), Some(host)) => match self.add(s.clone(), host) {
                    Ok(id) => Ok(id),
                    Err(PoolError::Duplicate(_)) => {
                        report.duplicates += 1;
                        continue;
                    }
                    Err(e) => Err(e.to_string()),
                },
            };
            match outcome {
                Ok(id) => report.added.push(id),
                Err(e) => report.rejected.push((c.prompt_hash.clone(), e)),
            }
        }
        report
    }

    /// [`generate_candidates`] followed by [`AttackPool::admit`].
    pub fn populate(
        &mut self,
        client: &dyn GeneratorClient,
        features: &[ImportantFeature],
        hosts: &[CodeSample],
        config: &PopulateConfig,
        exec: Execution,
    ) -> PopulateReport {
        let candidates = generate_candidates(client, features, hosts, config, exec);
        self.admit(&candidates, hosts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Label, Language};

    fn host() -> CodeSample {
        CodeSample::new(
            "h1",
            "int f(int n)\n{\n    return n;\n}\n",
            Label::Vulnerable,
            Language::C,
        )
    }

    fn snip(text: &str, kws: &[&str]) -> Snippet {
        Snippet::from_text(text, kws, Language::C).unwrap()
    }

    fn sample_pool() -> AttackPool {
        let mut p = AttackPool::new();
        p.add(snip("static int a_q = 0;", &["static"]), &host()).unwrap();
        p.add(snip("for (int b_q = 0; b_q < 0; b_q++) { }", &["for", "int"]), &host())
            .unwrap();
        p.add(snip("if (0) printf(\"\");", &["printf"]), &host()).unwrap();
        p
    }

    #[test]
    fn add_and_retrieve() {
        let mut p = AttackPool::new();
        let six: Vec<String> = (0..6).map(|i| format!("int z_{i} = {i};")).collect();
        let id = p.add(snip(&six.join("\n"), &["int"]), &host()).unwrap();
        assert_eq!(p.get(id).unwrap().line_count(), 6);
        assert_eq!(p.version(), 1);
        assert_eq!(p.by_category(KeywordCategory::DataType), [id]);
    }

    #[test]
    fn rejects_long_and_duplicate() {
        let mut p = sample_pool();
        let nine: Vec<String> = (0..9).map(|i| format!("int z_{i} = {i};")).collect();
        assert!(matches!(
            p.add(snip(&nine.join("\n"), &[]), &host()),
            Err(PoolError::Rejected(_))
        ));
        assert!(matches!(
            p.add(snip("static  int a_q = 0;", &["static"]), &host()),
            Err(PoolError::Duplicate(SnippetId(0)))
        ));
        assert_eq!(p.version(), 3);
    }

    #[test]
    fn round_trip() {
        let p = sample_pool();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.jsonl");
        p.save(&path).unwrap();
        assert_eq!(AttackPool::load(&path).unwrap(), p);
        let empty = AttackPool::new();
        assert_eq!(AttackPool::from_jsonl(&empty.to_jsonl()).unwrap(), empty);
    }

    #[test]
    fn record_shape() {
        let text = sample_pool().to_jsonl();
        let rec: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        for key in ["id", "lines", "keywords", "categories", "provenance"] {
            assert!(rec.get(key).is_some(), "{key}");
        }
        assert_eq!(rec["categories"][0], "StorageClass");
    }

    #[test]
    fn load_errors() {
        let text = sample_pool().to_jsonl();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[2] = "{\"id\": 1, \"lines\": [";
        match AttackPool::from_jsonl(&lines.join("\n")) {
            Err(PoolError::Corrupt { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        let future = text.replacen("\"schema\":1", "\"schema\":2", 1);
        assert!(matches!(AttackPool::from_jsonl(&future), Err(PoolError::Schema { .. })));
    }

    #[test]
    fn seeds() {
        let p = sample_pool();
        let mut all = p.sample_seeds(3, None, 9).unwrap();
        assert_eq!(all, p.sample_seeds(3, None, 9).unwrap());
        all.sort();
        assert_eq!(all, p.ids().collect::<Vec<_>>());
        assert!(matches!(
            p.sample_seeds(1, Some(KeywordCategory::Miscellaneous), 0),
            Err(PoolError::Empty)
        ));
        assert!(matches!(p.sample_seeds(4, None, 0), Err(PoolError::TooMany { .. })));
    }

    #[test]
    fn populate_from_offline_generator() {
        use crate::snippetgen::OfflineGenerator;
        let hosts = crate::synth::benchmark_corpus(3, 2);
        let features: Vec<ImportantFeature> = ["static", "const", "sizeof", "snprintf", "for", "count"]
            .iter()
            .map(|t| ImportantFeature::manual(t))
            .collect();
        let mut pool = AttackPool::new();
        let report = pool.populate(
            &OfflineGenerator,
            &features,
            &hosts,
            &PopulateConfig::default(),
            Execution::Sequential,
        );
        assert!(report.rejected.is_empty(), "{:?}", report.rejected);
        assert_eq!(report.added.len() + report.duplicates, report.prompts);
        assert!(pool.len() >= 10, "{}", pool.len());
        for (_, entry) in pool.entries() {
            assert!(entry.snippet.line_count() <= crate::snippetgen::MAX_SNIPPET_LINES);
            let host = hosts.iter().find(|h| h.id == entry.host_id).unwrap();
            assert!(validate_snippet(&entry.snippet, host).passed());
        }
        let mut again = AttackPool::new();
        again.populate(
            &OfflineGenerator,
            &features,
            &hosts,
            &PopulateConfig::default(),
            Execution::default(),
        );
        assert_eq!(pool.to_jsonl(), again.to_jsonl());
    }
}
