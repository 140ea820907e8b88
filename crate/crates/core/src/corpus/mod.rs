//! Labeled source corpora: loading, tokenization, vocabularies and splits.

pub mod lexer;
mod split;
mod vocab;

pub use lexer::{tokenize, LexError};
pub use split::{split, DatasetSplit, Fractions, DEFAULT_FRACTIONS};
pub use vocab::{build_vocab, Vocabulary, PAD_INDEX, UNK_INDEX};

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: invalid record: {message}")]
    Validation { line: usize, message: String },
    #[error("sample {id}: {source}")]
    Lex {
        id: String,
        #[source]
        source: LexError,
    },
    #[error("split needs at least 3 samples, got {0}")]
    TooFewSamples(usize),
    #[error("invalid split fractions {0:?}: each must be in [0, 1] and they must sum to 1")]
    BadFractions([f64; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Vulnerable,
    Nonvulnerable,
}

impl Label {
    pub fn is_vulnerable(self) -> bool {
        self == Label::Vulnerable
    }

    /// +1 for vulnerable, -1 for non-vulnerable.
    pub fn sign(self) -> f64 {
        if self.is_vulnerable() {
            1.0
        } else {
            -1.0
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Vulnerable => "vulnerable",
            Label::Nonvulnerable => "nonvulnerable",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "vulnerable" => Some(Label::Vulnerable),
            "nonvulnerable" => Some(Label::Nonvulnerable),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    #[default]
    C,
    Cpp,
    Java,
}

impl Language {
    pub fn as_str(self) -> &'static str {
        match self {
            Language::C => "c",
            Language::Cpp => "cpp",
            Language::Java => "java",
        }
    }

    /// Name used when talking to code generators.
    pub fn display_name(self) -> &'static str {
        match self {
            Language::C => "C",
            Language::Cpp => "C++",
            Language::Java => "Java",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "c" => Some(Language::C),
            "cpp" => Some(Language::Cpp),
            "java" => Some(Language::Java),
            _ => None,
        }
    }
}

/// One labeled source function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeSample {
    pub id: String,
    pub source: String,
    pub label: Label,
    pub language: Language,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tokens: Vec<String>,
}

impl CodeSample {
    pub fn new(id: impl Into<String>, source: impl Into<String>, label: Label, language: Language) -> Self {
        CodeSample {
            id: id.into(),
            source: source.into(),
            label,
            language,
            tokens: Vec::new(),
        }
    }

    /// Fills `tokens` from `source`.
    pub fn tokenize(&mut self) -> Result<(), LexError> {
        self.tokens = tokenize(&self.source, self.language)?;
        Ok(())
    }

    pub fn tokenized(mut self) -> Result<Self, CorpusError> {
        self.tokenize().map_err(|source| CorpusError::Lex {
            id: self.id.clone(),
            source,
        })?;
        Ok(self)
    }
}

/// Tokenizes every sample in place.
pub fn tokenize_all(samples: &mut [CodeSample]) -> Result<(), CorpusError> {
    for s in samples.iter_mut() {
        s.tokenize().map_err(|source| CorpusError::Lex {
            id: s.id.clone(),
            source,
        })?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    source: String,
    label: String,
    language: String,
}

/// Parses JSON-lines dataset text. Blank lines are skipped.
pub fn parse_dataset(text: &str) -> Result<Vec<CodeSample>, CorpusError> {
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let label = Label::parse(&raw.label).ok_or_else(|| CorpusError::Validation {
            line: line_no,
            message: format!("unknown label {:?}", raw.label),
        })?;
        let language = Language::parse(&raw.language).ok_or_else(|| CorpusError::Validation {
            line: line_no,
            message: format!("unknown language {:?}", raw.language),
        })?;
        if !seen.insert(raw.id.clone()) {
            return Err(CorpusError::Validation {
                line: line_no,
                message: format!("duplicate id {:?}", raw.id),
            });
        }
        samples.push(CodeSample::new(raw.id, raw.source, label, language));
    }
    Ok(samples)
}

pub fn load_dataset(path: &Path) -> Result<Vec<CodeSample>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dataset(&text)
}

/// Serializes samples back into the JSON-lines dataset format.
pub fn write_dataset(samples: &[CodeSample]) -> String {
    let mut out = String::new();
    for s in samples {
        let record = serde_json::json!({
            "id": s.id,
            "source": s.source,
            "label": s.label,
            "language": s.language,
        });
        out.push_str(&record.to_string());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelCounts {
    pub vulnerable: usize,
    pub nonvulnerable: usize,
}

impl LabelCounts {
    pub fn of(samples: &[CodeSample]) -> Self {
        let vulnerable = samples.iter().filter(|s| s.label.is_vulnerable()).count();
        LabelCounts {
            vulnerable,
            nonvulnerable: samples.len() - vulnerable,
        }
    }

    pub fn total(&self) -> usize {
        self.vulnerable + self.nonvulnerable
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, label: &str) -> String {
        serde_json::json!({"id": id, "source": "int f() { return 0; }", "label": label, "language": "c"}).to_string()
    }

    #[test]
    fn openssl_sized_file_loads_every_record() {
        let mut text = String::new();
        for i in 0..945 {
            let label = if i < 157 { "vulnerable" } else { "nonvulnerable" };
            text.push_str(&record(&format!("openssl-{i}"), label));
            text.push('\n');
        }
        let samples = parse_dataset(&text).unwrap();
        assert_eq!(samples.len(), 945);
        assert_eq!(
            LabelCounts::of(&samples),
            LabelCounts {
                vulnerable: 157,
                nonvulnerable: 788
            }
        );
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        assert!(parse_dataset("").unwrap().is_empty());
    }

    #[test]
    fn unknown_label_names_its_line() {
        let text = format!("{}\n{}\n", record("a", "vulnerable"), record("b", "maybe"));
        match parse_dataset(&text) {
            Err(CorpusError::Validation { line: 2, message }) => assert!(message.contains("maybe")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_names_its_line() {
        let text = format!("{}\n{{not json\n", record("a", "vulnerable"));
        assert!(matches!(parse_dataset(&text), Err(CorpusError::Parse { line: 2, .. })));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let text = format!("{}\n{}\n", record("a", "vulnerable"), record("a", "nonvulnerable"));
        assert!(matches!(
            parse_dataset(&text),
            Err(CorpusError::Validation { line: 2, .. })
        ));
    }

    #[test]
    fn write_then_parse_round_trips() {
        let samples = vec![
            CodeSample::new("x", "int a = \"q\";\n", Label::Vulnerable, Language::C),
            CodeSample::new("y", "class A {}", Label::Nonvulnerable, Language::Java),
        ];
        assert_eq!(parse_dataset(&write_dataset(&samples)).unwrap(), samples);
    }

    #[test]
    fn tokenize_all_reports_sample_id() {
        let mut samples = vec![CodeSample::new("bad", "x = \"open", Label::Vulnerable, Language::C)];
        let err = tokenize_all(&mut samples).unwrap_err();
        assert!(err.to_string().contains("bad"));
    }
}
