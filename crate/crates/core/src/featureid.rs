//! Ranking of the tokens the surrogate attends to inside important samples.

use crate::corpus::{lexer, CodeSample};
use crate::surrogate::{SurrogateError, SurrogateModel};
use crate::svmcore::ImportantSampleSet;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("top_n must be at least 1")]
    BadTopN,
    #[error("important sample set is empty")]
    NoImportantSamples,
    #[error("important sample {0:?} is not in the supplied samples")]
    UnknownSample(String),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
}

/// Keyword families used to phrase generation requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KeywordCategory {
    DataType,
    ControlStatement,
    StorageClass,
    InputOutput,
    Miscellaneous,
    Other,
}

impl KeywordCategory {
    pub const ALL: [KeywordCategory; 6] = [
        KeywordCategory::DataType,
        KeywordCategory::ControlStatement,
        KeywordCategory::StorageClass,
        KeywordCategory::InputOutput,
        KeywordCategory::Miscellaneous,
        KeywordCategory::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            KeywordCategory::DataType => "DataType",
            KeywordCategory::ControlStatement => "ControlStatement",
            KeywordCategory::StorageClass => "StorageClass",
            KeywordCategory::InputOutput => "InputOutput",
            KeywordCategory::Miscellaneous => "Miscellaneous",
            KeywordCategory::Other => "Other",
        }
    }
}

impl fmt::Display for KeywordCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

const DATA_TYPES: &[&str] = &[
    "int", "float", "double", "char", "short", "long", "signed", "unsigned", "void", "const", "volatile", "struct",
    "union", "enum", "typedef", "_Bool", "bool", "boolean", "byte",
];
const CONTROL: &[&str] = &["if", "else", "switch", "case", "default", "for", "while", "do", "goto"];
const STORAGE: &[&str] = &["auto", "extern", "static", "register", "_Thread_local", "thread_local"];
const IO: &[&str] = &[
    "printf",
    "scanf",
    "fprintf",
    "fscanf",
    "sprintf",
    "snprintf",
    "sscanf",
    "vprintf",
    "vfprintf",
    "vsprintf",
    "vsnprintf",
    "puts",
    "gets",
    "fgets",
    "fputs",
    "getchar",
    "putchar",
    "getc",
    "putc",
    "fgetc",
    "fputc",
    "fopen",
    "fclose",
    "fread",
    "fwrite",
    "fflush",
    "perror",
];
const MISC: &[&str] = &["sizeof", "return", "break", "typeof", "continue"];

/// Table lookup; anything unlisted is [`KeywordCategory::Other`].
pub fn categorize(token: &str) -> KeywordCategory {
    if DATA_TYPES.contains(&token) {
        KeywordCategory::DataType
    } else if CONTROL.contains(&token) {
        KeywordCategory::ControlStatement
    } else if STORAGE.contains(&token) {
        KeywordCategory::StorageClass
    } else if IO.contains(&token) {
        KeywordCategory::InputOutput
    } else if MISC.contains(&token) {
        KeywordCategory::Miscellaneous
    } else {
        KeywordCategory::Other
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportantFeature {
    pub token: String,
    pub score: f64,
    pub category: KeywordCategory,
    pub doc_freq: usize,
}

impl ImportantFeature {
    /// A feature with no attention evidence, for hand-built requests.
    pub fn manual(token: &str) -> Self {
        ImportantFeature {
            token: token.to_string(),
            score: 1.0,
            category: categorize(token),
            doc_freq: 0,
        }
    }
}

/// Ranks tokens by their mean attention weight over every occurrence in the
/// important samples.
///
/// Operators, punctuation and literal sentinels are skipped, as are tokens
/// outside the model vocabulary or below `min_doc_freq`. Ties are broken
/// lexicographically.
pub fn rank_features(
    model: &SurrogateModel,
    important: &ImportantSampleSet,
    samples: &[CodeSample],
    top_n: usize,
    min_doc_freq: usize,
) -> Result<Vec<ImportantFeature>, FeatureError> {
    if top_n < 1 {
        return Err(FeatureError::BadTopN);
    }
    if important.is_empty() {
        return Err(FeatureError::NoImportantSamples);
    }
    let by_id: HashMap<&str, &CodeSample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    // Fixed processing order so summation order never depends on the caller.
    let mut ids: Vec<&str> = important.ids().collect();
    ids.sort_unstable();
    ids.dedup();

    let vocab = model.vocab();
    let mut totals: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    let mut maps = Vec::with_capacity(ids.len());
    for id in ids {
        let sample = by_id
            .get(id)
            .ok_or_else(|| FeatureError::UnknownSample(id.to_string()))?;
        maps.push(model.attention_scores(sample)?);
    }
    for map in &maps {
        for (token, &w) in map.tokens.iter().zip(&map.weights) {
            if !lexer::is_word_token(token) || !vocab.contains(token) || vocab.doc_freq(token) < min_doc_freq {
                continue;
            }
            let entry = totals.entry(token.as_str()).or_insert((0.0, 0));
            entry.0 += w;
            entry.1 += 1;
        }
    }
    let mut ranked: Vec<ImportantFeature> = totals
        .into_iter()
        .map(|(token, (sum, count))| ImportantFeature {
            token: token.to_string(),
            score: sum / count as f64,
            category: categorize(token),
            doc_freq: vocab.doc_freq(token),
        })
        .filter(|f| f.score > 0.0)
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.token.cmp(&b.token)));
    ranked.truncate(top_n);
    Ok(ranked)
}

/// JSON array of `{token, score, category, doc_freq}`.
pub fn features_to_json(features: &[ImportantFeature]) -> String {
    serde_json::to_string_pretty(features).expect("features serialize")
}

pub fn features_from_json(text: &str) -> Result<Vec<ImportantFeature>, serde_json::Error> {
    serde_json::from_str(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_table() {
        assert_eq!(categorize("int"), KeywordCategory::DataType);
        assert_eq!(categorize("const"), KeywordCategory::DataType);
        assert_eq!(categorize("for"), KeywordCategory::ControlStatement);
        assert_eq!(categorize("static"), KeywordCategory::StorageClass);
        assert_eq!(categorize("printf"), KeywordCategory::InputOutput);
        assert_eq!(categorize("sscanf"), KeywordCategory::InputOutput);
        assert_eq!(categorize("sizeof"), KeywordCategory::Miscellaneous);
        assert_eq!(categorize("my_var_17"), KeywordCategory::Other);
    }

    #[test]
    fn json_shape() {
        let json = features_to_json(&[ImportantFeature {
            token: "static".into(),
            score: 0.25,
            category: KeywordCategory::StorageClass,
            doc_freq: 4,
        }]);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v[0]["category"], "StorageClass");
        assert_eq!(v[0]["doc_freq"], 4);
        assert_eq!(features_from_json(&json).unwrap()[0].token, "static");
    }
}
