//! Prompt construction, snippet generation, identifier hygiene and lexical
//! validation of dead-code snippets.

mod offline;
mod remote;
mod suffix;

pub use offline::{OfflineGenerator, TEMPLATE_VERSION};
pub use remote::{RemoteGenerator, ReplayGenerator, GEN_KEY_ENV, GEN_URL_ENV};
pub use suffix::{apply_suffixes, SuffixError};

use crate::corpus::lexer::{self, LexError, TokenKind};
use crate::corpus::{CodeSample, Language};
use crate::featureid::{categorize, ImportantFeature, KeywordCategory};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::process::Command;
use thiserror::Error;

/// Longest snippet accepted into the attack pool.
pub const MAX_SNIPPET_LINES: usize = 8;

/// Lines of host context shown on each side of the insertion point.
pub const CONTEXT_LINES: usize = 5;

/// Context lead-ins, selected by `PromptSpec::context_variant`.
pub const CONTEXT_PHRASES: [&str; 4] = [
    "Given the partial preceding/succeeding codes as:",
    "With the partial preceding/following codes provided as:",
    "In light of the incomplete preceding/following codes as:",
    "Taking into account the limited preceding/succeeding codes as:",
];

pub const SEVERAL_LINES_REQUEST: &str = "Please generate several lines in";
pub const DENSE_FORMAT_CLAUSE: &str = "Please generate the codes in dense format.";

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("no features to request")]
    NoFeatures,
    #[error("context variant {0} out of range 0..=3")]
    BadVariant(usize),
    #[error("retryable generator failure: {0}")]
    Retryable(String),
    #[error("generator failure: {0}")]
    Failed(String),
    #[error("generator output could not be parsed ({reason}); raw output:\n{raw}")]
    Unparseable { reason: String, raw: String },
    #[error("no recorded response for prompt {0}")]
    MissingReplay(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConstraints {
    pub max_lines: usize,
    pub several_lines: bool,
    pub dense: bool,
    pub rename_map: BTreeMap<String, String>,
}

impl Default for PromptConstraints {
    fn default() -> Self {
        PromptConstraints {
            max_lines: MAX_SNIPPET_LINES,
            several_lines: false,
            dense: false,
            rename_map: BTreeMap::new(),
        }
    }
}

/// A generation request: host context around the insertion point plus a
/// query naming every requested feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub language: Language,
    pub features: Vec<String>,
    pub clauses: Vec<String>,
    pub context_variant: usize,
    pub context_before: String,
    pub context_after: String,
    pub query: String,
    pub constraints: PromptConstraints,
}

fn join_clauses(clauses: &[String]) -> String {
    match clauses {
        [] => String::new(),
        [one] => one.clone(),
        [a, b] => format!("{a} and {b}"),
        [rest @ .., last] => format!("{}, and {last}", rest.join(", ")),
    }
}

/// How a feature is asked for in the query. Every phrase names the token.
fn clause_for(token: &str) -> String {
    match categorize(token) {
        KeywordCategory::ControlStatement => match token {
            "for" | "while" | "do" => format!("a loop using {token}"),
            "if" | "else" => format!("a conditional statement using {token}"),
            "goto" => "a goto jump".to_string(),
            _ => format!("a switch statement using {token}"),
        },
        KeywordCategory::StorageClass => format!("a variable declared {token}"),
        KeywordCategory::DataType => match token {
            "struct" | "union" | "enum" => format!("a {token} definition"),
            "typedef" => "a typedef alias".to_string(),
            "const" | "volatile" => format!("a {token} qualified variable"),
            _ => format!("a variable of type {token}"),
        },
        KeywordCategory::InputOutput => format!("a call to {token}"),
        KeywordCategory::Miscellaneous => match token {
            "sizeof" | "typeof" => format!("a {token} expression"),
            _ => format!("a {token} statement"),
        },
        KeywordCategory::Other => format!("a variable named {token}"),
    }
}

impl PromptSpec {
    fn compose_query(&mut self) {
        let lang = self.language.display_name();
        let body = join_clauses(&self.clauses);
        let mut q = if self.constraints.several_lines {
            format!("{SEVERAL_LINES_REQUEST} {lang} that contain {body}.")
        } else {
            format!("Please generate a function in {lang} that contains {body}.")
        };
        for (from, to) in &self.constraints.rename_map {
            q.push_str(&format!(" Rename {from} as \"{to}\"."));
        }
        if self.constraints.dense {
            q.push(' ');
            q.push_str(DENSE_FORMAT_CLAUSE);
        }
        self.query = q;
    }

    /// Full prompt text in `<Context> <Query> <Context>` order.
    pub fn render(&self) -> String {
        format!(
            "{}\n{}\n{}\n{}",
            CONTEXT_PHRASES[self.context_variant], self.context_before, self.query, self.context_after
        )
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }
}

/// Line just after the first line that opens the function body.
pub fn function_top_line(host: &CodeSample) -> usize {
    host.source.lines().position(|l| l.contains('{')).map_or(0, |i| i + 1)
}

/// Builds the raw prompt for inserting code before line `insertion_line` of `host`.
pub fn build_prompt(
    features: &[ImportantFeature],
    host: &CodeSample,
    insertion_line: usize,
    variant: usize,
) -> Result<PromptSpec, GenerationError> {
    if features.is_empty() {
        return Err(GenerationError::NoFeatures);
    }
    if variant >= CONTEXT_PHRASES.len() {
        return Err(GenerationError::BadVariant(variant));
    }
    let lines: Vec<&str> = host.source.lines().collect();
    let at = insertion_line.min(lines.len());
    let before = lines[at.saturating_sub(CONTEXT_LINES)..at].join("\n");
    let after = lines[at..(at + CONTEXT_LINES).min(lines.len())].join("\n");
    let mut tokens: Vec<String> = Vec::new();
    for f in features {
        if !tokens.contains(&f.token) {
            tokens.push(f.token.clone());
        }
    }
    let mut spec = PromptSpec {
        language: host.language,
        clauses: tokens.iter().map(|t| clause_for(t)).collect(),
        features: tokens,
        context_variant: variant,
        context_before: before,
        context_after: after,
        query: String::new(),
        constraints: PromptConstraints::default(),
    };
    spec.compose_query();
    Ok(spec)
}

/// Adds the several-lines request, the rename instructions and the
/// dense-format clause. Idempotent.
pub fn optimize_prompt(prompt: &PromptSpec) -> PromptSpec {
    let mut out = prompt.clone();
    out.constraints.several_lines = true;
    out.constraints.dense = true;
    out.compose_query();
    out
}

/// Replaces the rename map and recomposes the query.
pub fn with_renames(prompt: &PromptSpec, renames: BTreeMap<String, String>) -> PromptSpec {
    let mut out = prompt.clone();
    out.constraints.rename_map = renames;
    out.compose_query();
    out
}

pub trait GeneratorClient: Send + Sync {
    fn id(&self) -> String;
    fn is_deterministic(&self) -> bool;
    fn generate(&self, prompt: &PromptSpec) -> Result<String, GenerationError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub prompt_hash: String,
    #[serde(default)]
    pub language: Language,
}

/// A dead-code fragment and the features it was asked to carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snippet {
    pub lines: Vec<String>,
    /// Requested features present in the text.
    pub keywords: Vec<String>,
    /// Every feature the prompt asked for.
    pub requested: Vec<String>,
    pub suffix_map: BTreeMap<String, String>,
    pub provenance: Provenance,
}

impl Snippet {
    pub fn text(&self) -> String {
        self.lines.join("\n")
    }

    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    pub fn is_over_length(&self) -> bool {
        self.lines.len() > MAX_SNIPPET_LINES
    }

    pub fn language(&self) -> Language {
        self.provenance.language
    }

    pub fn tokens(&self) -> Result<Vec<String>, LexError> {
        lexer::tokenize(&self.text(), self.language())
    }

    /// Keyword categories covered, in category order.
    pub fn categories(&self) -> BTreeSet<KeywordCategory> {
        self.keywords.iter().map(|k| categorize(k)).collect()
    }

    /// Hash of the whitespace-normalized text, used for deduplication.
    pub fn normalized_hash(&self) -> String {
        let norm: Vec<String> = self
            .lines
            .iter()
            .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
            .filter(|l| !l.is_empty())
            .collect();
        hex::encode(Sha256::digest(norm.join("\n").as_bytes()))
    }

    /// Builds a snippet from literal text, as if generated for `requested`.
    pub fn from_text(text: &str, requested: &[&str], language: Language) -> Result<Snippet, GenerationError> {
        let requested: Vec<String> = requested.iter().map(|s| s.to_string()).collect();
        parse_output(
            text,
            &requested,
            Provenance {
                generator: "manual".into(),
                prompt_hash: String::new(),
                language,
            },
        )
    }
}

fn parse_output(raw: &str, requested: &[String], provenance: Provenance) -> Result<Snippet, GenerationError> {
    let lines: Vec<String> = raw
        .lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .map(|l| l.trim_end().to_string())
        .filter(|l| !l.trim().is_empty())
        .collect();
    if lines.is_empty() {
        return Err(GenerationError::Unparseable {
            reason: "no code lines".into(),
            raw: raw.to_string(),
        });
    }
    let tokens = lexer::tokenize(&lines.join("\n"), provenance.language).map_err(|e| GenerationError::Unparseable {
        reason: e.to_string(),
        raw: raw.to_string(),
    })?;
    let present: BTreeSet<&str> = tokens.iter().map(String::as_str).collect();
    let keywords = requested
        .iter()
        .filter(|k| present.contains(k.as_str()))
        .cloned()
        .collect();
    Ok(Snippet {
        lines,
        keywords,
        requested: requested.to_vec(),
        suffix_map: BTreeMap::new(),
        provenance,
    })
}

/// Asks `client` for code and parses it into a [`Snippet`]. Over-length
/// output is kept; [`Snippet::is_over_length`] flags it.
pub fn generate_snippet(client: &dyn GeneratorClient, prompt: &PromptSpec) -> Result<Snippet, GenerationError> {
    let raw = client.generate(prompt)?;
    parse_output(
        &raw,
        &prompt.features,
        Provenance {
            generator: client.id(),
            prompt_hash: prompt.hash(),
            language: prompt.language,
        },
    )
}

/// Names that belong to the language runtime rather than the program, so
/// sharing them never creates a data dependency.
const LIBRARY_NAMES: &[&str] = &[
    "NULL",
    "EOF",
    "FILE",
    "stdin",
    "stdout",
    "stderr",
    "errno",
    "size_t",
    "ssize_t",
    "ptrdiff_t",
    "uint8_t",
    "uint16_t",
    "uint32_t",
    "uint64_t",
    "int8_t",
    "int16_t",
    "int32_t",
    "int64_t",
    "uintptr_t",
    "intptr_t",
    "bool",
    "true",
    "false",
    "main",
    "strstr",
    "strchr",
    "strrchr",
    "strcmp",
    "strncmp",
    "strlen",
    "strnlen",
    "strcpy",
    "strncpy",
    "strcat",
    "strncat",
    "strdup",
    "strtok",
    "memcpy",
    "memmove",
    "memset",
    "memcmp",
    "memchr",
    "malloc",
    "calloc",
    "realloc",
    "free",
    "exit",
    "abort",
    "assert",
    "atoi",
    "atol",
    "strtol",
    "strtoul",
    "abs",
    "rand",
    "srand",
    "String",
    "System",
    "Object",
    "Integer",
    "Math",
];

pub fn is_library_name(word: &str) -> bool {
    LIBRARY_NAMES.contains(&word) || crate::featureid::categorize(word) == KeywordCategory::InputOutput
}

/// Program-defined identifiers appearing in `source`.
pub fn user_identifiers(source: &str, language: Language) -> Result<BTreeSet<String>, LexError> {
    Ok(lexer::lex_code(source, language)?
        .into_iter()
        .filter(|t| t.kind == TokenKind::Identifier && !is_library_name(t.text))
        .map(|t| t.text.to_string())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValidationFailure {
    Lex(String),
    Unbalanced(String),
    IllegalEnding(String),
    TooManyLines { lines: usize, max: usize },
    DataDependency(Vec<String>),
    MissingKeywords(Vec<String>),
    Compiler(String),
}

impl fmt::Display for ValidationFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationFailure::Lex(m) => write!(f, "does not lex: {m}"),
            ValidationFailure::Unbalanced(m) => write!(f, "unbalanced delimiters: {m}"),
            ValidationFailure::IllegalEnding(t) => write!(f, "ends with {t:?} instead of ';' or '}}'"),
            ValidationFailure::TooManyLines { lines, max } => write!(f, "{lines} lines exceeds {max}"),
            ValidationFailure::DataDependency(ids) => write!(f, "shares identifiers with host: {}", ids.join(", ")),
            ValidationFailure::MissingKeywords(ks) => write!(f, "missing requested keywords: {}", ks.join(", ")),
            ValidationFailure::Compiler(m) => write!(f, "compiler rejected snippet: {m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub failures: Vec<ValidationFailure>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            return f.write_str("valid");
        }
        let parts: Vec<String> = self.failures.iter().map(|x| x.to_string()).collect();
        f.write_str(&parts.join("; "))
    }
}

fn check_delimiters(tokens: &[lexer::Token<'_>]) -> Result<(), String> {
    let mut stack = Vec::new();
    for t in tokens {
        match t.text {
            "(" | "[" | "{" if t.kind == TokenKind::Punct => stack.push(t.text),
            ")" | "]" | "}" if t.kind == TokenKind::Punct => {
                let want = match t.text {
                    ")" => "(",
                    "]" => "[",
                    _ => "{",
                };
                match stack.pop() {
                    Some(open) if open == want => {}
                    Some(open) => return Err(format!("{open:?} closed by {:?} at byte {}", t.text, t.start)),
                    None => return Err(format!("unmatched {:?} at byte {}", t.text, t.start)),
                }
            }
            _ => {}
        }
    }
    match stack.last() {
        Some(open) => Err(format!("{} unclosed, innermost {open:?}", stack.len())),
        None => Ok(()),
    }
}

/// Lexical checks standing in for compilation and dependency analysis:
/// balanced delimiters with a legal final token, at most
/// [`MAX_SNIPPET_LINES`] lines, no shared program identifiers with the host,
/// and every requested keyword present.
pub fn validate_snippet(snippet: &Snippet, host: &CodeSample) -> ValidationReport {
    let mut failures = Vec::new();
    let text = snippet.text();
    let language = snippet.language();
    match lexer::lex_code(&text, language) {
        Err(e) => failures.push(ValidationFailure::Lex(e.to_string())),
        Ok(tokens) => {
            if let Err(m) = check_delimiters(&tokens) {
                failures.push(ValidationFailure::Unbalanced(m));
            }
            match tokens.last() {
                Some(t) if t.text == ";" || t.text == "}" => {}
                Some(t) => failures.push(ValidationFailure::IllegalEnding(t.text.to_string())),
                None => failures.push(ValidationFailure::IllegalEnding(String::new())),
            }
            let present: BTreeSet<&str> = tokens.iter().map(|t| t.normalized()).collect();
            let missing: Vec<String> = snippet
                .requested
                .iter()
                .filter(|k| !present.contains(k.as_str()))
                .cloned()
                .collect();
            if !missing.is_empty() {
                failures.push(ValidationFailure::MissingKeywords(missing));
            }
        }
    }
    if snippet.lines.len() > MAX_SNIPPET_LINES {
        failures.push(ValidationFailure::TooManyLines {
            lines: snippet.lines.len(),
            max: MAX_SNIPPET_LINES,
        });
    }
    match (
        user_identifiers(&text, language),
        user_identifiers(&host.source, host.language),
    ) {
        (Ok(mine), Ok(theirs)) => {
            let shared: Vec<String> = mine.intersection(&theirs).cloned().collect();
            if !shared.is_empty() {
                failures.push(ValidationFailure::DataDependency(shared));
            }
        }
        (_, Err(e)) => failures.push(ValidationFailure::Lex(format!("host {}: {e}", host.id))),
        (Err(_), _) => {}
    }
    ValidationReport { failures }
}

/// Optional syntax check through an external C compiler.
#[derive(Debug, Clone)]
pub struct ExternalCompiler {
    pub program: String,
}

impl ExternalCompiler {
    /// The first of `cc`, `gcc`, `clang` that runs, if any.
    pub fn detect() -> Option<Self> {
        ["cc", "gcc", "clang"].iter().find_map(|p| {
            Command::new(p)
                .arg("--version")
                .output()
                .ok()
                .filter(|o| o.status.success())
                .map(|_| ExternalCompiler { program: p.to_string() })
        })
    }

    /// Compiles the snippet inside an empty function with `-fsyntax-only`.
    pub fn check(&self, snippet: &Snippet) -> Result<(), String> {
        let dir = std::env::temp_dir().join(format!("snippet-check-{}", std::process::id()));
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let file = dir.join(format!("{}.c", &snippet.normalized_hash()[..16]));
        let unit = format!(
            "#include <stdio.h>\n#include <string.h>\n#include <stdlib.h>\nvoid snippet_host(void) {{\n{}\n}}\n",
            snippet.text()
        );
        std::fs::write(&file, unit).map_err(|e| e.to_string())?;
        let out = Command::new(&self.program)
            .args(["-fsyntax-only", "-w", "-std=gnu11"])
            .arg(&file)
            .output()
            .map_err(|e| e.to_string());
        let _ = std::fs::remove_file(&file);
        let out = out?;
        if out.status.success() {
            Ok(())
        } else {
            Err(String::from_utf8_lossy(&out.stderr)
                .lines()
                .next()
                .unwrap_or("failed")
                .to_string())
        }
    }
}

/// [`validate_snippet`] plus an external compiler pass.
pub fn validate_snippet_with(snippet: &Snippet, host: &CodeSample, compiler: &ExternalCompiler) -> ValidationReport {
    let mut report = validate_snippet(snippet, host);
    if let Err(m) = compiler.check(snippet) {
        report.failures.push(ValidationFailure::Compiler(m));
    }
    report
}
