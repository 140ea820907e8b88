use super::{user_identifiers, Snippet};
use crate::corpus::lexer::{self, LexError, TokenKind};
use crate::corpus::CodeSample;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

const MAX_ATTEMPTS: usize = 3;

#[derive(Debug, Error)]
pub enum SuffixError {
    #[error("cannot lex: {0}")]
    Lex(#[from] LexError),
    #[error("identifier {identifier:?} still collides after {attempts} suffix attempts")]
    Unresolved { identifier: String, attempts: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Role {
    Var,
    Loop,
    Condition,
}

impl Role {
    fn suffix(self) -> &'static str {
        match self {
            Role::Condition => "_condition",
            Role::Loop => "_loop",
            Role::Var => "_var",
        }
    }
}

/// Strongest syntactic role of each identifier: inside an `if`/`while`/
/// `switch` header, inside a `for` header, or anywhere else.
fn roles(tokens: &[lexer::Token<'_>]) -> BTreeMap<String, Role> {
    let mut out: BTreeMap<String, Role> = BTreeMap::new();
    let mut depth = 0usize;
    let mut header: Option<(Role, usize)> = None;
    for (i, t) in tokens.iter().enumerate() {
        match (t.kind, t.text) {
            (TokenKind::Punct, "(") => {
                if header.is_none() && i > 0 {
                    header = match tokens[i - 1].text {
                        "if" | "while" | "switch" => Some((Role::Condition, depth)),
                        "for" => Some((Role::Loop, depth)),
                        _ => None,
                    };
                }
                depth += 1;
            }
            (TokenKind::Punct, ")") => {
                depth = depth.saturating_sub(1);
                if matches!(header, Some((_, d)) if d == depth) {
                    header = None;
                }
            }
            (TokenKind::Identifier, name) => {
                let role = header.map_or(Role::Var, |(r, _)| r);
                let slot = out.entry(name.to_string()).or_insert(role);
                *slot = (*slot).max(role);
            }
            _ => {}
        }
    }
    out
}

/// Renames every snippet identifier that also appears in `host` by appending
/// a role suffix, retrying with a numeric tag when the suffixed name is taken.
/// Only identifier tokens are rewritten; literals and comments are untouched.
pub fn apply_suffixes(snippet: &Snippet, host: &CodeSample) -> Result<Snippet, SuffixError> {
    let language = snippet.language();
    let text = snippet.text();
    let host_ids = user_identifiers(&host.source, host.language)?;
    let mine = user_identifiers(&text, language)?;
    let colliding: Vec<&String> = mine.intersection(&host_ids).collect();
    if colliding.is_empty() {
        return Ok(snippet.clone());
    }
    let tokens = lexer::lex_code(&text, language)?;
    let all_snippet_words: BTreeSet<&str> = tokens
        .iter()
        .filter(|t| t.kind == TokenKind::Identifier)
        .map(|t| t.text)
        .collect();
    let role_of = roles(&tokens);

    let mut renames: BTreeMap<String, String> = BTreeMap::new();
    let mut taken: BTreeSet<String> = all_snippet_words.iter().map(|s| s.to_string()).collect();
    for name in colliding {
        let suffix = role_of.get(name).copied().unwrap_or(Role::Var).suffix();
        let chosen = (1..=MAX_ATTEMPTS)
            .map(|attempt| match attempt {
                1 => format!("{name}{suffix}"),
                n => format!("{name}{suffix}{n}"),
            })
            .find(|c| !host_ids.contains(c) && !taken.contains(c))
            .ok_or_else(|| SuffixError::Unresolved {
                identifier: name.clone(),
                attempts: MAX_ATTEMPTS,
            })?;
        taken.insert(chosen.clone());
        renames.insert(name.clone(), chosen);
    }

    let mut rewritten = String::with_capacity(text.len() + 16 * renames.len());
    let mut last = 0;
    for t in &tokens {
        if t.kind == TokenKind::Identifier {
            if let Some(new) = renames.get(t.text) {
                rewritten.push_str(&text[last..t.start]);
                rewritten.push_str(new);
                last = t.end;
            }
        }
    }
    rewritten.push_str(&text[last..]);

    let remap = |k: &String| renames.get(k).cloned().unwrap_or_else(|| k.clone());
    let mut suffix_map: BTreeMap<String, String> = snippet
        .suffix_map
        .iter()
        .map(|(orig, cur)| (orig.clone(), remap(cur)))
        .collect();
    let already: BTreeSet<String> = snippet.suffix_map.values().cloned().collect();
    for (from, to) in &renames {
        if !already.contains(from) {
            suffix_map.insert(from.clone(), to.clone());
        }
    }
    Ok(Snippet {
        lines: rewritten.lines().map(str::to_string).collect(),
        keywords: snippet.keywords.iter().map(remap).collect(),
        requested: snippet.requested.iter().map(remap).collect(),
        suffix_map,
        provenance: snippet.provenance.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Label, Language};

    fn host(src: &str) -> CodeSample {
        CodeSample::new("h", src, Label::Vulnerable, Language::C)
    }

    fn snip(text: &str) -> Snippet {
        Snippet::from_text(text, &[], Language::C).unwrap()
    }

    #[test]
    fn conditional_use_gets_condition_suffix() {
        let h = host("int f(int val) { return val; }");
        let s = apply_suffixes(&snip("int val = 2;\nif (val > 3) { val = 0; }"), &h).unwrap();
        assert_eq!(
            s.lines,
            [
                "int val_condition = 2;",
                "if (val_condition > 3) { val_condition = 0; }"
            ]
        );
        assert_eq!(s.suffix_map["val"], "val_condition");
    }

    #[test]
    fn loop_and_plain_roles() {
        let h = host("void f() { int i, n; }");
        let s = apply_suffixes(&snip("int i;\nfor (i = 0; i < 2; i++) { }\nint n = 1;"), &h).unwrap();
        assert_eq!(s.suffix_map["i"], "i_loop");
        assert_eq!(s.suffix_map["n"], "n_var");
    }

    #[test]
    fn no_overlap_is_unchanged() {
        let h = host("void f() { int q; }");
        let s = snip("int zz = 0;");
        assert_eq!(apply_suffixes(&s, &h).unwrap(), s);
    }

    #[test]
    fn keywords_and_strings_untouched() {
        let h = host("void f() { int val; for (;;) {} }");
        let s = apply_suffixes(&snip("char *val = \"val\"; /* val */"), &h).unwrap();
        assert_eq!(s.lines, ["char *val_var = \"val\"; /* val */"]);
    }

    #[test]
    fn numbered_retries_then_error() {
        let h = host("void f() { int a, a_var; }");
        let s = apply_suffixes(&snip("int a = 1;"), &h).unwrap();
        assert_eq!(s.suffix_map["a"], "a_var2");

        let h = host("void f() { int a, a_var, a_var2, a_var3; }");
        assert!(matches!(
            apply_suffixes(&snip("int a = 1;"), &h),
            Err(SuffixError::Unresolved { attempts: 3, .. })
        ));
    }

    #[test]
    fn requested_features_follow_renames() {
        let h = host("void f() { int val; }");
        let s = Snippet::from_text("int val = 1;", &["val", "int"], Language::C).unwrap();
        let out = apply_suffixes(&s, &h).unwrap();
        assert_eq!(out.requested, ["val_var", "int"]);
        assert_eq!(out.keywords, ["val_var", "int"]);
    }

    #[test]
    fn resuffixing_composes_the_map() {
        let s = apply_suffixes(&snip("int val = 1;"), &host("void f() { int val; }")).unwrap();
        let s = apply_suffixes(&s, &host("void g() { int val_var; }")).unwrap();
        assert_eq!(s.suffix_map.len(), 1);
        assert_eq!(s.suffix_map["val"], "val_var_var");
    }
}
