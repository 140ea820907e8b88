//! Lexical analysis for C, C++ and Java function bodies.
//!
//! The lexer is deliberately shallow: it knows enough to separate keywords,
//! identifiers, literals, operators and punctuation, and to skip comments.
//! Literals are normalized to the `NUM` / `STR` sentinels when tokens are
//! flattened for learning.

use super::Language;
use thiserror::Error;

/// Sentinel emitted for every numeric literal.
pub const NUM: &str = "NUM";
/// Sentinel emitted for every string or character literal.
pub const STR: &str = "STR";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LexError {
    #[error("unterminated string literal starting at byte offset {offset}")]
    UnterminatedString { offset: usize },
    #[error("unterminated character literal starting at byte offset {offset}")]
    UnterminatedChar { offset: usize },
    #[error("unterminated block comment starting at byte offset {offset}")]
    UnterminatedComment { offset: usize },
}

impl LexError {
    pub fn offset(&self) -> usize {
        match *self {
            LexError::UnterminatedString { offset }
            | LexError::UnterminatedChar { offset }
            | LexError::UnterminatedComment { offset } => offset,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Keyword,
    Identifier,
    Number,
    Str,
    Char,
    Operator,
    Punct,
    Comment,
}

/// A lexeme with its byte span in the original text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token<'a> {
    pub kind: TokenKind,
    pub text: &'a str,
    pub start: usize,
    pub end: usize,
}

impl Token<'_> {
    /// The normalized form used for vocabularies and victims.
    pub fn normalized(&self) -> &str {
        match self.kind {
            TokenKind::Number => NUM,
            TokenKind::Str | TokenKind::Char => STR,
            _ => self.text,
        }
    }

    pub fn is_word(&self) -> bool {
        matches!(self.kind, TokenKind::Keyword | TokenKind::Identifier)
    }
}

const C_KEYWORDS: &[&str] = &[
    "_Alignas",
    "_Alignof",
    "_Atomic",
    "_Bool",
    "_Complex",
    "_Generic",
    "_Imaginary",
    "_Noreturn",
    "_Static_assert",
    "_Thread_local",
    "auto",
    "break",
    "case",
    "char",
    "const",
    "continue",
    "default",
    "do",
    "double",
    "else",
    "enum",
    "extern",
    "float",
    "for",
    "goto",
    "if",
    "inline",
    "int",
    "long",
    "register",
    "restrict",
    "return",
    "short",
    "signed",
    "sizeof",
    "static",
    "struct",
    "switch",
    "typedef",
    "typeof",
    "union",
    "unsigned",
    "void",
    "volatile",
    "while",
];

const CPP_EXTRA_KEYWORDS: &[&str] = &[
    "alignas",
    "alignof",
    "bool",
    "catch",
    "class",
    "constexpr",
    "const_cast",
    "decltype",
    "delete",
    "dynamic_cast",
    "explicit",
    "false",
    "friend",
    "mutable",
    "namespace",
    "new",
    "noexcept",
    "nullptr",
    "operator",
    "private",
    "protected",
    "public",
    "reinterpret_cast",
    "static_assert",
    "static_cast",
    "template",
    "this",
    "thread_local",
    "throw",
    "true",
    "try",
    "typeid",
    "typename",
    "using",
    "virtual",
];

const JAVA_KEYWORDS: &[&str] = &[
    "abstract",
    "assert",
    "boolean",
    "break",
    "byte",
    "case",
    "catch",
    "char",
    "class",
    "const",
    "continue",
    "default",
    "do",
    "double",
    "else",
    "enum",
    "extends",
    "false",
    "final",
    "finally",
    "float",
    "for",
    "goto",
    "if",
    "implements",
    "import",
    "instanceof",
    "int",
    "interface",
    "long",
    "native",
    "new",
    "null",
    "package",
    "private",
    "protected",
    "public",
    "return",
    "short",
    "static",
    "strictfp",
    "super",
    "switch",
    "synchronized",
    "this",
    "throw",
    "throws",
    "transient",
    "true",
    "try",
    "var",
    "void",
    "volatile",
    "while",
];

/// Whether `word` is a reserved word of `language`.
pub fn is_keyword(word: &str, language: Language) -> bool {
    match language {
        Language::C => C_KEYWORDS.contains(&word),
        Language::Cpp => C_KEYWORDS.contains(&word) || CPP_EXTRA_KEYWORDS.contains(&word),
        Language::Java => JAVA_KEYWORDS.contains(&word),
    }
}

// Longest match first.
const OPERATORS: &[&str] = &[
    ">>>=", "<<=", ">>=", ">>>", "...", "->*", "->", "++", "--", "<<", ">>", "<=", ">=", "==", "!=", "&&", "||", "+=",
    "-=", "*=", "/=", "%=", "&=", "|=", "^=", "::", "##", "+", "-", "*", "/", "%", "=", "<", ">", "!", "~", "&", "|",
    "^", "?", ".",
];

const PUNCT: &[u8] = b"(){}[];,:#@";

fn is_ident_start(c: u8, language: Language) -> bool {
    c.is_ascii_alphabetic() || c == b'_' || (language == Language::Java && c == b'$')
}

fn is_ident_continue(c: u8, language: Language) -> bool {
    c.is_ascii_alphanumeric() || c == b'_' || (language == Language::Java && c == b'$')
}

/// Splits `source` into tokens, comments included.
pub fn lex(source: &str, language: Language) -> Result<Vec<Token<'_>>, LexError> {
    let bytes = source.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let kind = if c == b'/' && bytes.get(i + 1) == Some(&b'/') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            TokenKind::Comment
        } else if c == b'/' && bytes.get(i + 1) == Some(&b'*') {
            i += 2;
            loop {
                if i + 1 >= bytes.len() {
                    return Err(LexError::UnterminatedComment { offset: start });
                }
                if bytes[i] == b'*' && bytes[i + 1] == b'/' {
                    i += 2;
                    break;
                }
                i += 1;
            }
            TokenKind::Comment
        } else if c == b'"' || c == b'\'' {
            i += 1;
            loop {
                match bytes.get(i) {
                    None | Some(b'\n') => {
                        return Err(if c == b'"' {
                            LexError::UnterminatedString { offset: start }
                        } else {
                            LexError::UnterminatedChar { offset: start }
                        })
                    }
                    Some(b'\\') => i += 2,
                    Some(&q) if q == c => {
                        i += 1;
                        break;
                    }
                    Some(_) => i += 1,
                }
            }
            if c == b'"' {
                TokenKind::Str
            } else {
                TokenKind::Char
            }
        } else if c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            i += 1;
            while i < bytes.len() {
                let d = bytes[i];
                let exponent_sign = (d == b'+' || d == b'-') && matches!(bytes[i - 1], b'e' | b'E' | b'p' | b'P');
                if exponent_sign || d.is_ascii_alphanumeric() || d == b'.' || d == b'_' || d == b'\'' {
                    i += 1;
                } else {
                    break;
                }
            }
            TokenKind::Number
        } else if is_ident_start(c, language) {
            while i < bytes.len() && is_ident_continue(bytes[i], language) {
                i += 1;
            }
            if is_keyword(&source[start..i], language) {
                TokenKind::Keyword
            } else {
                TokenKind::Identifier
            }
        } else if PUNCT.contains(&c) && !(c == b':' && bytes.get(i + 1) == Some(&b':')) {
            i += 1;
            TokenKind::Punct
        } else if let Some(op) = OPERATORS.iter().find(|op| source[i..].starts_with(**op)) {
            i += op.len();
            TokenKind::Operator
        } else {
            // Anything else (stray bytes, non-ASCII) becomes a one-character token.
            let ch = source[i..].chars().next().map_or(1, char::len_utf8);
            i += ch;
            TokenKind::Punct
        };
        tokens.push(Token {
            kind,
            text: &source[start..i],
            start,
            end: i,
        });
    }
    Ok(tokens)
}

/// Lexes and drops comments.
pub fn lex_code(source: &str, language: Language) -> Result<Vec<Token<'_>>, LexError> {
    let mut tokens = lex(source, language)?;
    tokens.retain(|t| t.kind != TokenKind::Comment);
    Ok(tokens)
}

/// Deterministic token stream with literals normalized and comments removed.
pub fn tokenize(source: &str, language: Language) -> Result<Vec<String>, LexError> {
    Ok(lex_code(source, language)?
        .iter()
        .map(|t| t.normalized().to_string())
        .collect())
}

/// True for tokens that carry lexical content usable as a generation keyword.
pub fn is_word_token(token: &str) -> bool {
    token != NUM
        && token != STR
        && token
            .bytes()
            .next()
            .is_some_and(|c| c.is_ascii_alphabetic() || c == b'_' || c == b'$')
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s, Language::C).unwrap()
    }

    #[test]
    fn declaration() {
        assert_eq!(
            toks("static const char *a = NULL;"),
            ["static", "const", "char", "*", "a", "=", "NULL", ";"]
        );
    }

    #[test]
    fn literals_are_normalized() {
        assert_eq!(
            toks(r#"x = "abc"; y = 42;"#),
            ["x", "=", "STR", ";", "y", "=", "NUM", ";"]
        );
        assert_eq!(
            toks("c = 'q'; d = 1.5e-3f; h = 0x1F;"),
            ["c", "=", "STR", ";", "d", "=", "NUM", ";", "h", "=", "NUM", ";"]
        );
    }

    #[test]
    fn comments_are_dropped() {
        assert_eq!(
            toks("a /* b */ = 1; // trailing\nb++;"),
            ["a", "=", "NUM", ";", "b", "++", ";"]
        );
    }

    #[test]
    fn operators_use_longest_match() {
        assert_eq!(toks("a <<= b->c >= d"), ["a", "<<=", "b", "->", "c", ">=", "d"]);
        assert_eq!(toks("x ... y"), ["x", "...", "y"]);
    }

    #[test]
    fn escaped_quotes_stay_inside_literals() {
        assert_eq!(
            toks(r#"s = "a\"b"; t = '\'';"#),
            ["s", "=", "STR", ";", "t", "=", "STR", ";"]
        );
    }

    #[test]
    fn figure_excerpt_tokens() {
        let src = r#"static int parse_option(const char *line) {
    const char *val = strstr(line, "=");
    if (val == NULL || strchr(val, ';') != NULL)
        return -1;
    sscanf(val + 1, "%d", &level);
    return 0;
}"#;
        let t = toks(src);
        for want in ["static", "const", "strstr", "strchr", "val", "sscanf"] {
            assert!(t.iter().any(|x| x == want), "missing {want}");
        }
    }

    #[test]
    fn unterminated_literals_report_offsets() {
        assert_eq!(
            tokenize("x = \"abc", Language::C),
            Err(LexError::UnterminatedString { offset: 4 })
        );
        assert_eq!(
            tokenize("x = 1; /* open", Language::C),
            Err(LexError::UnterminatedComment { offset: 7 })
        );
        assert_eq!(tokenize("c = 'a", Language::C).unwrap_err().offset(), 4);
    }

    #[test]
    fn java_keywords_and_dollar_identifiers() {
        let t = tokenize("final int $x = this.y;", Language::Java).unwrap();
        assert_eq!(t, ["final", "int", "$x", "=", "this", ".", "y", ";"]);
        let kinds: Vec<_> = lex_code("final x", Language::Java)
            .unwrap()
            .iter()
            .map(|t| t.kind)
            .collect();
        assert_eq!(kinds, [TokenKind::Keyword, TokenKind::Identifier]);
        // `final` is an ordinary identifier in C.
        assert_eq!(lex_code("final", Language::C).unwrap()[0].kind, TokenKind::Identifier);
    }

    #[test]
    fn cpp_scope_operator() {
        assert_eq!(
            tokenize("std::size_t n;", Language::Cpp).unwrap(),
            ["std", "::", "size_t", "n", ";"]
        );
    }

    #[test]
    fn word_tokens() {
        assert!(is_word_token("memcpy"));
        assert!(is_word_token("_x"));
        assert!(!is_word_token("NUM"));
        assert!(!is_word_token("STR"));
        assert!(!is_word_token("->"));
        assert!(!is_word_token(";"));
    }
}
