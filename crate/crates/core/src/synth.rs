//! Seeded synthetic C corpora with known class signals.
//!
//! Two generators live here. [`memcpy_corpus`] is a minimal separable corpus
//! where only vulnerable functions call `memcpy`. [`benchmark_corpus`] mimics
//! a small vulnerability dataset: vulnerable functions use unchecked copies,
//! safe functions lean on `static`, `const`, `sizeof` and `snprintf`. The
//! matching [`benchmark_victim_weights`] give the bag-of-tokens victim whose
//! attack surface is known in closed form.

use crate::corpus::{CodeSample, Label, Language};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

const NAMES: &[&str] = &[
    "buf", "len", "ctx", "node", "count", "item", "data", "size", "pos", "out",
];

const FILLER: &[&str] = &[
    "{a} = {b} + 1;",
    "{a}++;",
    "if ({a} > {b}) {a} = {b};",
    "while ({a} > 0) {a}--;",
    "{a} = {b} * 2;",
    "{a} = process({b});",
    "if ({a} == 0) goto done;",
    "{a} = {b} - {a};",
];

fn filler_line<R: Rng>(rng: &mut R) -> String {
    let a = NAMES.choose(rng).unwrap();
    let b = NAMES.choose(rng).unwrap();
    FILLER.choose(rng).unwrap().replace("{a}", a).replace("{b}", b)
}

fn function(name: &str, body: &[String]) -> String {
    let mut out = format!("int {name}(char *buf, int len)\n{{\n    int count = 0, pos = 0, size = len;\n");
    for line in body {
        out.push_str("    ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str("done:\n    return count;\n}\n");
    out
}

fn labeled(id: String, source: String, label: Label) -> CodeSample {
    CodeSample::new(id, source, label, Language::C)
        .tokenized()
        .expect("synthetic sources lex")
}

/// `n` functions, alternating labels; vulnerable ones contain a `memcpy` call.
pub fn memcpy_corpus(n: usize, seed: u64) -> Vec<CodeSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 {
                Label::Vulnerable
            } else {
                Label::Nonvulnerable
            };
            let mut body: Vec<String> = (0..rng.gen_range(3..7)).map(|_| filler_line(&mut rng)).collect();
            if label.is_vulnerable() {
                let at = rng.gen_range(0..=body.len());
                body.insert(at, "memcpy(buf, data, len);".into());
            }
            labeled(format!("mc-{i:03}"), function(&format!("fn_{i}"), &body), label)
        })
        .collect()
}

const VULN_LINES: &[&str] = &[
    "strcpy(buf, data);",
    "memcpy(out, buf, len);",
    "gets(buf);",
    "strcat(buf, data);",
    "sprintf(buf, \"%s\", data);",
];

const SAFE_LINES: &[&str] = &[
    "static const int limit = 64;",
    "if (len >= (int)sizeof(buf)) return -1;",
    "snprintf(buf, sizeof(buf), \"%s\", data);",
    "const char *end = buf + size;",
    "static int calls = 0;",
    "size = sizeof(*node);",
];

/// Balanced benchmark corpus of `2 * per_class` functions.
pub fn benchmark_corpus(per_class: usize, seed: u64) -> Vec<CodeSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * per_class);
    for i in 0..2 * per_class {
        let label = if i % 2 == 0 {
            Label::Vulnerable
        } else {
            Label::Nonvulnerable
        };
        let mut body: Vec<String> = (0..rng.gen_range(3..6)).map(|_| filler_line(&mut rng)).collect();
        let (pool, picks) = if label.is_vulnerable() {
            (VULN_LINES, rng.gen_range(1..=2))
        } else {
            (SAFE_LINES, rng.gen_range(2..=3))
        };
        for line in pool.choose_multiple(&mut rng, picks) {
            let at = rng.gen_range(0..=body.len());
            body.insert(at, (*line).to_string());
        }
        out.push(labeled(
            format!("bench-{i:04}"),
            function(&format!("handler_{i}"), &body),
            label,
        ));
    }
    out
}

/// Token weights of the reference bag-of-tokens victim for [`benchmark_corpus`].
pub fn benchmark_victim_weights() -> (BTreeMap<String, f64>, f64) {
    let weights = [
        ("strcpy", 2.2),
        ("memcpy", 2.2),
        ("gets", 2.6),
        ("strcat", 2.0),
        ("sprintf", 2.0),
        ("static", -0.9),
        ("const", -0.7),
        ("sizeof", -0.8),
        ("snprintf", -1.2),
    ];
    (weights.iter().map(|(t, w)| (t.to_string(), *w)).collect(), -0.4)
}
