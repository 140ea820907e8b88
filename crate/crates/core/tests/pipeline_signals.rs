//! The surrogate, SVM and attention ranking recover planted class signals.

use evasion_core::corpus::{build_vocab, split, CodeSample, Label, Language, DEFAULT_FRACTIONS};
use evasion_core::featureid::rank_features;
use evasion_core::surrogate::{train, SurrogateConfig};
use evasion_core::svmcore::{encode_labels, important_samples, train_svm, SvmConfig};
use evasion_core::synth;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PLANTED: [&str; 6] = ["static", "const", "strstr", "strchr", "val", "sscanf"];

const SAFE: &[&str] = &[
    "static const char *sep = \"=\";",
    "const char *hit = strstr(line, sep);",
    "char *colon = strchr(line, ':');",
    "if (hit && sscanf(hit + 1, \"%d\", &val) == 1) return val;",
    "static int val = 0;",
    "val = strchr(line, ';') != 0;",
];

const UNSAFE: &[&str] = &[
    "strcpy(line, data);",
    "gets(line);",
    "memcpy(out, line, len);",
    "strcat(line, data);",
];

const FILLER: &[&str] = &[
    "len = len + 1;",
    "pos++;",
    "if (pos > len) pos = len;",
    "out = process(len);",
    "len = pos * 2;",
];

fn corpus(n: usize, seed: u64) -> Vec<CodeSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let vulnerable = i % 2 == 0;
            let mut body: Vec<&str> = (0..rng.gen_range(2..5))
                .map(|_| *FILLER.choose(&mut rng).unwrap())
                .collect();
            let (lines, picks) = if vulnerable { (UNSAFE, 1..=2) } else { (SAFE, 2..=3) };
            let k = rng.gen_range(picks);
            for l in lines.choose_multiple(&mut rng, k) {
                let at = rng.gen_range(0..=body.len());
                body.insert(at, l);
            }
            let src = format!(
                "int parse_{i}(char *line, int len)\n{{\n    int pos = 0, out = 0;\n    {}\n    return out;\n}}\n",
                body.join("\n    ")
            );
            let label = if vulnerable {
                Label::Vulnerable
            } else {
                Label::Nonvulnerable
            };
            CodeSample::new(format!("p{i:03}"), src, label, Language::C)
                .tokenized()
                .unwrap()
        })
        .collect()
}

fn config() -> SurrogateConfig {
    SurrogateConfig {
        embed_dim: 12,
        hidden_dim: 12,
        key_dim: 12,
        value_dim: 12,
        epochs: 12,
        learning_rate: 0.02,
        batch_size: 4,
        seed: 8,
        ..SurrogateConfig::default()
    }
}

#[test]
fn planted_tokens_lead_the_ranking() {
    let samples = corpus(120, 4);
    let s = split(&samples, 4, DEFAULT_FRACTIONS).unwrap();
    let vocab = build_vocab(&s.train, 1);
    let model = train(&s, &vocab, &config()).unwrap();

    let probe = CodeSample::new(
        "probe",
        "static int parse_val(const char *line)\n{\n    const char *p = strstr(line, \"=\");\n    char *q = strchr(line, ':');\n    int val = 0;\n    if (p && q && sscanf(p + 1, \"%d\", &val) == 1)\n        return val;\n    return -1;\n}\n",
        Label::Nonvulnerable,
        Language::C,
    )
    .tokenized()
    .unwrap();
    assert!(model.predict_proba(&probe).unwrap() < 0.5);
    let only = evasion_core::svmcore::ImportantSampleSet {
        members: vec![evasion_core::svmcore::ImportantSample {
            index: 0,
            id: "probe".into(),
            alpha: 1.0,
            representation: model.final_representation(&probe).unwrap(),
        }],
    };
    let ranked = rank_features(&model, &only, std::slice::from_ref(&probe), 10, 1).unwrap();
    let tokens: Vec<&str> = ranked.iter().map(|f| f.token.as_str()).collect();
    println!("ranking {tokens:?}");
    assert!(tokens[..3].iter().all(|t| PLANTED.contains(t)), "{tokens:?}");
}

#[test]
fn representations_separate_the_classes() {
    let samples = synth::benchmark_corpus(50, 6);
    let s = split(&samples, 6, DEFAULT_FRACTIONS).unwrap();
    let vocab = build_vocab(&s.train, 1);
    let model = train(&s, &vocab, &config()).unwrap();
    let reps: Vec<Vec<f64>> = s.train.iter().map(|x| model.final_representation(x).unwrap()).collect();
    let y = encode_labels(&s.train);
    let svm = train_svm(&reps, &y, &SvmConfig::default()).unwrap();
    let correct = reps
        .iter()
        .zip(&y)
        .filter(|(r, yi)| svm.decision(r) * **yi > 0.0)
        .count();
    assert!(correct as f64 >= 0.9 * reps.len() as f64, "{correct}/{}", reps.len());
    let important = important_samples(&svm, &s.train, &reps).unwrap();
    assert!(!important.is_empty());
    assert!(important
        .ids()
        .all(|id| s.train.iter().any(|x| x.id == id && x.label == Label::Nonvulnerable)));
}
