use super::{is_library_name, GenerationError, GeneratorClient, PromptSpec};
use crate::featureid::{categorize, KeywordCategory};

/// Bumped whenever template output changes.
pub const TEMPLATE_VERSION: u32 = 1;

const NAMES: [[&str; 6]; 4] = [
    ["a_chan", "b_const", "a_rray", "c_node", "d_slot", "e_tmp"],
    ["queue_item", "p_project", "q_link", "r_mark", "s_cell", "t_step"],
    ["m_pool", "n_ring", "o_pair", "k_flag", "j_span", "h_mask"],
    ["x_frame", "y_tick", "z_hold", "w_gate", "u_seed", "v_tail"],
];

const STORAGE: &[&str] = &["static", "extern", "register", "auto", "_Thread_local", "thread_local"];
const QUALIFIERS: &[&str] = &["const", "volatile"];
const BASE_TYPES: &[&str] = &[
    "int", "char", "float", "double", "short", "long", "signed", "unsigned", "_Bool", "bool", "boolean", "byte",
];

/// Deterministic template generator: output depends only on the requested
/// features, the context variant, the prompt constraints and
/// [`TEMPLATE_VERSION`].
#[derive(Debug, Clone, Default)]
pub struct OfflineGenerator;

struct Namer<'a> {
    variant: usize,
    next: usize,
    prompt: &'a PromptSpec,
    buf: Option<String>,
    num: Option<String>,
}

impl Namer<'_> {
    fn fresh(&mut self) -> String {
        let pool = &NAMES[self.variant % NAMES.len()];
        let base = pool[self.next % pool.len()];
        let round = self.next / pool.len();
        self.next += 1;
        let name = if round == 0 {
            base.to_string()
        } else {
            format!("{base}{round}")
        };
        self.prompt.constraints.rename_map.get(&name).cloned().unwrap_or(name)
    }

    /// Shared scratch `char[16]` buffer.
    fn buf(&mut self) -> String {
        if self.buf.is_none() {
            self.buf = Some(self.fresh());
        }
        self.buf.clone().unwrap()
    }

    /// Shared scratch `int`.
    fn num(&mut self) -> String {
        if self.num.is_none() {
            self.num = Some(self.fresh());
        }
        self.num.clone().unwrap()
    }
}

/// A statement plus how it reads when spread out.
struct Fragment {
    dense: String,
    spread: Vec<String>,
}

impl Fragment {
    fn line(s: String) -> Self {
        Fragment {
            spread: vec![s.clone()],
            dense: s,
        }
    }

    /// `head { body } tail` compound statement.
    fn block(head: String, body: &[String], tail: &str) -> Self {
        let dense = if body.is_empty() {
            format!("{head} {{ }}{tail}")
        } else {
            format!("{head} {{ {} }}{tail}", body.join(" "))
        };
        let mut spread = vec![format!("{head} {{")];
        spread.extend(body.iter().map(|b| format!("    {b}")));
        spread.push(format!("}}{tail}"));
        Fragment { dense, spread }
    }
}

fn storage_ok_with_init(storage: &str) -> bool {
    storage != "extern"
}

fn init_for(ty: &str) -> &'static str {
    match ty {
        "float" | "double" => "0.0",
        "boolean" => "false",
        _ => "0",
    }
}

fn declaration(storage: Option<&str>, qualifiers: &[&str], ty: &str, name: &str) -> String {
    let mut parts: Vec<&str> = Vec::new();
    parts.extend(storage);
    parts.extend(qualifiers.iter().copied());
    parts.push(ty);
    let head = parts.join(" ");
    match storage {
        Some(s) if !storage_ok_with_init(s) => format!("{head} {name};"),
        _ => format!("{head} {name} = {};", init_for(ty)),
    }
}

fn io_call(token: &str, n: &mut Namer<'_>) -> String {
    match token {
        "printf" => "printf(\"%d\\n\", 0)".to_string(),
        "puts" => "puts(\"\")".to_string(),
        "scanf" => format!("scanf(\"%d\", &{})", n.num()),
        "sscanf" => format!("sscanf(\"0\", \"%d\", &{})", n.num()),
        "fscanf" => format!("fscanf(stdin, \"%d\", &{})", n.num()),
        "fprintf" => "fprintf(stderr, \"%d\\n\", 0)".to_string(),
        "sprintf" => format!("sprintf({}, \"%d\", 0)", n.buf()),
        "snprintf" => {
            let b = n.buf();
            format!("snprintf({b}, sizeof({b}), \"%d\", 0)")
        }
        "gets" => format!("gets({})", n.buf()),
        "fgets" => {
            let b = n.buf();
            format!("fgets({b}, sizeof({b}), stdin)")
        }
        "fputs" => "fputs(\"\", stdout)".to_string(),
        "getchar" => "getchar()".to_string(),
        "putchar" => "putchar(0)".to_string(),
        "getc" | "fgetc" => format!("{token}(stdin)"),
        "putc" | "fputc" => format!("{token}(0, stdout)"),
        "fopen" | "fclose" => "fclose(fopen(\"\", \"r\"))".to_string(),
        "fread" | "fwrite" => format!("{token}({}, 1, 0, stdin)", n.buf()),
        "fflush" => "fflush(stdout)".to_string(),
        "perror" => "perror(\"\")".to_string(),
        other => format!("{other}(\"\")"),
    }
}

fn library_call(token: &str, n: &mut Namer<'_>) -> String {
    match token {
        "strstr" => "strstr(\"\", \"\")".to_string(),
        "strchr" | "strrchr" | "memchr" => format!("{token}(\"\", 0)"),
        "strlen" | "strdup" | "atoi" | "atol" => format!("{token}(\"0\")"),
        "strcmp" | "strcpy" | "strcat" => format!("{token}({}, \"\")", n.buf()),
        "strncmp" | "strncpy" | "strncat" | "memcpy" | "memmove" | "memcmp" => {
            format!("{token}({}, \"\", 0)", n.buf())
        }
        "memset" => format!("memset({}, 0, 0)", n.buf()),
        "malloc" | "free" => "free(malloc(0))".to_string(),
        "calloc" => "free(calloc(0, 1))".to_string(),
        "realloc" => "free(realloc(NULL, 0))".to_string(),
        "NULL" => "(void)NULL".to_string(),
        other => format!("(void){other}"),
    }
}

impl OfflineGenerator {
    fn fragments(prompt: &PromptSpec) -> Vec<Fragment> {
        let mut namer = Namer {
            variant: prompt.context_variant,
            next: 0,
            prompt,
            buf: None,
            num: None,
        };
        let feats: Vec<&str> = prompt.features.iter().map(String::as_str).collect();
        let has = |t: &str| feats.contains(&t);

        let mut decls: Vec<Fragment> = Vec::new();
        let mut body: Vec<Fragment> = Vec::new();

        // Storage classes, qualifiers and base types fold into one declaration.
        let storages: Vec<&str> = STORAGE.iter().copied().filter(|s| has(s)).collect();
        let qualifiers: Vec<&str> = QUALIFIERS.iter().copied().filter(|s| has(s)).collect();
        let types: Vec<&str> = BASE_TYPES.iter().copied().filter(|s| has(s)).collect();
        if !storages.is_empty() || !qualifiers.is_empty() || !types.is_empty() {
            let name = namer.fresh();
            let ty = types.first().copied().unwrap_or("int");
            decls.push(Fragment::line(declaration(
                storages.first().copied(),
                &qualifiers,
                ty,
                &name,
            )));
            for s in storages.iter().skip(1) {
                let n = namer.fresh();
                decls.push(Fragment::line(declaration(Some(s), &[], "int", &n)));
            }
            for t in types.iter().skip(1) {
                let n = namer.fresh();
                decls.push(Fragment::line(declaration(None, &[], t, &n)));
            }
        }

        for &tok in &feats {
            if STORAGE.contains(&tok) || QUALIFIERS.contains(&tok) || BASE_TYPES.contains(&tok) {
                continue;
            }
            let had = (namer.buf.is_some(), namer.num.is_some());
            let frag = match categorize(tok) {
                KeywordCategory::InputOutput => Some(Fragment::line(format!("if (0) {};", io_call(tok, &mut namer)))),
                KeywordCategory::ControlStatement => Some(match tok {
                    "for" => {
                        let n = namer.fresh();
                        Fragment::block(format!("for (int {n} = 0; {n} < 0; {n}++)"), &[], "")
                    }
                    "while" => Fragment::block("while (0)".into(), &[], ""),
                    "do" => Fragment::block("do".into(), &[], " while (0);"),
                    "if" | "else" => Fragment::block("if (0)".into(), &[], " else { }"),
                    "switch" | "case" | "default" => Fragment::block(
                        "switch (0)".into(),
                        &["case 1: break;".into(), "default: break;".into()],
                        "",
                    ),
                    _ => {
                        let n = namer.fresh();
                        Fragment::line(format!("goto {n}; {n}: ;"))
                    }
                }),
                KeywordCategory::DataType => {
                    let n = namer.fresh();
                    Some(match tok {
                        "struct" | "union" => {
                            let m = namer.fresh();
                            Fragment::line(format!("{tok} {n} {{ int {m}; }};"))
                        }
                        "enum" => {
                            let m = namer.fresh();
                            Fragment::line(format!("enum {n} {{ {} }};", m.to_uppercase()))
                        }
                        "typedef" => Fragment::line(format!("typedef int {n};")),
                        "void" => Fragment::line(format!("void *{n} = 0;")),
                        other => Fragment::line(format!("{other} {n} = 0;")),
                    })
                }
                KeywordCategory::Miscellaneous => Some(match tok {
                    "sizeof" => {
                        let n = namer.fresh();
                        Fragment::line(format!("unsigned long {n} = sizeof(int);"))
                    }
                    "typeof" => {
                        let n = namer.fresh();
                        Fragment::line(format!("typeof(int) {n} = 0;"))
                    }
                    "break" => Fragment::block("while (0)".into(), &["break;".into()], ""),
                    "continue" => Fragment::block("while (0)".into(), &["continue;".into()], ""),
                    _ => Fragment::line(format!("if (0) {tok} 0;")),
                }),
                _ if is_library_name(tok) => Some(Fragment::line(format!("if (0) {};", library_call(tok, &mut namer)))),
                _ if is_identifier(tok) => Some(Fragment::line(format!("int {tok} = 0;"))),
                _ => None,
            };
            if let (false, Some(b)) = (had.0, &namer.buf) {
                decls.push(Fragment::line(format!("char {b}[16] = \"\";")));
            }
            if let (false, Some(n)) = (had.1, &namer.num) {
                decls.push(Fragment::line(format!("int {n} = 0;")));
            }
            body.extend(frag);
        }
        decls.extend(body);
        decls
    }

    pub fn render(prompt: &PromptSpec) -> String {
        let frags = Self::fragments(prompt);
        let c = &prompt.constraints;
        if c.dense {
            let mut lines: Vec<String> = frags.into_iter().map(|f| f.dense).collect();
            let max = c.max_lines.max(1);
            // Fold trailing lines together until the budget is met.
            while lines.len() > max {
                let tail = lines.pop().unwrap();
                let last = lines.last_mut().unwrap();
                last.push(' ');
                last.push_str(&tail);
            }
            return lines.join("\n");
        }
        let mut out: Vec<String> = Vec::new();
        let indent = if c.several_lines { "" } else { "    " };
        if !c.several_lines {
            out.push("/* helper generated for the requested features */".into());
            out.push("void generated_helper(void)".into());
            out.push("{".into());
        }
        for f in frags {
            out.push(String::new());
            out.extend(f.spread.into_iter().map(|l| format!("{indent}{l}")));
        }
        if !c.several_lines {
            out.push(String::new());
            out.push("}".into());
        }
        out.join("\n")
    }
}

fn is_identifier(tok: &str) -> bool {
    let mut chars = tok.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl GeneratorClient for OfflineGenerator {
    fn id(&self) -> String {
        format!("offline-v{TEMPLATE_VERSION}")
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn generate(&self, prompt: &PromptSpec) -> Result<String, GenerationError> {
        if prompt.features.is_empty() {
            return Err(GenerationError::NoFeatures);
        }
        Ok(Self::render(prompt))
    }
}
