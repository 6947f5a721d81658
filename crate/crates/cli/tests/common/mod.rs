//! Fixture builders shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use halluspan::backend::{BackendError, BackendIdentity, ChatRequest, LlmBackend, MockLlm, MockSearch, Passage};
use halluspan::dataset::{write_jsonl, Instance, KeyMap};
use halluspan::prompts::TRANSLATION;
use halluspan::span::{CharSpan, SoftSpan, SpanSet};

pub const RETRY_MARKER: &str = "Your previous reply could not be parsed:";

/// Answers from a script and stores every exchange as a mock fixture, so a
/// later run against the fixture directory replays it exactly.
pub struct Recorder<F> {
    pub dir: PathBuf,
    pub script: F,
    pub calls: AtomicUsize,
}

impl<F: Fn(&ChatRequest) -> Option<String> + Send + Sync> Recorder<F> {
    pub fn new(dir: impl Into<PathBuf>, script: F) -> Self {
        Self { dir: dir.into(), script, calls: AtomicUsize::new(0) }
    }
}

impl<F: Fn(&ChatRequest) -> Option<String> + Send + Sync> LlmBackend for Recorder<F> {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity::new("mock", "fixture")
    }

    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let reply = (self.script)(req).ok_or_else(|| BackendError::UnknownFixture {
            hash: req.content_hash(),
            hint: req.user.chars().take(60).collect(),
        })?;
        MockLlm::write_fixture(&self.dir, req, &reply)
            .map_err(|source| BackendError::Io { path: self.dir.display().to_string(), source })?;
        Ok(reply)
    }
}

pub enum Reply {
    /// Well-formed extraction reply.
    Spans(&'static [(&'static str, f64)]),
    /// First reply, then the reply to the repair prompt.
    Raw(&'static str, &'static str),
}

pub struct Case {
    pub id: &'static str,
    pub lang: &'static str,
    pub question: &'static str,
    pub answer: &'static str,
    /// English search query; the question itself for English instances.
    pub query: &'static str,
    pub passages: &'static [&'static str],
    pub reply: Reply,
    /// Gold labels as (text, occurrence index, prob).
    pub gold: &'static [(&'static str, usize, f64)],
}

pub fn golden_cases() -> Vec<Case> {
    vec![
        Case {
            id: "val-en-1",
            lang: "en",
            question: "What is the capital of France?",
            answer: "The capital of France is Berlin.",
            query: "What is the capital of France?",
            passages: &["Paris, the capital city of France, is a metropolis steeped in history, culture, and global significance."],
            reply: Reply::Spans(&[("Berlin", 0.99)]),
            gold: &[("Berlin", 0, 1.0)],
        },
        Case {
            id: "val-en-2",
            lang: "en",
            question: "Who wrote Hamlet?",
            answer: "Hamlet was written by Christopher Marlowe in 1603.",
            query: "Who wrote Hamlet?",
            passages: &[
                "Hamlet is a tragedy written by William Shakespeare sometime between 1599 and 1601.",
                "The first quarto of Hamlet was published in 1603.",
            ],
            reply: Reply::Spans(&[("Christopher Marlowe", 0.9), ("Shakespeare's rival", 0.5), ("1603", 0.4)]),
            gold: &[("Christopher Marlowe", 0, 1.0)],
        },
        Case {
            id: "val-en-3",
            lang: "en",
            question: "How tall is Mount Everest?",
            answer: "Mount Everest is 8,849 metres tall.",
            query: "How tall is Mount Everest?",
            passages: &["Mount Everest's elevation of 8,849 m was established by a 2020 survey."],
            reply: Reply::Spans(&[]),
            gold: &[],
        },
        Case {
            id: "val-en-4",
            lang: "en",
            question: "What is the capital of France?",
            answer: "Paris is the capital of France and has 40 million residents.",
            query: "What is the capital of France?",
            passages: &["Paris, the capital city of France, is a metropolis steeped in history, culture, and global significance."],
            reply: Reply::Spans(&[("40 million", 0.8)]),
            gold: &[("40 million", 0, 0.8)],
        },
        Case {
            id: "val-de-1",
            lang: "de",
            question: "Wann fiel die Berliner Mauer?",
            answer: "Die Berliner Mauer fiel im Jahr 1991.",
            query: "When did the Berlin Wall fall?",
            passages: &["The Berlin Wall fell on 9 November 1989."],
            reply: Reply::Spans(&[("1991", 0.95)]),
            gold: &[("1991", 0, 1.0)],
        },
        Case {
            id: "val-zh-1",
            lang: "zh",
            question: "珠穆朗玛峰有多高？",
            answer: "珠穆朗玛峰高约九千米。",
            query: "How tall is Mount Everest?",
            passages: &["Mount Everest's elevation of 8,849 m was established by a 2020 survey."],
            reply: Reply::Spans(&[("九千米", 0.85)]),
            gold: &[("九千米", 0, 0.7)],
        },
        Case {
            id: "val-fr-1",
            lang: "fr",
            question: "Quelle est la monnaie du Japon ?",
            answer: "La monnaie du Japon est le yuan.",
            query: "What is the currency of Japan?",
            passages: &["The yen is the official currency of Japan."],
            reply: Reply::Spans(&[("yuan", 0.97)]),
            gold: &[("yuan", 0, 1.0)],
        },
        Case {
            id: "val-en-5",
            lang: "en",
            question: "What is the boiling point of water at sea level?",
            answer: "Water boils at 90 degrees Celsius at sea level.",
            query: "What is the boiling point of water at sea level?",
            passages: &[],
            reply: Reply::Spans(&[("90 degrees", 0.9)]),
            gold: &[("90 degrees", 0, 1.0)],
        },
        Case {
            id: "val-en-6",
            lang: "en",
            question: "Who painted the Mona Lisa?",
            answer: "Michelangelo painted the Mona Lisa.",
            query: "Who painted the Mona Lisa?",
            passages: &["The Mona Lisa is a portrait painting by Leonardo da Vinci."],
            reply: Reply::Raw("Sorry, I cannot help with that.", "Still nothing to report."),
            gold: &[("Michelangelo", 0, 1.0)],
        },
        Case {
            id: "val-en-7",
            lang: "en",
            question: "In which year did Apollo 11 land on the Moon?",
            answer: "Apollo 11 landed in 1968, and the crew returned in 1968.",
            query: "In which year did Apollo 11 land on the Moon?",
            passages: &["Apollo 11 landed on the Moon on 20 July 1969 and returned on 24 July 1969."],
            reply: Reply::Raw(
                "```json\n{\"incorrect_spans\": [{\"text\": \"1968\", \"probability\": 0.7}, {\"text\": \"1968\", \"probability\": 0.6}]}\n```",
                "",
            ),
            gold: &[("1968", 0, 0.7), ("1968", 1, 0.6)],
        },
        Case {
            id: "val-en-8",
            lang: "en",
            question: "What is the chemical symbol for gold?",
            answer: "The chemical symbol for gold is Ag.",
            query: "What is the chemical symbol for gold?",
            passages: &["Gold is a chemical element with the symbol Au."],
            reply: Reply::Raw("{incorrect_spans: [Ag]}", "{\"incorrect_spans\": [{\"text\": \"Ag\", \"probability\": 0.92}]}"),
            gold: &[("Ag", 0, 1.0)],
        },
        Case {
            id: "val-es-1",
            lang: "es",
            question: "¿Cuál es el río más largo de Europa?",
            answer: "El río más largo de Europa es el Danubio.",
            query: "What is the longest river in Europe?",
            passages: &["The Volga is the longest river in Europe."],
            reply: Reply::Spans(&[("Danubio", 0.88)]),
            gold: &[("Danubio", 0, 1.0)],
        },
    ]
}

/// Char span of the `nth` occurrence of `needle` in `text`.
pub fn find_span(text: &str, needle: &str, nth: usize) -> CharSpan {
    let (byte, _) = text.match_indices(needle).nth(nth).expect("needle occurs in text");
    let start = text[..byte].chars().count();
    CharSpan::new(start, start + needle.chars().count()).unwrap()
}

pub fn case_instance(c: &Case) -> Instance {
    let mut inst = Instance::new(c.id, c.lang, c.question, c.answer);
    inst.producing_model = "fixture-model".into();
    let len = inst.answer_len();
    let spans: Vec<(CharSpan, f64)> = c.gold.iter().map(|&(t, n, p)| (find_span(c.answer, t, n), p)).collect();
    inst.gold_hard =
        Some(SpanSet::normalize(spans.iter().filter(|(_, p)| *p > 0.5).map(|(s, _)| *s), len).unwrap());
    inst.gold_soft = Some(spans.iter().map(|&(span, prob)| SoftSpan::new(span, prob).unwrap()).collect());
    inst
}

fn extraction_reply(c: &Case, retry: bool) -> String {
    match (&c.reply, retry) {
        (Reply::Spans(items), _) => {
            let list: Vec<serde_json::Value> = items
                .iter()
                .map(|(t, p)| serde_json::json!({ "text": t, "probability": p }))
                .collect();
            serde_json::json!({ "incorrect_spans": list }).to_string()
        }
        (Reply::Raw(first, _), false) => first.to_string(),
        (Reply::Raw(_, second), true) => second.to_string(),
    }
}

pub const GOLDEN_CONFIG: &str = r#"# Golden fixture run: mock backends only.
context_mode = "from_question"
translate = true
detector = "direct"
parallelism = 4

[llm]
kind = "mock"
fixture_dir = "llm"

[search]
kind = "mock"
fixture_dir = "search"
"#;

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden")
}

/// Writes the golden corpus, config and mock fixtures into `dir`.
pub fn write_golden_fixture(dir: &Path) {
    let cases = golden_cases();
    std::fs::create_dir_all(dir.join("llm")).unwrap();
    std::fs::create_dir_all(dir.join("search")).unwrap();
    let instances: Vec<Instance> = cases.iter().map(case_instance).collect();
    write_jsonl(&instances, dir.join("input.jsonl"), &KeyMap::default()).unwrap();
    std::fs::write(dir.join("run.toml"), GOLDEN_CONFIG).unwrap();
    for c in &cases {
        let passages: Vec<Passage> = c
            .passages
            .iter()
            .enumerate()
            .map(|(i, t)| Passage::new(format!("fixture-{i}"), *t))
            .collect();
        MockSearch::write_fixture(&dir.join("search"), c.query, &passages).unwrap();
    }
    let translation = TRANSLATION.render(&[]);
    let recorder = Recorder::new(dir.join("llm"), move |req: &ChatRequest| {
        let cases = golden_cases();
        if req.system == translation {
            return cases.iter().find(|c| c.question == req.user).map(|c| c.query.to_string());
        }
        let c = cases.iter().find(|c| {
            req.user.contains(&format!("<answer>\n{}\n</answer>", c.answer))
                || req.user.contains(&format!("Answer: \"{}\"", c.answer))
        })?;
        Some(extraction_reply(c, req.user.contains(RETRY_MARKER)))
    });
    let cfg = {
        let mut cfg = halluspan::config::RunConfig::load(&dir.join("run.toml")).unwrap();
        cfg.parallelism = 1;
        cfg
    };
    let search: std::sync::Arc<dyn halluspan::backend::SearchBackend> =
        std::sync::Arc::new(MockSearch::from_dir(dir.join("search")));
    let llm: std::sync::Arc<dyn LlmBackend> = std::sync::Arc::new(recorder);
    let backends = halluspan::pipeline::Backends { translator: llm.clone(), llm, search: Some(search), cache: None };
    let pipeline = halluspan::pipeline::Pipeline::new(cfg, backends).unwrap();
    pipeline.run(&instances).unwrap();
}

/// Sorted (relative path, bytes) listing of every file under `dir`.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(base, &path, out);
            } else {
                let rel = path.strip_prefix(base).unwrap().to_string_lossy().replace('\\', "/");
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
