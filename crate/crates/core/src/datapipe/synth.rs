//! Deterministic corpus generators: randomized records for round-trip and
//! verification property tests, defect seeding with known ground truth,
//! and the small fixed corpus the memorisation run trains on.

use super::{
    Author, Finding, FindingCategory, FunctionSpec, Message, ParamSpec, ParamType,
    TrajectoryRecord, MARKER_EXECUTOR, MARKER_SUMMARIZER,
};
use crate::orchestrator::{parse_executor_output, render_action, ParsedAction};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

const VERBS: &[&str] = &["get", "calc", "fetch", "list", "convert", "find", "rank", "sum"];
const NOUNS: &[&str] =
    &["weather", "rate", "units", "news", "price", "route", "stock", "recipe", "city", "odds"];
const WORDS: &[&str] = &[
    "please", "check", "the", "latest", "report", "for", "next", "week", "today", "quickly",
    "and", "compare", "results", "with", "history", "then", "send", "it", "back", "now",
];

fn ident(rng: &mut ChaCha8Rng) -> String {
    format!(
        "{}-{}",
        VERBS[rng.gen_range(0..VERBS.len())],
        NOUNS[rng.gen_range(0..NOUNS.len())]
    )
}

fn phrase(rng: &mut ChaCha8Rng, words: usize) -> String {
    let mut parts = Vec::with_capacity(words);
    for _ in 0..words {
        parts.push(WORDS[rng.gen_range(0..WORDS.len())]);
    }
    let mut s = parts.join(" ");
    s.push('.');
    s
}

fn value_for(rng: &mut ChaCha8Rng, ty: ParamType) -> Value {
    match ty {
        ParamType::String => Value::String(WORDS[rng.gen_range(0..WORDS.len())].to_string()),
        ParamType::Integer => json!(rng.gen_range(-50i64..50)),
        ParamType::Number => {
            if rng.gen_bool(0.5) {
                json!(rng.gen_range(-50i64..50))
            } else {
                json!(rng.gen_range(0..100) as f64 / 4.0)
            }
        }
        ParamType::Boolean => json!(rng.gen_bool(0.5)),
        ParamType::Array => json!([rng.gen_range(0..9), rng.gen_range(0..9)]),
        ParamType::Object => json!({ "a": rng.gen_range(0..9) }),
    }
}

const PARAM_TYPES: [ParamType; 6] = [
    ParamType::String,
    ParamType::Integer,
    ParamType::Number,
    ParamType::Boolean,
    ParamType::Array,
    ParamType::Object,
];

fn random_functions(rng: &mut ChaCha8Rng) -> Vec<FunctionSpec> {
    let n = rng.gen_range(1..=3);
    let mut out: Vec<FunctionSpec> = Vec::with_capacity(n);
    while out.len() < n {
        let name = ident(rng);
        if out.iter().any(|f| f.name == name) {
            continue;
        }
        let n_params = rng.gen_range(0..=3);
        let mut parameters: Vec<ParamSpec> = Vec::with_capacity(n_params);
        while parameters.len() < n_params {
            let pname = WORDS[rng.gen_range(0..WORDS.len())].to_string();
            if parameters.iter().any(|p| p.name == pname) {
                continue;
            }
            parameters.push(ParamSpec {
                name: pname,
                ty: PARAM_TYPES[rng.gen_range(0..PARAM_TYPES.len())],
                description: phrase(rng, 3),
                required: rng.gen_bool(0.5),
            });
        }
        out.push(FunctionSpec { name, description: phrase(rng, 4), parameters });
    }
    out
}

/// A schema-conforming action for one declared function: every required
/// parameter present, optional ones coin-flipped, values typed correctly.
fn conforming_action(rng: &mut ChaCha8Rng, spec: &FunctionSpec) -> ParsedAction {
    let mut arguments = serde_json::Map::new();
    for p in &spec.parameters {
        if p.required || rng.gen_bool(0.5) {
            arguments.insert(p.name.clone(), value_for(rng, p.ty));
        }
    }
    ParsedAction { name: spec.name.clone(), arguments }
}

/// One random valid record. Roughly a quarter are math-style (no
/// candidate functions, free-form executor code); the rest call tools
/// through 1–2 reasoner/executor rounds with observations.
pub fn random_record(rng: &mut ChaCha8Rng) -> TrajectoryRecord {
    if rng.gen_bool(0.25) {
        let n = rng.gen_range(1..=3);
        return TrajectoryRecord {
            functions: vec![],
            messages: vec![
                Message::new(
                    Author::System,
                    "You have the capability to address the following user's query.",
                ),
                Message::new(Author::User, phrase(rng, 5)),
                Message::new(
                    Author::Reasoner,
                    format!("{} {}", phrase(rng, 4), MARKER_EXECUTOR),
                ),
                Message::new(Author::Executor, format!("print({} + {})", n, n + 1)),
                Message::new(
                    Author::Reasoner,
                    format!("{} {}", phrase(rng, 3), MARKER_SUMMARIZER),
                ),
                Message::new(Author::Summarizer, phrase(rng, 4)),
            ],
        };
    }

    let functions = random_functions(rng);
    let docs = serde_json::to_string(&functions).expect("specs serialize");
    let mut messages = vec![
        Message::new(
            Author::System,
            format!(
                "You have access to the following APIs within XML tags:<tools>{docs}</tools>"
            ),
        ),
        Message::new(Author::User, phrase(rng, 6)),
    ];
    let rounds = rng.gen_range(1..=2);
    for _ in 0..rounds {
        messages.push(Message::new(
            Author::Reasoner,
            format!("{} {}", phrase(rng, 4), MARKER_EXECUTOR),
        ));
        let n_actions = rng.gen_range(1..=2.min(functions.len()));
        let mut blocks = Vec::with_capacity(n_actions);
        let mut picked: Vec<&FunctionSpec> = functions.iter().collect();
        picked.shuffle(rng);
        for spec in &picked[..n_actions] {
            blocks.push(render_action(&conforming_action(rng, spec)));
        }
        messages.push(Message::new(Author::Executor, blocks.join("\n")));
        for _ in 0..n_actions {
            messages.push(Message::new(Author::Observation, phrase(rng, 4)));
        }
    }
    messages.push(Message::new(
        Author::Reasoner,
        format!("{} {}", phrase(rng, 3), MARKER_SUMMARIZER),
    ));
    messages.push(Message::new(Author::Summarizer, phrase(rng, 5)));
    TrajectoryRecord { functions, messages }
}

pub fn random_corpus(n: usize, seed: u64) -> Vec<TrajectoryRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_record(&mut rng)).collect()
}

/// Ground truth for one planted defect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeededDefect {
    pub record_index: usize,
    pub message_index: usize,
    pub category: FindingCategory,
}

impl SeededDefect {
    pub fn matches(&self, record_index: usize, finding: &Finding) -> bool {
        self.record_index == record_index
            && self.message_index == finding.message_index
            && self.category == finding.category
    }
}

/// Corrupt roughly `rate` of the tool-calling records in place, one defect
/// each, and return exactly where and what was planted. Records stay
/// parseable and grammar-valid — only the schema relationship breaks.
pub fn seed_defects(
    records: &mut [TrajectoryRecord],
    seed: u64,
    rate: f64,
) -> Vec<SeededDefect> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planted = Vec::new();
    for (record_index, record) in records.iter_mut().enumerate() {
        if record.functions.is_empty() || !rng.gen_bool(rate) {
            continue;
        }
        let Some(message_index) =
            record.messages.iter().position(|m| m.author == Author::Executor)
        else {
            continue;
        };
        let mut actions = parse_executor_output(&record.messages[message_index].content)
            .expect("generated records are grammar-valid");
        let category = match rng.gen_range(0..4) {
            0 => {
                // Unknown function: no generated identifier ends in "-zz".
                actions[0].name.push_str("-zz");
                FindingCategory::UnknownFunction
            }
            1 => {
                let spec = record
                    .functions
                    .iter()
                    .find(|f| f.name == actions[0].name)
                    .expect("action references a candidate");
                match spec.parameters.iter().find(|p| p.required) {
                    Some(p) => {
                        actions[0].arguments.remove(&p.name);
                        FindingCategory::ParameterMismatch
                    }
                    None => {
                        actions[0].arguments.insert("bogus".into(), json!(true));
                        FindingCategory::ParameterMismatch
                    }
                }
            }
            2 => {
                actions[0].arguments.insert("bogus".into(), json!(true));
                FindingCategory::ParameterMismatch
            }
            _ => {
                let spec = record
                    .functions
                    .iter()
                    .find(|f| f.name == actions[0].name)
                    .expect("action references a candidate");
                match spec
                    .parameters
                    .iter()
                    .find(|p| actions[0].arguments.contains_key(&p.name))
                {
                    Some(p) => {
                        // No declared type accepts null, so this always
                        // mismatches.
                        actions[0].arguments.insert(p.name.clone(), Value::Null);
                        FindingCategory::ParameterMismatch
                    }
                    None => {
                        actions[0].arguments.insert("bogus".into(), json!(true));
                        FindingCategory::ParameterMismatch
                    }
                }
            }
        };
        let blocks: Vec<String> = actions.iter().map(render_action).collect();
        record.messages[message_index].content = blocks.join("\n");
        planted.push(SeededDefect { record_index, message_index, category });
    }
    planted
}

/// The fixed 64-record corpus for the memorisation run: eight tool
/// classes times eight user-query variants. All supervised text within a
/// class is identical, so the class keyword in the (unsupervised) query is
/// the only signal the model must route on.
pub fn memorization_corpus() -> Vec<TrajectoryRecord> {
    const CLASSES: [(&str, &str); 8] = [
        ("get-weather", "weather"),
        ("calc-prob", "odds"),
        ("find-city", "city"),
        ("convert-units", "units"),
        ("get-price", "price"),
        ("translate-text", "words"),
        ("make-plan", "plan"),
        ("find-recipe", "recipe"),
    ];
    const VARIANTS: [&str; 8] =
        ["now", "today", "please", "again", "soon", "first", "next", "fast"];

    let mut records = Vec::with_capacity(64);
    for (class_idx, (tool, keyword)) in CLASSES.iter().enumerate() {
        let spec = FunctionSpec {
            name: (*tool).into(),
            description: format!("Tool for {keyword}."),
            parameters: vec![ParamSpec {
                name: "q".into(),
                ty: ParamType::String,
                description: "query".into(),
                required: true,
            }],
        };
        for variant in VARIANTS {
            let mut messages = vec![
                Message::new(Author::System, "You can call tools."),
                Message::new(Author::User, format!("{keyword} {variant}.")),
                Message::new(Author::Reasoner, format!("Use {tool}. {MARKER_EXECUTOR}")),
                Message::new(
                    Author::Executor,
                    format!(
                        "[unused11]Action: {tool} Arguments: {{\"q\": \"{keyword}\"}}[unused12]"
                    ),
                ),
            ];
            // Half the classes carry the full shape with an observation
            // round; the rest hand off straight to the summary.
            if class_idx < 4 {
                messages.push(Message::new(Author::Observation, "ok."));
                messages.push(Message::new(
                    Author::Reasoner,
                    format!("Done. {MARKER_SUMMARIZER}"),
                ));
            }
            messages.push(Message::new(Author::Summarizer, format!("Result: {keyword} done.")));
            records.push(TrajectoryRecord { functions: vec![spec.clone()], messages });
        }
    }
    records
}
