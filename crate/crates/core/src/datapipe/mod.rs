//! Multi-role trajectory records: the line-oriented wire format, record
//! validation, role segmentation into token/supervision masks, reliability
//! verification, and gap completion through a pluggable client.
//!
//! A corpus file holds one record per line. Each record is a UTF-8 JSON
//! object with exactly the fields `functions`, `system`, `messages`, in
//! that order in canonical form. In memory the system prompt becomes
//! message zero, so `messages` alone carries the whole conversation.

pub mod synth;

use crate::adapter::{RoleId, RoleMask};
use crate::backbone::tokenizer::{Tokenizer, TOK_END, TOK_OBSERVATION, TOK_SYSTEM, TOK_USER};
use crate::orchestrator::{parse_executor_output, ActionParseError};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

/// Literal handoff markers a reasoner message must end with.
pub const MARKER_EXECUTOR: &str = "Next: executor.";
pub const MARKER_SUMMARIZER: &str = "Next: summarizer.";

// ---------------------------------------------------------------------------
// Record types
// ---------------------------------------------------------------------------

/// Declared type of one function parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    String,
    Integer,
    Number,
    Boolean,
    Array,
    Object,
}

impl fmt::Display for ParamType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamType::String => "string",
            ParamType::Integer => "integer",
            ParamType::Number => "number",
            ParamType::Boolean => "boolean",
            ParamType::Array => "array",
            ParamType::Object => "object",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ParamType,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub required: bool,
}

/// One candidate function a record's executor may call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub parameters: Vec<ParamSpec>,
}

/// Who produced a message. `System`, `User`, and `Observation` are context;
/// the other three are generated by the model's roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Author {
    System,
    User,
    Reasoner,
    Executor,
    Observation,
    Summarizer,
}

impl Author {
    /// The adapter role that generates messages of this author, if any.
    pub fn generated_role(self) -> Option<RoleId> {
        match self {
            Author::Reasoner => Some(RoleId::Reasoner),
            Author::Executor => Some(RoleId::Executor),
            Author::Summarizer => Some(RoleId::Summarizer),
            _ => None,
        }
    }

    /// Capitalised label used when rendering conversations as plain text.
    pub fn label(self) -> &'static str {
        match self {
            Author::System => "System",
            Author::User => "User",
            Author::Reasoner => "Reasoner",
            Author::Executor => "Executor",
            Author::Observation => "Observation",
            Author::Summarizer => "Summarizer",
        }
    }
}

impl fmt::Display for Author {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Author::System => "system",
            Author::User => "user",
            Author::Reasoner => "reasoner",
            Author::Executor => "executor",
            Author::Observation => "observation",
            Author::Summarizer => "summarizer",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Message {
    pub author: Author,
    pub content: String,
}

impl Message {
    pub fn new(author: Author, content: impl Into<String>) -> Message {
        Message { author, content: content.into() }
    }
}

/// One complete multi-role conversation plus its candidate functions.
/// `messages[0]` is always the system prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub functions: Vec<FunctionSpec>,
    pub messages: Vec<Message>,
}

/// One training sample: token ids with per-token role and supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedSample {
    pub ids: Vec<u32>,
    pub mask: RoleMask,
    pub supervised: Vec<bool>,
}

impl TokenizedSample {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_supervised(&self) -> usize {
        self.supervised.iter().filter(|&&s| s).count()
    }
}

// ---------------------------------------------------------------------------
// Wire format
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRecord {
    #[serde(default)]
    functions: Vec<FunctionSpec>,
    system: String,
    messages: Vec<Message>,
}

#[derive(Serialize)]
struct WireRecordRef<'a> {
    functions: &'a [FunctionSpec],
    system: &'a str,
    messages: &'a [Message],
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("record syntax at byte {offset} (line {line}, column {column}): {message}")]
    Syntax { offset: usize, line: usize, column: usize, message: String },
    #[error(
        "message {index} uses author \"system\"; the system prompt belongs in the top-level field"
    )]
    SystemInMessages { index: usize },
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len() + 1;
    }
    text.len()
}

/// Parse one record line. The top-level `system` string becomes the first
/// in-memory message.
pub fn parse_record(text: &str) -> Result<TrajectoryRecord, ParseError> {
    let wire: WireRecord = serde_json::from_str(text).map_err(|e| {
        let (line, column) = (e.line(), e.column());
        ParseError::Syntax {
            offset: byte_offset(text, line, column),
            line,
            column,
            message: e.to_string(),
        }
    })?;
    if let Some(index) = wire.messages.iter().position(|m| m.author == Author::System) {
        return Err(ParseError::SystemInMessages { index });
    }
    let mut messages = Vec::with_capacity(wire.messages.len() + 1);
    messages.push(Message::new(Author::System, wire.system));
    messages.extend(wire.messages);
    Ok(TrajectoryRecord { functions: wire.functions, messages })
}

/// Canonical single-line rendering: keys in the order `functions`,
/// `system`, `messages`; the system message hoisted to its own field.
pub fn serialize_record(record: &TrajectoryRecord) -> Result<String, ValidationError> {
    let Some(first) = record.messages.first() else {
        return Err(ValidationError::Empty);
    };
    if first.author != Author::System {
        return Err(ValidationError::SystemNotFirst { found: first.author });
    }
    let wire = WireRecordRef {
        functions: &record.functions,
        system: &first.content,
        messages: &record.messages[1..],
    };
    Ok(serde_json::to_string(&wire).expect("record serialization is infallible"))
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("record has no messages")]
    Empty,
    #[error("first message must be the system prompt, found author \"{found}\"")]
    SystemNotFirst { found: Author },
    #[error("second system message at index {index}")]
    DuplicateSystem { index: usize },
    #[error("record has no user query")]
    MissingUser,
    #[error("message 1 must be the user query, found author \"{found}\"")]
    UserNotSecond { found: Author },
    #[error(
        "reasoner message {index} must end with \"{MARKER_EXECUTOR}\" or \"{MARKER_SUMMARIZER}\""
    )]
    ReasonerMarkerMissing { index: usize },
    #[error("summarizer message {index} is not the last message")]
    SummarizerNotLast { index: usize },
    #[error("observation message {index} does not follow an executor message")]
    OrphanObservation { index: usize },
    #[error("duplicate candidate function \"{name}\"")]
    DuplicateFunction { name: String },
    #[error("function \"{function}\" declares parameter \"{name}\" twice")]
    DuplicateParameter { function: String, name: String },
    #[error("executor message {index} violates the action grammar: {source}")]
    BadExecutorAction {
        index: usize,
        #[source]
        source: ActionParseError,
    },
}

/// Check every record invariant. Executor messages are held to the action
/// grammar only when the record declares candidate functions; records
/// without candidates (math-style) carry free-form executor text.
pub fn validate_record(record: &TrajectoryRecord) -> Result<(), ValidationError> {
    let msgs = &record.messages;
    let Some(first) = msgs.first() else {
        return Err(ValidationError::Empty);
    };
    if first.author != Author::System {
        return Err(ValidationError::SystemNotFirst { found: first.author });
    }
    match msgs.get(1) {
        None => return Err(ValidationError::MissingUser),
        Some(m) if m.author != Author::User => {
            return Err(ValidationError::UserNotSecond { found: m.author })
        }
        _ => {}
    }
    for (index, m) in msgs.iter().enumerate().skip(1) {
        match m.author {
            Author::System => return Err(ValidationError::DuplicateSystem { index }),
            Author::Reasoner => {
                if !(m.content.ends_with(MARKER_EXECUTOR)
                    || m.content.ends_with(MARKER_SUMMARIZER))
                {
                    return Err(ValidationError::ReasonerMarkerMissing { index });
                }
            }
            Author::Summarizer => {
                if index + 1 != msgs.len() {
                    return Err(ValidationError::SummarizerNotLast { index });
                }
            }
            Author::Observation => {
                let prev = msgs[index - 1].author;
                if prev != Author::Executor && prev != Author::Observation {
                    return Err(ValidationError::OrphanObservation { index });
                }
            }
            Author::Executor if !record.functions.is_empty() => {
                if let Err(source) = parse_executor_output(&m.content) {
                    return Err(ValidationError::BadExecutorAction { index, source });
                }
            }
            _ => {}
        }
    }
    let mut names = BTreeSet::new();
    for f in &record.functions {
        if !names.insert(f.name.as_str()) {
            return Err(ValidationError::DuplicateFunction { name: f.name.clone() });
        }
        let mut params = BTreeSet::new();
        for p in &f.parameters {
            if !params.insert(p.name.as_str()) {
                return Err(ValidationError::DuplicateParameter {
                    function: f.name.clone(),
                    name: p.name.clone(),
                });
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Role segmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error(transparent)]
    Invalid(#[from] ValidationError),
    #[error("record tokenizes to {len} tokens, over the {max} limit")]
    TooLong { len: usize, max: usize },
}

/// Tokenize a record and assign every position a role and a supervision
/// flag.
///
/// Generated messages open with an unsupervised role marker; their content
/// and closing end-of-message token are supervised under the author's
/// role. Observation spans are context for the reasoner: labeled reasoner,
/// unsupervised. System and user spans take the role of the next generated
/// message (they are only ever attended-to context for that role), also
/// unsupervised. A trailing context span with no generated message after
/// it defaults to the reasoner, which is the role that would speak next.
pub fn segment_roles(
    record: &TrajectoryRecord,
    tok: &Tokenizer,
    max_len: usize,
) -> Result<TokenizedSample, SegmentError> {
    validate_record(record)?;
    let msgs = &record.messages;
    let mut next_gen = vec![RoleId::Reasoner; msgs.len()];
    let mut coming = RoleId::Reasoner;
    for i in (0..msgs.len()).rev() {
        if let Some(r) = msgs[i].author.generated_role() {
            coming = r;
        }
        next_gen[i] = coming;
    }

    let mut ids = Vec::new();
    let mut roles = Vec::new();
    let mut supervised = Vec::new();
    let mut push = |id: u32, role: RoleId, sup: bool| {
        ids.push(id);
        roles.push(role);
        supervised.push(sup);
    };
    for (i, m) in msgs.iter().enumerate() {
        match m.author.generated_role() {
            Some(role) => {
                push(tok.role_marker(role), role, false);
                for id in tok.encode_text(&m.content) {
                    push(id, role, true);
                }
                push(TOK_END, role, true);
            }
            None => {
                let (marker, role) = match m.author {
                    Author::System => (TOK_SYSTEM, next_gen[i]),
                    Author::User => (TOK_USER, next_gen[i]),
                    Author::Observation => (TOK_OBSERVATION, RoleId::Reasoner),
                    _ => unreachable!("generated authors handled above"),
                };
                push(marker, role, false);
                for id in tok.encode_text(&m.content) {
                    push(id, role, false);
                }
            }
        }
    }
    if ids.len() > max_len {
        return Err(SegmentError::TooLong { len: ids.len(), max: max_len });
    }
    Ok(TokenizedSample { ids, mask: RoleMask(roles), supervised })
}

// ---------------------------------------------------------------------------
// Reliability verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingCategory {
    UnknownFunction,
    ParameterMismatch,
    SemanticMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub category: FindingCategory,
    pub message_index: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub findings: Vec<Finding>,
    /// False when no semantic client was configured: semantic findings
    /// were skipped, not cleared.
    pub semantic_checked: bool,
}

impl VerificationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

fn value_kind(v: &serde_json::Value) -> &'static str {
    match v {
        serde_json::Value::Null => "null",
        serde_json::Value::Bool(_) => "boolean",
        serde_json::Value::Number(n) if n.is_i64() || n.is_u64() => "integer",
        serde_json::Value::Number(_) => "number",
        serde_json::Value::String(_) => "string",
        serde_json::Value::Array(_) => "array",
        serde_json::Value::Object(_) => "object",
    }
}

/// Does `v` satisfy the declared parameter type? Integer-valued literals
/// satisfy `number`; nothing else coerces (strings in particular never do).
pub fn value_matches(ty: ParamType, v: &serde_json::Value) -> bool {
    match ty {
        ParamType::String => v.is_string(),
        ParamType::Integer => v.as_i64().is_some() || v.as_u64().is_some(),
        ParamType::Number => v.is_number(),
        ParamType::Boolean => v.is_boolean(),
        ParamType::Array => v.is_array(),
        ParamType::Object => v.is_object(),
    }
}

/// System prompt for the advisory semantic check.
pub const SEMANTIC_JUDGE_PROMPT: &str = "You judge whether an executed action matches the \
user's intent and the returned observation. Answer \"YES\" if the function selection and \
parameter assignment are correct, otherwise answer \"NO\" followed by the reason.";

/// Scan a record for the three finding categories.
///
/// Categories one (action name outside the candidate list) and two
/// (missing required parameters, unknown parameters, uncoercible value
/// types) are pure rule checks, applied only when the record declares
/// candidates. Category three is advisory: for every executor message
/// whose directly following observations report success (no `ERROR`
/// prefix), a configured client is asked to second-guess the action;
/// without a client the category is skipped and the report says so.
/// Client failures during the advisory pass are ignored — the check never
/// hard-fails a record.
pub fn verify_record(
    record: &TrajectoryRecord,
    semantic: Option<&dyn CompletionClient>,
) -> VerificationReport {
    let mut findings = Vec::new();
    let by_name: BTreeMap<&str, &FunctionSpec> =
        record.functions.iter().map(|f| (f.name.as_str(), f)).collect();

    if !record.functions.is_empty() {
        for (message_index, m) in record.messages.iter().enumerate() {
            if m.author != Author::Executor {
                continue;
            }
            // Grammar violations are validation failures, not findings.
            let Ok(actions) = parse_executor_output(&m.content) else {
                continue;
            };
            for action in &actions {
                let Some(spec) = by_name.get(action.name.as_str()) else {
                    findings.push(Finding {
                        category: FindingCategory::UnknownFunction,
                        message_index,
                        detail: format!(
                            "action \"{}\" is not in the candidate list",
                            action.name
                        ),
                    });
                    continue;
                };
                for p in &spec.parameters {
                    if p.required && !action.arguments.contains_key(&p.name) {
                        findings.push(Finding {
                            category: FindingCategory::ParameterMismatch,
                            message_index,
                            detail: format!(
                                "required parameter \"{}\" of \"{}\" is missing",
                                p.name, spec.name
                            ),
                        });
                    }
                }
                for (k, v) in &action.arguments {
                    match spec.parameters.iter().find(|p| &p.name == k) {
                        None => findings.push(Finding {
                            category: FindingCategory::ParameterMismatch,
                            message_index,
                            detail: format!(
                                "unknown parameter \"{}\" for \"{}\"",
                                k, spec.name
                            ),
                        }),
                        Some(p) if !value_matches(p.ty, v) => findings.push(Finding {
                            category: FindingCategory::ParameterMismatch,
                            message_index,
                            detail: format!(
                                "parameter \"{}\" of \"{}\" expects {}, got {}",
                                k,
                                spec.name,
                                p.ty,
                                value_kind(v)
                            ),
                        }),
                        _ => {}
                    }
                }
            }
        }
    }

    let mut semantic_checked = false;
    if let Some(client) = semantic {
        semantic_checked = true;
        for (message_index, m) in record.messages.iter().enumerate() {
            if m.author != Author::Executor {
                continue;
            }
            let mut obs = Vec::new();
            for follow in &record.messages[message_index + 1..] {
                if follow.author != Author::Observation {
                    break;
                }
                obs.push(follow.content.as_str());
            }
            if obs.is_empty() || obs.iter().any(|o| o.starts_with("ERROR")) {
                continue;
            }
            let user_query = record
                .messages
                .iter()
                .find(|m| m.author == Author::User)
                .map(|m| m.content.as_str())
                .unwrap_or("");
            let question = format!(
                "Query:\n{}\n\nAction:\n{}\n\nObservation:\n{}",
                user_query,
                m.content,
                obs.join("\n")
            );
            match client.complete(SEMANTIC_JUDGE_PROMPT, &question) {
                Ok(resp) if !resp.trim_start().starts_with("YES") => {
                    findings.push(Finding {
                        category: FindingCategory::SemanticMismatch,
                        message_index,
                        detail: resp.trim().to_string(),
                    });
                }
                _ => {}
            }
        }
    }
    VerificationReport { findings, semantic_checked }
}

// ---------------------------------------------------------------------------
// Role-content completion
// ---------------------------------------------------------------------------

/// Completion prompt for missing reasoner thoughts in tool-calling records.
pub const REASONER_COMPLETION_PROMPT: &str = "Your role is a reasoner with reasoning \
capabilities; you have the ability to analyze the current task resolution status based on \
user queries and conversation history, and decide which role to call next. Please note the \
following:
1. You do not need to directly generate task answers, you only need to analyze and think \
about the solution approach that can complete the task based on the current status.
2. If you believe that the executor has completed the task in the historical conversation, \
designate the next role as summarizer to provide a summary, and let him output the results \
of the executor.
3. If you believe the executor has not yet completed the task, analyze and output the \
correct solution approach, and designate the next role as executor to carry out a detailed \
resolution.
Please output in the following format:
The solution approach after thoughtful analysis. Next: Choose the next role to call, either \
executor or summarizer.
Please strictly adhere to the above format for output, and end with either \"Next: \
executor\" or \"Next: summarizer\".";

/// Completion prompt for missing reasoner thoughts in math-style records
/// (no candidate functions; the executor emits code).
pub const MATH_REASONER_COMPLETION_PROMPT: &str = "You're a professional math problem \
thinking assistant. You can deduce a thought process based on a given problem and existing \
code solutions. Please give the thought process based on the above information. Please note \
that you need to follow the following rules:
1. Read and understand the math problems and code solutions above, and give answers.
2. Your thinking process needs to give a step-by-step solution to the problem, and you need \
to provide formulas and parameters for the code solution, but you don't need to calculate \
the results.
3. The first step should be to extract the variables and corresponding values from the \
problem, and use First, Next, and Finally as transition words between steps.
4. It's best to conclude the thought process by pointing out which parameters lead to the \
final result we need.
5. Formulas in the thinking process are best highlighted in parentheses.
6. The thought process you give needs to be as concise as possible. Don't use mathematical \
symbols elsewhere to avoid miscalculations.";

/// Completion prompt for a missing final summary.
pub const SUMMARIZER_COMPLETION_PROMPT: &str = "Your role is a summarizer, and you have the \
ability to produce summaries based on user queries and the dialogue history. Please \
strictly adhere to the following rules:
1. If the task involves tool invocation and there are no actual tool invocation return \
observation results in the historical conversation, you can examine the correctness of the \
tools and parameters output by the executor, as well as the output format.
2. If you believe there are errors in the output, correct the output according to the \
required format.
3. If you believe the output is entirely correct, then directly copy and output the correct \
answer generated by the executor.
4. If the task involves tool invocation and there are actual tool invocation return \
observation results in the historical conversation, you can provide a concise summary of \
the tool invocation feedback results in natural language.
5. If the task does not involve tool invocation, you can summarize the information you have \
received to answer the user's queries.
Please note the format requirements for the output. As you are the final step in the \
conversation, there is no need to specify the next role to be called.";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("completion client: {0}")]
pub struct ClientError(pub String);

/// Seam for the external model that fills missing role content. One call is
/// one completion: a role-specific system prompt plus the rendered
/// conversation so far.
pub trait CompletionClient {
    fn complete(&self, system_prompt: &str, user_content: &str) -> Result<String, ClientError>;
}

/// Test/offline client returning one fixed response for every request.
#[derive(Debug, Clone)]
pub struct CannedClient {
    pub response: String,
}

impl CompletionClient for CannedClient {
    fn complete(&self, _system_prompt: &str, _user_content: &str) -> Result<String, ClientError> {
        Ok(self.response.clone())
    }
}

#[derive(Debug, Error)]
pub enum CompleteError {
    #[error("completion for record {record_id} failed after {attempts} attempts: {source}")]
    ClientFailed {
        record_id: String,
        attempts: usize,
        #[source]
        source: ClientError,
    },
    #[error("completed record is still invalid: {0}")]
    StillInvalid(#[from] ValidationError),
}

/// Render a conversation prefix as the user content of a completion call:
/// one `Label: content` line per message.
pub fn render_history(messages: &[Message]) -> String {
    let mut s = String::new();
    for m in messages {
        s.push_str(m.author.label());
        s.push_str(": ");
        s.push_str(&m.content);
        s.push('\n');
    }
    s
}

/// Fill structural gaps in a record: a reasoner thought is inserted before
/// every executor or summarizer message that does not follow one, and a
/// final reasoner handoff plus summarizer are appended when the record
/// does not end with a summary. The client supplies only the free text —
/// handoff markers are appended here, so completed records always
/// validate. Records with no gaps are returned unchanged without any
/// client call.
pub fn complete_roles(
    record: &TrajectoryRecord,
    client: &dyn CompletionClient,
    record_id: &str,
    max_attempts: usize,
) -> Result<TrajectoryRecord, CompleteError> {
    let reasoner_prompt = if record.functions.is_empty() {
        MATH_REASONER_COMPLETION_PROMPT
    } else {
        REASONER_COMPLETION_PROMPT
    };
    let attempts = max_attempts.max(1);
    let call = |system_prompt: &str, history: &[Message]| -> Result<String, CompleteError> {
        let user_content = render_history(history);
        let mut last = ClientError(String::from("no attempt made"));
        for _ in 0..attempts {
            match client.complete(system_prompt, &user_content) {
                Ok(text) => return Ok(text.trim().to_string()),
                Err(e) => last = e,
            }
        }
        Err(CompleteError::ClientFailed {
            record_id: record_id.to_string(),
            attempts,
            source: last,
        })
    };
    let with_marker = |thought: String, marker: &str| {
        if thought.is_empty() {
            marker.to_string()
        } else {
            format!("{thought} {marker}")
        }
    };

    let mut out: Vec<Message> = Vec::with_capacity(record.messages.len());
    for m in &record.messages {
        let needs_thought = matches!(m.author, Author::Executor | Author::Summarizer)
            && out.last().map(|p| p.author) != Some(Author::Reasoner);
        if needs_thought {
            let marker =
                if m.author == Author::Executor { MARKER_EXECUTOR } else { MARKER_SUMMARIZER };
            let thought = call(reasoner_prompt, &out)?;
            out.push(Message::new(Author::Reasoner, with_marker(thought, marker)));
        }
        out.push(m.clone());
    }
    if out.last().map(|m| m.author) != Some(Author::Summarizer) {
        let has_handoff = out
            .last()
            .is_some_and(|m| m.author == Author::Reasoner && m.content.ends_with(MARKER_SUMMARIZER));
        if !has_handoff {
            let thought = call(reasoner_prompt, &out)?;
            out.push(Message::new(Author::Reasoner, with_marker(thought, MARKER_SUMMARIZER)));
        }
        let summary = call(SUMMARIZER_COMPLETION_PROMPT, &out)?;
        out.push(Message::new(Author::Summarizer, summary));
    }
    let completed = TrajectoryRecord { functions: record.functions.clone(), messages: out };
    validate_record(&completed)?;
    Ok(completed)
}

// ---------------------------------------------------------------------------
// Corpus statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CorpusStats {
    pub records: usize,
    pub invalid_records: usize,
    pub with_functions: usize,
    pub without_functions: usize,
    pub messages_by_author: BTreeMap<String, usize>,
    pub supervised_tokens_by_role: BTreeMap<String, usize>,
    pub tokens_total: usize,
    pub findings_by_category: BTreeMap<String, usize>,
}

/// Order-independent corpus aggregation. Token histograms cover only
/// records that pass validation; message counts and rule findings cover
/// everything.
pub fn corpus_stats(records: &[TrajectoryRecord], tok: &Tokenizer) -> CorpusStats {
    let mut stats = CorpusStats { records: records.len(), ..CorpusStats::default() };
    for record in records {
        if record.functions.is_empty() {
            stats.without_functions += 1;
        } else {
            stats.with_functions += 1;
        }
        for m in &record.messages {
            *stats.messages_by_author.entry(m.author.to_string()).or_insert(0) += 1;
        }
        let report = verify_record(record, None);
        for f in &report.findings {
            let key = serde_json::to_value(f.category)
                .expect("category serializes")
                .as_str()
                .expect("category is a string")
                .to_string();
            *stats.findings_by_category.entry(key).or_insert(0) += 1;
        }
        match segment_roles(record, tok, usize::MAX) {
            Ok(sample) => {
                stats.tokens_total += sample.len();
                for (role, &sup) in sample.mask.iter().zip(&sample.supervised) {
                    if sup {
                        *stats
                            .supervised_tokens_by_role
                            .entry(role.name().to_string())
                            .or_insert(0) += 1;
                    }
                }
            }
            Err(_) => stats.invalid_records += 1,
        }
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::tokenizer::Tokenizer;

    fn minimal_record() -> TrajectoryRecord {
        TrajectoryRecord {
            functions: vec![],
            messages: vec![
                Message::new(Author::System, "You can answer directly."),
                Message::new(Author::User, "Say hi."),
                Message::new(Author::Reasoner, "Trivial. Next: summarizer."),
                Message::new(Author::Summarizer, "Hi."),
            ],
        }
    }

    fn weather_functions() -> Vec<FunctionSpec> {
        vec![
            FunctionSpec {
                name: "get-weather-data".into(),
                description: "Fetch current weather for coordinates.".into(),
                parameters: vec![ParamSpec {
                    name: "coordinates".into(),
                    ty: ParamType::Array,
                    description: "latitude and longitude".into(),
                    required: true,
                }],
            },
            FunctionSpec {
                name: "calc-binomial-probability".into(),
                description: "Probability of k successes in n trials.".into(),
                parameters: vec![
                    ParamSpec {
                        name: "n".into(),
                        ty: ParamType::Integer,
                        description: "trials".into(),
                        required: true,
                    },
                    ParamSpec {
                        name: "k".into(),
                        ty: ParamType::Integer,
                        description: "successes".into(),
                        required: true,
                    },
                    ParamSpec {
                        name: "p".into(),
                        ty: ParamType::Number,
                        description: "success probability".into(),
                        required: true,
                    },
                ],
            },
        ]
    }

    fn tool_record(executor_content: &str) -> TrajectoryRecord {
        TrajectoryRecord {
            functions: weather_functions(),
            messages: vec![
                Message::new(Author::System, "Tools available."),
                Message::new(Author::User, "Weather in Ottawa?"),
                Message::new(Author::Reasoner, "Fetch it. Next: executor."),
                Message::new(Author::Executor, executor_content),
                Message::new(Author::Observation, "18 degrees, clear."),
                Message::new(Author::Reasoner, "Done. Next: summarizer."),
                Message::new(Author::Summarizer, "It is 18 degrees and clear."),
            ],
        }
    }

    const WEATHER_ACTION: &str = "[unused11]Action: get-weather-data Arguments: \
{\"coordinates\": [45.4215, -75.6972]}[unused12]";

    #[test]
    fn minimal_record_round_trips_byte_identically() {
        let record = minimal_record();
        let text = serialize_record(&record).unwrap();
        let back = parse_record(&text).unwrap();
        assert_eq!(back, record);
        assert_eq!(serialize_record(&back).unwrap(), text);
    }

    #[test]
    fn canonical_form_is_pinned() {
        let record = minimal_record();
        let expected = "{\"functions\":[],\"system\":\"You can answer directly.\",\
\"messages\":[{\"author\":\"user\",\"content\":\"Say hi.\"},\
{\"author\":\"reasoner\",\"content\":\"Trivial. Next: summarizer.\"},\
{\"author\":\"summarizer\",\"content\":\"Hi.\"}]}";
        assert_eq!(serialize_record(&record).unwrap(), expected);
    }

    #[test]
    fn record_without_functions_key_parses_with_zero_candidates() {
        let text = "{\"system\":\"You have the capability to address the following user's \
query.\",\"messages\":[{\"author\":\"user\",\"content\":\"2+2?\"},{\"author\":\"reasoner\",\
\"content\":\"Add. Next: executor.\"},{\"author\":\"executor\",\"content\":\"print(2+2)\"},\
{\"author\":\"reasoner\",\"content\":\"Done. Next: summarizer.\"},{\"author\":\"summarizer\",\
\"content\":\"4\"}]}";
        let record = parse_record(text).unwrap();
        assert!(record.functions.is_empty());
        validate_record(&record).unwrap();
    }

    #[test]
    fn syntax_error_reports_byte_offset() {
        let text = "{\"functions\":[],\"system\":\"s\",\"messages\":[}";
        let err = parse_record(text).unwrap_err();
        match err {
            ParseError::Syntax { offset, .. } => assert_eq!(offset, text.len() - 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn system_author_inside_messages_is_rejected() {
        let text = "{\"functions\":[],\"system\":\"s\",\"messages\":[{\"author\":\"system\",\
\"content\":\"again\"}]}";
        assert!(matches!(
            parse_record(text),
            Err(ParseError::SystemInMessages { index: 0 })
        ));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = "{\"functions\":[],\"system\":\"s\",\"messages\":[],\"extra\":1}";
        assert!(matches!(parse_record(text), Err(ParseError::Syntax { .. })));
    }

    #[test]
    fn validation_names_the_broken_rule() {
        let mut r = minimal_record();
        r.messages[2].content = "no marker here".into();
        assert!(matches!(
            validate_record(&r),
            Err(ValidationError::ReasonerMarkerMissing { index: 2 })
        ));

        let mut r = minimal_record();
        r.messages.swap(2, 3);
        assert!(matches!(
            validate_record(&r),
            Err(ValidationError::SummarizerNotLast { index: 2 })
        ));

        let mut r = minimal_record();
        r.messages.insert(2, Message::new(Author::Observation, "stray"));
        assert!(matches!(
            validate_record(&r),
            Err(ValidationError::OrphanObservation { index: 2 })
        ));

        let mut r = tool_record(WEATHER_ACTION);
        r.functions.push(r.functions[0].clone());
        assert!(matches!(
            validate_record(&r),
            Err(ValidationError::DuplicateFunction { .. })
        ));

        let r = tool_record("no action block at all");
        assert!(matches!(
            validate_record(&r),
            Err(ValidationError::BadExecutorAction { index: 3, .. })
        ));
    }

    #[test]
    fn free_form_executor_text_is_fine_without_candidates() {
        let mut r = tool_record("free text");
        r.functions.clear();
        validate_record(&r).unwrap();
    }

    #[test]
    fn segmentation_labels_and_supervision_follow_the_conventions() {
        let tok = Tokenizer;
        let record = tool_record(WEATHER_ACTION);
        let sample = segment_roles(&record, &tok, 4096).unwrap();
        assert_eq!(sample.ids.len(), sample.mask.len());
        assert_eq!(sample.ids.len(), sample.supervised.len());

        // Independent span recount: supervised tokens per role must equal
        // content length + 1 (the end token) summed over generated
        // messages, with each bracket literal collapsing 10 bytes into 1.
        let mut expect: BTreeMap<RoleId, usize> = BTreeMap::new();
        for m in &record.messages {
            if let Some(role) = m.author.generated_role() {
                let collapsed = m.content.matches("[unused11]").count()
                    + m.content.matches("[unused12]").count();
                let tokens = m.content.len() - collapsed * 9;
                *expect.entry(role).or_insert(0) += tokens + 1;
            }
        }
        let mut got: BTreeMap<RoleId, usize> = BTreeMap::new();
        for (role, &sup) in sample.mask.iter().zip(&sample.supervised) {
            if sup {
                *got.entry(role).or_insert(0) += 1;
            }
        }
        assert_eq!(got, expect);

        // Observation span: labeled reasoner, unsupervised.
        let obs_text_start = sample
            .ids
            .iter()
            .position(|&id| id == TOK_OBSERVATION)
            .expect("observation marker present");
        let obs_len = record.messages[4].content.len();
        for t in obs_text_start..obs_text_start + 1 + obs_len {
            assert_eq!(sample.mask.0[t], RoleId::Reasoner);
            assert!(!sample.supervised[t]);
        }
    }

    #[test]
    fn prompt_spans_take_the_next_generated_role() {
        let tok = Tokenizer;
        // The only generated message is a summarizer reply, so system and
        // user context belongs to the summarizer and every supervised
        // token is a summarizer token.
        let record = TrajectoryRecord {
            functions: vec![],
            messages: vec![
                Message::new(Author::System, "s"),
                Message::new(Author::User, "u"),
                Message::new(Author::Summarizer, "done"),
            ],
        };
        let sample = segment_roles(&record, &tok, 128).unwrap();
        assert!(sample.mask.iter().all(|r| r == RoleId::Summarizer));
        let sup_count = sample.supervised.iter().filter(|&&s| s).count();
        assert_eq!(sup_count, "done".len() + 1);
    }

    #[test]
    fn supervised_positions_lie_only_in_generated_segments() {
        let tok = Tokenizer;
        let record = tool_record(WEATHER_ACTION);
        let sample = segment_roles(&record, &tok, 4096).unwrap();
        // Rebuild the generated/context flag per position independently.
        let mut generated = Vec::new();
        for m in &record.messages {
            let is_gen = m.author.generated_role().is_some();
            let collapsed = m.content.matches("[unused11]").count()
                + m.content.matches("[unused12]").count();
            let content_tokens = m.content.len() - collapsed * 9;
            let span = 1 + content_tokens + usize::from(is_gen);
            generated.extend(std::iter::repeat(is_gen).take(span));
        }
        assert_eq!(generated.len(), sample.len());
        for (t, &sup) in sample.supervised.iter().enumerate() {
            assert!(!sup || generated[t], "supervised context token at {t}");
        }
    }

    #[test]
    fn overlong_record_is_rejected() {
        let tok = Tokenizer;
        let record = tool_record(WEATHER_ACTION);
        match segment_roles(&record, &tok, 16) {
            Err(SegmentError::TooLong { len, max: 16 }) => assert!(len > 16),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn known_action_yields_no_findings() {
        let record = tool_record(WEATHER_ACTION);
        let report = verify_record(&record, None);
        assert!(report.is_clean(), "{:?}", report.findings);
        assert!(!report.semantic_checked);
    }

    #[test]
    fn unknown_action_name_is_a_category_one_finding() {
        let record =
            tool_record("[unused11]Action: foo Arguments: {\"coordinates\": [1, 2]}[unused12]");
        let report = verify_record(&record, None);
        assert_eq!(report.findings.len(), 1);
        assert_eq!(report.findings[0].category, FindingCategory::UnknownFunction);
        assert_eq!(report.findings[0].message_index, 3);
    }

    #[test]
    fn schema_violations_are_category_two_findings() {
        // Required "coordinates" omitted.
        let record = tool_record("[unused11]Action: get-weather-data Arguments: {}[unused12]");
        let report = verify_record(&record, None);
        assert_eq!(report.findings.len(), 1);
        assert_eq!(report.findings[0].category, FindingCategory::ParameterMismatch);
        assert!(report.findings[0].detail.contains("coordinates"));

        // Unknown parameter.
        let record = tool_record(
            "[unused11]Action: get-weather-data Arguments: {\"coordinates\": [1, 2], \
\"units\": \"metric\"}[unused12]",
        );
        let report = verify_record(&record, None);
        assert_eq!(report.findings.len(), 1);
        assert!(report.findings[0].detail.contains("units"));

        // Type mismatch: integer where array is declared.
        let record = tool_record(
            "[unused11]Action: get-weather-data Arguments: {\"coordinates\": 7}[unused12]",
        );
        let report = verify_record(&record, None);
        assert_eq!(report.findings.len(), 1);
        assert!(report.findings[0].detail.contains("expects array, got integer"));
    }

    #[test]
    fn integers_satisfy_number_but_strings_never_coerce() {
        let record = tool_record(
            "[unused11]Action: calc-binomial-probability Arguments: {\"n\": 10, \"k\": 5, \
\"p\": 1}[unused12]",
        );
        assert!(verify_record(&record, None).is_clean());

        let record = tool_record(
            "[unused11]Action: calc-binomial-probability Arguments: {\"n\": \"10\", \"k\": 5, \
\"p\": 0.5}[unused12]",
        );
        let report = verify_record(&record, None);
        assert_eq!(report.findings.len(), 1);
        assert!(report.findings[0].detail.contains("expects integer, got string"));
    }

    #[test]
    fn semantic_check_is_advisory_and_client_gated() {
        struct Disagree;
        impl CompletionClient for Disagree {
            fn complete(&self, _s: &str, _u: &str) -> Result<String, ClientError> {
                Ok("NO: wrong tool for the query".into())
            }
        }
        struct Agree;
        impl CompletionClient for Agree {
            fn complete(&self, _s: &str, _u: &str) -> Result<String, ClientError> {
                Ok("YES".into())
            }
        }
        let record = tool_record(WEATHER_ACTION);

        let report = verify_record(&record, Some(&Disagree));
        assert!(report.semantic_checked);
        assert_eq!(report.findings.len(), 1);
        assert_eq!(report.findings[0].category, FindingCategory::SemanticMismatch);

        let report = verify_record(&record, Some(&Agree));
        assert!(report.semantic_checked);
        assert!(report.is_clean());

        // Error observations mean the execution did not succeed, so there
        // is nothing to second-guess.
        let mut failed = tool_record(WEATHER_ACTION);
        failed.messages[4].content = "ERROR: unknown function get-weather-data".into();
        let report = verify_record(&failed, Some(&Disagree));
        assert!(report.is_clean());
    }

    #[test]
    fn complete_record_is_returned_unchanged_without_client_calls() {
        use std::cell::Cell;
        struct Counting<'a>(&'a Cell<usize>);
        impl CompletionClient for Counting<'_> {
            fn complete(&self, _s: &str, _u: &str) -> Result<String, ClientError> {
                self.0.set(self.0.get() + 1);
                Ok("unused".into())
            }
        }
        let calls = Cell::new(0);
        let record = tool_record(WEATHER_ACTION);
        let out = complete_roles(&record, &Counting(&calls), "r0", 3).unwrap();
        assert_eq!(out, record);
        assert_eq!(calls.get(), 0);
    }

    #[test]
    fn missing_summary_is_filled_and_last() {
        let mut record = tool_record(WEATHER_ACTION);
        record.messages.truncate(5); // ends after the observation
        let client = CannedClient { response: "SUMMARY_X".into() };
        let out = complete_roles(&record, &client, "r1", 1).unwrap();
        validate_record(&out).unwrap();
        let last = out.messages.last().unwrap();
        assert_eq!(last.author, Author::Summarizer);
        assert_eq!(last.content, "SUMMARY_X");
        // An inserted handoff precedes it.
        let prev = &out.messages[out.messages.len() - 2];
        assert_eq!(prev.author, Author::Reasoner);
        assert!(prev.content.ends_with(MARKER_SUMMARIZER));
    }

    #[test]
    fn missing_thought_before_executor_is_inserted_with_marker() {
        let record = TrajectoryRecord {
            functions: weather_functions(),
            messages: vec![
                Message::new(Author::System, "Tools available."),
                Message::new(Author::User, "Weather in Ottawa?"),
                Message::new(Author::Executor, WEATHER_ACTION),
                Message::new(Author::Reasoner, "Done. Next: summarizer."),
                Message::new(Author::Summarizer, "Clear skies."),
            ],
        };
        let client = CannedClient { response: "Fetch the weather.".into() };
        let out = complete_roles(&record, &client, "r2", 1).unwrap();
        validate_record(&out).unwrap();
        assert_eq!(out.messages[2].author, Author::Reasoner);
        assert_eq!(out.messages[2].content, "Fetch the weather. Next: executor.");
        assert_eq!(out.messages[3].author, Author::Executor);
    }

    #[test]
    fn client_failures_retry_then_surface() {
        use std::cell::Cell;
        struct FailThenOk<'a>(&'a Cell<usize>);
        impl CompletionClient for FailThenOk<'_> {
            fn complete(&self, _s: &str, _u: &str) -> Result<String, ClientError> {
                let n = self.0.get() + 1;
                self.0.set(n);
                if n < 3 {
                    Err(ClientError("transient".into()))
                } else {
                    Ok("Recovered.".into())
                }
            }
        }
        let mut record = tool_record(WEATHER_ACTION);
        record.messages.truncate(5);

        let calls = Cell::new(0);
        let err = complete_roles(&record, &FailThenOk(&calls), "r3", 2).unwrap_err();
        match err {
            CompleteError::ClientFailed { record_id, attempts, .. } => {
                assert_eq!(record_id, "r3");
                assert_eq!(attempts, 2);
            }
            other => panic!("unexpected {other:?}"),
        }

        let calls = Cell::new(0);
        let out = complete_roles(&record, &FailThenOk(&calls), "r3", 5).unwrap();
        assert_eq!(out.messages.last().unwrap().content, "Recovered.");
    }

    #[test]
    fn math_records_use_the_math_reasoner_prompt() {
        use std::cell::RefCell;
        struct Recording<'a>(&'a RefCell<Vec<String>>);
        impl CompletionClient for Recording<'_> {
            fn complete(&self, s: &str, _u: &str) -> Result<String, ClientError> {
                self.0.borrow_mut().push(s.to_string());
                Ok("First, extract n. Finally, n answers.".into())
            }
        }
        let record = TrajectoryRecord {
            functions: vec![],
            messages: vec![
                Message::new(Author::System, "Solve math."),
                Message::new(Author::User, "2+2?"),
                Message::new(Author::Executor, "print(2+2)"),
            ],
        };
        let prompts = RefCell::new(Vec::new());
        complete_roles(&record, &Recording(&prompts), "m0", 1).unwrap();
        let prompts = prompts.into_inner();
        assert_eq!(prompts.len(), 3); // thought before executor, handoff, summary
        assert_eq!(prompts[0], MATH_REASONER_COMPLETION_PROMPT);
        assert_eq!(prompts[1], MATH_REASONER_COMPLETION_PROMPT);
        assert_eq!(prompts[2], SUMMARIZER_COMPLETION_PROMPT);
    }

    #[test]
    fn empty_corpus_gives_all_zero_stats() {
        let stats = corpus_stats(&[], &Tokenizer);
        assert_eq!(stats, CorpusStats::default());
    }

    #[test]
    fn stats_match_a_hand_tally_and_ignore_order() {
        let tok = Tokenizer;
        let records = vec![
            minimal_record(),
            tool_record(WEATHER_ACTION),
            tool_record("[unused11]Action: foo Arguments: {}[unused12]"),
        ];
        let stats = corpus_stats(&records, &tok);
        assert_eq!(stats.records, 3);
        assert_eq!(stats.invalid_records, 0);
        assert_eq!(stats.with_functions, 2);
        assert_eq!(stats.without_functions, 1);
        assert_eq!(stats.messages_by_author["system"], 3);
        assert_eq!(stats.messages_by_author["reasoner"], 5);
        assert_eq!(stats.messages_by_author["observation"], 2);
        assert_eq!(stats.findings_by_category["unknown_function"], 1);
        // Hand recount of one role's supervised tokens:
        // minimal: "Trivial. Next: summarizer." (26+1)
        // tool x2: "Fetch it. Next: executor." (25+1) + "Done. Next: summarizer." (23+1)
        assert_eq!(
            stats.supervised_tokens_by_role["reasoner"],
            27 + 2 * (26 + 24)
        );

        let mut reversed = records.clone();
        reversed.reverse();
        assert_eq!(corpus_stats(&reversed, &tok), stats);
    }
}
