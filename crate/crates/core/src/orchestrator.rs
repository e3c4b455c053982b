//! Inference-time role loop: parsers for role outputs, a deterministic
//! tool environment, and the state machine that alternates reasoner,
//! executor, and summarizer turns until the query is solved, the executor
//! budget runs out, or a role output fails to parse.

use crate::adapter::RoleId;
use crate::backbone::model::{ModelError, MorModel};
use crate::backbone::tokenizer::{Tokenizer, ACTION_CLOSE, ACTION_OPEN, TOK_END};
use crate::datapipe::{
    segment_roles, Author, FunctionSpec, Message, SegmentError, TrajectoryRecord,
    MARKER_EXECUTOR, MARKER_SUMMARIZER,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;

// ---------------------------------------------------------------------------
// Role-output grammar
// ---------------------------------------------------------------------------

/// One function call extracted from executor output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedAction {
    pub name: String,
    pub arguments: serde_json::Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActionParseError {
    #[error("no action blocks found")]
    NoBlocks,
    #[error("action block at byte {offset} is never closed")]
    Unclosed { offset: usize },
    #[error("action block at byte {offset} has no \"Action:\" header")]
    MissingAction { offset: usize },
    #[error("action block at byte {offset} has no \"Arguments:\" section")]
    MissingArguments { offset: usize },
    #[error("action block at byte {offset} has an empty function name")]
    EmptyName { offset: usize },
    #[error("arguments of the block at byte {offset} do not parse: {message}")]
    BadArguments { offset: usize, message: String },
    #[error("arguments of the block at byte {offset} are not an object")]
    ArgumentsNotObject { offset: usize },
}

/// Extract every `[unused11]Action: NAME Arguments: {…}[unused12]` block,
/// in order. Text outside blocks (trailing handoff decoration and the
/// like) is ignored, but at least one block must be present.
pub fn parse_executor_output(text: &str) -> Result<Vec<ParsedAction>, ActionParseError> {
    let mut actions = Vec::new();
    let mut cursor = 0;
    while let Some(rel) = text[cursor..].find(ACTION_OPEN) {
        let offset = cursor + rel;
        let body_start = offset + ACTION_OPEN.len();
        let Some(rel_close) = text[body_start..].find(ACTION_CLOSE) else {
            return Err(ActionParseError::Unclosed { offset });
        };
        let body = &text[body_start..body_start + rel_close];
        let Some(action_at) = body.find("Action:") else {
            return Err(ActionParseError::MissingAction { offset });
        };
        let after_action = &body[action_at + "Action:".len()..];
        let Some(args_at) = after_action.find("Arguments:") else {
            return Err(ActionParseError::MissingArguments { offset });
        };
        let name = after_action[..args_at].trim();
        if name.is_empty() {
            return Err(ActionParseError::EmptyName { offset });
        }
        let args_text = after_action[args_at + "Arguments:".len()..].trim();
        let value: Value = serde_json::from_str(args_text).map_err(|e| {
            ActionParseError::BadArguments { offset, message: e.to_string() }
        })?;
        let Value::Object(arguments) = value else {
            return Err(ActionParseError::ArgumentsNotObject { offset });
        };
        actions.push(ParsedAction { name: name.to_string(), arguments });
        cursor = body_start + rel_close + ACTION_CLOSE.len();
    }
    if actions.is_empty() {
        return Err(ActionParseError::NoBlocks);
    }
    Ok(actions)
}

/// Canonical surface form of an action (keys in map order).
pub fn render_action(action: &ParsedAction) -> String {
    format!(
        "{ACTION_OPEN}Action: {} Arguments: {}{ACTION_CLOSE}",
        action.name,
        serde_json::to_string(&action.arguments).expect("arguments serialize")
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReasonerParseError {
    #[error("reasoner output has no \"Next: executor\" or \"Next: summarizer\" marker")]
    NoMarker,
    #[error("text after the handoff marker at byte {offset}")]
    TrailingText { offset: usize },
}

/// Split reasoner output on its final handoff marker. The thought excludes
/// the marker; anything after it must be whitespace or periods.
pub fn parse_reasoner_output(text: &str) -> Result<(String, RoleId), ReasonerParseError> {
    const TO_EXECUTOR: &str = "Next: executor";
    const TO_SUMMARIZER: &str = "Next: summarizer";
    let exec_at = text.rfind(TO_EXECUTOR);
    let summ_at = text.rfind(TO_SUMMARIZER);
    let (pos, len, role) = match (exec_at, summ_at) {
        (None, None) => return Err(ReasonerParseError::NoMarker),
        (Some(pe), None) => (pe, TO_EXECUTOR.len(), RoleId::Executor),
        (None, Some(ps)) => (ps, TO_SUMMARIZER.len(), RoleId::Summarizer),
        (Some(pe), Some(ps)) if pe > ps => (pe, TO_EXECUTOR.len(), RoleId::Executor),
        (_, Some(ps)) => (ps, TO_SUMMARIZER.len(), RoleId::Summarizer),
    };
    let tail = &text[pos + len..];
    if !tail.chars().all(|c| c == '.' || c.is_whitespace()) {
        return Err(ReasonerParseError::TrailingText { offset: pos + len });
    }
    Ok((text[..pos].trim_end().to_string(), role))
}

// ---------------------------------------------------------------------------
// Tool environment
// ---------------------------------------------------------------------------

pub type ToolHandler = Box<dyn Fn(&serde_json::Map<String, Value>) -> String>;

/// One executed call and what it returned.
#[derive(Debug, Clone, PartialEq)]
pub struct CallRecord {
    pub name: String,
    pub arguments: serde_json::Map<String, Value>,
    pub observation: String,
}

#[derive(Debug, Error)]
pub enum ToolError {
    #[error("function \"{0}\" is already registered")]
    Duplicate(String),
}

/// Registry of deterministic handlers plus a log of every invocation.
/// Unknown functions never raise: they produce an error observation that
/// flows back to the reasoner like any other result.
#[derive(Default)]
pub struct ToolEnvironment {
    tools: BTreeMap<String, (FunctionSpec, ToolHandler)>,
    call_log: Vec<CallRecord>,
}

impl ToolEnvironment {
    pub fn new() -> ToolEnvironment {
        ToolEnvironment::default()
    }

    pub fn register_tool(
        &mut self,
        spec: FunctionSpec,
        handler: ToolHandler,
    ) -> Result<(), ToolError> {
        if self.tools.contains_key(&spec.name) {
            return Err(ToolError::Duplicate(spec.name));
        }
        self.tools.insert(spec.name.clone(), (spec, handler));
        Ok(())
    }

    pub fn env_invoke(&mut self, action: &ParsedAction) -> String {
        let observation = match self.tools.get(&action.name) {
            Some((_, handler)) => handler(&action.arguments),
            None => format!("ERROR: unknown function {}", action.name),
        };
        self.call_log.push(CallRecord {
            name: action.name.clone(),
            arguments: action.arguments.clone(),
            observation: observation.clone(),
        });
        observation
    }

    pub fn call_log(&self) -> &[CallRecord] {
        &self.call_log
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    /// Registered specs in name order.
    pub fn specs(&self) -> Vec<FunctionSpec> {
        self.tools.values().map(|(s, _)| s.clone()).collect()
    }
}

/// Configurable built-in handlers, so tool registries can live in files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum HandlerSpec {
    /// Return the arguments back as canonical JSON.
    Echo,
    /// Canned lookup: the named argument's value (raw for strings, JSON
    /// otherwise) selects a row; misses fall back to `default` or an
    /// error observation.
    Table {
        key_param: String,
        rows: BTreeMap<String, String>,
        #[serde(default)]
        default: Option<String>,
    },
    /// Binomial probability of `k` successes in `n` trials at rate `p`.
    Binomial,
}

fn lookup_key(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => serde_json::to_string(other).expect("value serializes"),
    }
}

pub fn build_handler(spec: &HandlerSpec) -> ToolHandler {
    match spec {
        HandlerSpec::Echo => Box::new(|args| {
            serde_json::to_string(args).expect("arguments serialize")
        }),
        HandlerSpec::Table { key_param, rows, default } => {
            let key_param = key_param.clone();
            let rows = rows.clone();
            let default = default.clone();
            Box::new(move |args| match args.get(&key_param) {
                None => format!("ERROR: missing argument {key_param}"),
                Some(v) => {
                    let key = lookup_key(v);
                    rows.get(&key).cloned().unwrap_or_else(|| {
                        default.clone().unwrap_or(format!("ERROR: no entry for {key}"))
                    })
                }
            })
        }
        HandlerSpec::Binomial => Box::new(|args| {
            let (Some(n), Some(k), Some(p)) = (
                args.get("n").and_then(Value::as_u64),
                args.get("k").and_then(Value::as_u64),
                args.get("p").and_then(Value::as_f64),
            ) else {
                return "ERROR: binomial needs integer n, integer k, numeric p".into();
            };
            if k > n || !(0.0..=1.0).contains(&p) {
                return "ERROR: binomial needs k <= n and p in [0, 1]".into();
            }
            let mut coeff = 1.0;
            for i in 0..k {
                coeff = coeff * (n - i) as f64 / (i + 1) as f64;
            }
            let prob = coeff * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32);
            format!("Probability of {k} successes in {n} trials at p={p}: {prob}")
        }),
    }
}

/// A function spec paired with the built-in handler that implements it;
/// the on-disk form of one registry entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolBinding {
    pub spec: FunctionSpec,
    pub handler: HandlerSpec,
}

pub fn build_environment(bindings: &[ToolBinding]) -> Result<ToolEnvironment, ToolError> {
    let mut env = ToolEnvironment::new();
    for b in bindings {
        env.register_tool(b.spec.clone(), build_handler(&b.handler))?;
    }
    Ok(env)
}

// ---------------------------------------------------------------------------
// Role models
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum ModelFailure {
    #[error("scripted model exhausted after {0} outputs")]
    ScriptExhausted(usize),
    #[error(transparent)]
    Generation(#[from] ModelError),
    #[error(transparent)]
    Prompt(#[from] SegmentError),
}

/// Anything that can speak for a role given the transcript so far.
pub trait RoleModel {
    fn respond(
        &mut self,
        role: RoleId,
        transcript: &TrajectoryRecord,
    ) -> Result<String, ModelFailure>;
}

/// Canned outputs served in order, independent of role — the test double
/// for episode control flow.
#[derive(Debug, Clone)]
pub struct ScriptedModel {
    outputs: VecDeque<String>,
    served: usize,
}

impl ScriptedModel {
    pub fn new<I, S>(outputs: I) -> ScriptedModel
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedModel {
            outputs: outputs.into_iter().map(Into::into).collect(),
            served: 0,
        }
    }
}

impl RoleModel for ScriptedModel {
    fn respond(
        &mut self,
        _role: RoleId,
        _transcript: &TrajectoryRecord,
    ) -> Result<String, ModelFailure> {
        match self.outputs.pop_front() {
            Some(out) => {
                self.served += 1;
                Ok(out)
            }
            None => Err(ModelFailure::ScriptExhausted(self.served)),
        }
    }
}

/// Greedy decoding through a trained model: the transcript is segmented
/// exactly as during training, the role's marker is appended, and content
/// is generated until the end-of-message token.
pub struct TrainedRoleModel<'a> {
    pub model: &'a MorModel,
    pub tokenizer: Tokenizer,
    pub max_new: usize,
}

impl RoleModel for TrainedRoleModel<'_> {
    fn respond(
        &mut self,
        role: RoleId,
        transcript: &TrajectoryRecord,
    ) -> Result<String, ModelFailure> {
        let sample =
            segment_roles(transcript, &self.tokenizer, self.model.backbone.cfg.max_seq_len)?;
        let mut ids = sample.ids;
        let mut mask = sample.mask;
        ids.push(self.tokenizer.role_marker(role));
        mask.0.push(role);
        let full = self.model.generate_greedy(&ids, &mask, role, &[TOK_END], self.max_new)?;
        let content: Vec<u32> =
            full[ids.len()..].iter().copied().take_while(|&t| t != TOK_END).collect();
        Ok(self.tokenizer.decode(&content))
    }
}

// ---------------------------------------------------------------------------
// Episode state machine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Solved,
    GaveUp,
    Malformed,
}

/// Phases an episode moves through; the trace records every visit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Reasoning,
    Executing,
    Summarizing,
    Done,
    GaveUp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeLimits {
    /// Executor turns allowed before the next reasoning phase is forced
    /// into summarizing and the episode counts as given up.
    pub max_executor_steps: usize,
}

impl Default for EpisodeLimits {
    fn default() -> Self {
        EpisodeLimits { max_executor_steps: 6 }
    }
}

#[derive(Debug)]
pub struct EpisodeReport {
    pub transcript: TrajectoryRecord,
    pub outcome: Outcome,
    pub executor_turns: usize,
    pub phase_trace: Vec<Phase>,
    /// Present exactly when the outcome is `Malformed`.
    pub malformed_detail: Option<String>,
}

/// System prompt for an episode over the given tools; the plain variant
/// covers tool-free registries.
pub fn episode_system_prompt(specs: &[FunctionSpec]) -> String {
    if specs.is_empty() {
        "You have the capability to address the following user's query.".to_string()
    } else {
        let docs = serde_json::to_string(specs).expect("specs serialize");
        format!("You have access to the following APIs within XML tags:<tools>{docs}</tools>")
    }
}

/// Drive one episode. The reasoner speaks first and after every
/// observation; executor output is parsed and each action invoked against
/// the environment (when the registry is empty, executor text is recorded
/// verbatim with no observation); when the executor budget is exhausted,
/// the next reasoning phase is skipped in favour of a forced summary and
/// the outcome is `GaveUp`. Any unparseable role output aborts with
/// `Malformed` and the valid partial transcript.
pub fn run_episode(
    model: &mut dyn RoleModel,
    env: &mut ToolEnvironment,
    query: &str,
    limits: EpisodeLimits,
) -> EpisodeReport {
    let specs = env.specs();
    let mut transcript = TrajectoryRecord {
        messages: vec![
            Message::new(Author::System, episode_system_prompt(&specs)),
            Message::new(Author::User, query),
        ],
        functions: specs,
    };
    let mut phase_trace = vec![Phase::Reasoning];
    let mut executor_turns = 0;

    macro_rules! malformed {
        ($detail:expr) => {
            return EpisodeReport {
                transcript,
                outcome: Outcome::Malformed,
                executor_turns,
                phase_trace,
                malformed_detail: Some($detail),
            }
        };
    }

    loop {
        let forced = executor_turns >= limits.max_executor_steps;
        let next = if forced {
            RoleId::Summarizer
        } else {
            let out = match model.respond(RoleId::Reasoner, &transcript) {
                Ok(out) => out,
                Err(e) => malformed!(e.to_string()),
            };
            let (thought, next) = match parse_reasoner_output(&out) {
                Ok(parsed) => parsed,
                Err(e) => malformed!(e.to_string()),
            };
            let marker =
                if next == RoleId::Executor { MARKER_EXECUTOR } else { MARKER_SUMMARIZER };
            let content = if thought.is_empty() {
                marker.to_string()
            } else {
                format!("{thought} {marker}")
            };
            transcript.messages.push(Message::new(Author::Reasoner, content));
            next
        };

        if next == RoleId::Executor {
            phase_trace.push(Phase::Executing);
            let out = match model.respond(RoleId::Executor, &transcript) {
                Ok(out) => out,
                Err(e) => malformed!(e.to_string()),
            };
            if transcript.functions.is_empty() {
                transcript.messages.push(Message::new(Author::Executor, out));
            } else {
                let actions = match parse_executor_output(&out) {
                    Ok(actions) => actions,
                    Err(e) => malformed!(e.to_string()),
                };
                transcript.messages.push(Message::new(Author::Executor, out));
                for action in &actions {
                    let obs = env.env_invoke(action);
                    transcript.messages.push(Message::new(Author::Observation, obs));
                }
            }
            executor_turns += 1;
            phase_trace.push(Phase::Reasoning);
        } else {
            phase_trace.push(Phase::Summarizing);
            let out = match model.respond(RoleId::Summarizer, &transcript) {
                Ok(out) => out,
                Err(e) => malformed!(e.to_string()),
            };
            transcript.messages.push(Message::new(Author::Summarizer, out));
            phase_trace.push(if forced { Phase::GaveUp } else { Phase::Done });
            return EpisodeReport {
                transcript,
                outcome: if forced { Outcome::GaveUp } else { Outcome::Solved },
                executor_turns,
                phase_trace,
                malformed_detail: None,
            };
        }
    }
}
