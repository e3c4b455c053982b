//! Desk-scale evaluation: edit-distance accuracy, function-call matching,
//! routed-adapter similarity grids, and pass rates over mock task suites.

use crate::adapter::RoleId;
use crate::backbone::geometry::ModuleKind;
use crate::backbone::model::MorModel;
use crate::datapipe::Author;
use crate::orchestrator::{
    build_environment, run_episode, EpisodeLimits, Outcome, ParsedAction, RoleModel,
    ToolBinding, ToolError,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fmt::Write as _;
use thiserror::Error;

// ---------------------------------------------------------------------------
// String and action metrics
// ---------------------------------------------------------------------------

/// Edit-distance accuracy: `1 - levenshtein(pred, reference) / max(len)`,
/// over characters, with two empty strings scoring 1. Symmetric, bounded
/// in [0, 1], and 1 exactly when the strings are equal.
pub fn levenshtein_accuracy(pred: &str, reference: &str) -> f64 {
    let a: Vec<char> = pred.chars().collect();
    let b: Vec<char> = reference.chars().collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let subst = prev[j] + usize::from(ca != cb);
            curr[j + 1] = subst.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    let dist = prev[b.len()];
    1.0 - dist as f64 / a.len().max(b.len()) as f64
}

/// Structural value equality with numeric canonicalization: a number
/// equals another when their `f64` readings agree, so `10` matches `10.0`.
/// Containers compare recursively; extra or missing object keys differ.
fn values_equal(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => match (x.as_f64(), y.as_f64()) {
            (Some(fx), Some(fy)) => fx == fy,
            _ => x == y,
        },
        (Value::Array(xs), Value::Array(ys)) => {
            xs.len() == ys.len() && xs.iter().zip(ys).all(|(x, y)| values_equal(x, y))
        }
        (Value::Object(xs), Value::Object(ys)) => {
            xs.len() == ys.len()
                && xs.iter().all(|(k, x)| ys.get(k).is_some_and(|y| values_equal(x, y)))
        }
        _ => a == b,
    }
}

/// Exact call match: same function name and canonically equal arguments.
pub fn action_match(pred: &ParsedAction, gold: &ParsedAction) -> bool {
    pred.name == gold.name
        && pred.arguments.len() == gold.arguments.len()
        && pred
            .arguments
            .iter()
            .all(|(k, v)| gold.arguments.get(k).is_some_and(|g| values_equal(v, g)))
}

// ---------------------------------------------------------------------------
// Routed-adapter similarity
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimilarityError {
    #[error("no adapter group at layer {layer} module {kind}")]
    NoSuchProjection { layer: usize, kind: ModuleKind },
}

/// Pairwise cosine similarity of one group's routed products `down_i up_i`,
/// flattened to vectors. Symmetric with a unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityMatrix {
    pub role: RoleId,
    pub layer: usize,
    pub kind: ModuleKind,
    pub entries: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    /// Mean |cosine| over the strictly-upper triangle; 0 for fewer than
    /// two routed pairs.
    pub fn mean_off_diagonal_abs(&self) -> f64 {
        let n = self.entries.len();
        if n < 2 {
            return 0.0;
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            for j in i + 1..n {
                sum += self.entries[i][j].abs();
                count += 1;
            }
        }
        sum / count as f64
    }

    /// Comma-separated grid with a one-line header comment describing the
    /// source projection and cell semantics.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# routed-pair cosine similarity; role={} layer={} module={}; \
cell (i, j) = cos(flat(down_i up_i), flat(down_j up_j))\n",
            self.role, self.layer, self.kind
        );
        for row in &self.entries {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }
}

/// Compute the similarity grid for one role's routed pairs at one adapted
/// projection. Zero products keep a unit diagonal but contribute zero
/// off-diagonal similarity.
pub fn lora_similarity_matrix(
    model: &MorModel,
    role: RoleId,
    layer: usize,
    kind: ModuleKind,
) -> Result<SimilarityMatrix, SimilarityError> {
    let mor_layer = model
        .adapters
        .get(&(layer, kind))
        .ok_or(SimilarityError::NoSuchProjection { layer, kind })?;
    let group = &mor_layer.groups[role.index()];
    let flats: Vec<Vec<f64>> = group
        .routed
        .iter()
        .map(|pair| pair.down.dot(&pair.up).into_iter().collect())
        .collect();
    let norms: Vec<f64> = flats
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let n = flats.len();
    let mut entries = vec![vec![0.0; n]; n];
    for i in 0..n {
        entries[i][i] = 1.0;
        for j in i + 1..n {
            let cos = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let dot: f64 = flats[i].iter().zip(&flats[j]).map(|(a, b)| a * b).sum();
                dot / (norms[i] * norms[j])
            };
            entries[i][j] = cos;
            entries[j][i] = cos;
        }
    }
    Ok(SimilarityMatrix { role, layer, kind, entries })
}

// ---------------------------------------------------------------------------
// Task suites
// ---------------------------------------------------------------------------

/// One mock task: a query over a tool registry, the calls a correct agent
/// would make (in order), and keywords the final summary must mention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalTask {
    pub name: String,
    pub query: String,
    pub tools: Vec<ToolBinding>,
    #[serde(default)]
    pub gold_actions: Vec<ParsedAction>,
    #[serde(default)]
    pub gold_keywords: Vec<String>,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("task suite is empty")]
    EmptyTasks,
    #[error("task \"{task}\": gold action \"{action}\" names no registered tool")]
    UnknownGoldAction { task: String, action: String },
    #[error("task \"{task}\": {source}")]
    Environment {
        task: String,
        #[source]
        source: ToolError,
    },
}

/// Per-task scoring: what happened, how the executed calls compare to
/// gold, and how much of the expected summary vocabulary survived.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskResult {
    pub name: String,
    pub outcome: Outcome,
    pub executor_turns: usize,
    /// Positionally aligned gold matches over `max(|executed|, |gold|)`;
    /// 1 when both lists are empty.
    pub action_precision: f64,
    /// Case-insensitive fraction of gold keywords appearing in the final
    /// summary; 1 when no keywords are required.
    pub keyword_hit_rate: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskResult>,
    pub pass_rate: f64,
}

impl EvalReport {
    /// One line per task plus a summary line, for operator consumption.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tasks {
            let _ = writeln!(
                out,
                "task {:<20} {:<9} actions {:.3} keywords {:.3} -> {}",
                t.name,
                format!("{:?}", t.outcome).to_lowercase(),
                t.action_precision,
                t.keyword_hit_rate,
                if t.passed { "pass" } else { "fail" }
            );
        }
        let _ = writeln!(
            out,
            "pass rate {:.3} ({}/{})",
            self.pass_rate,
            self.tasks.iter().filter(|t| t.passed).count(),
            self.tasks.len()
        );
        out
    }
}

fn score_actions(executed: &[ParsedAction], gold: &[ParsedAction]) -> f64 {
    if executed.is_empty() && gold.is_empty() {
        return 1.0;
    }
    let matches = executed
        .iter()
        .zip(gold)
        .filter(|(p, g)| action_match(p, g))
        .count();
    matches as f64 / executed.len().max(gold.len()) as f64
}

fn score_keywords(summary: Option<&str>, keywords: &[String]) -> f64 {
    if keywords.is_empty() {
        return 1.0;
    }
    let Some(summary) = summary else { return 0.0 };
    let haystack = summary.to_lowercase();
    let hits = keywords
        .iter()
        .filter(|k| haystack.contains(&k.to_lowercase()))
        .count();
    hits as f64 / keywords.len() as f64
}

/// Run one task: build its environment, drive an episode, and score the
/// executed calls and summary against gold.
pub fn eval_task(
    model: &mut dyn RoleModel,
    task: &EvalTask,
    limits: EpisodeLimits,
) -> Result<TaskResult, EvalError> {
    for gold in &task.gold_actions {
        if !task.tools.iter().any(|b| b.spec.name == gold.name) {
            return Err(EvalError::UnknownGoldAction {
                task: task.name.clone(),
                action: gold.name.clone(),
            });
        }
    }
    let mut env = build_environment(&task.tools)
        .map_err(|source| EvalError::Environment { task: task.name.clone(), source })?;
    let report = run_episode(model, &mut env, &task.query, limits);
    let executed: Vec<ParsedAction> = env
        .call_log()
        .iter()
        .map(|c| ParsedAction { name: c.name.clone(), arguments: c.arguments.clone() })
        .collect();
    let summary = report
        .transcript
        .messages
        .iter()
        .rev()
        .find(|m| m.author == Author::Summarizer)
        .map(|m| m.content.as_str());
    let action_precision = score_actions(&executed, &task.gold_actions);
    let keyword_hit_rate = score_keywords(summary, &task.gold_keywords);
    let passed = report.outcome == Outcome::Solved
        && action_precision == 1.0
        && keyword_hit_rate == 1.0;
    Ok(TaskResult {
        name: task.name.clone(),
        outcome: report.outcome,
        executor_turns: report.executor_turns,
        action_precision,
        keyword_hit_rate,
        passed,
    })
}

/// Score a whole suite with one model, in order. A scripted model's
/// outputs are consumed across tasks, so fixtures concatenate their
/// per-task scripts.
pub fn eval_pass_rate(
    model: &mut dyn RoleModel,
    tasks: &[EvalTask],
    limits: EpisodeLimits,
) -> Result<EvalReport, EvalError> {
    if tasks.is_empty() {
        return Err(EvalError::EmptyTasks);
    }
    let mut results = Vec::with_capacity(tasks.len());
    for task in tasks {
        results.push(eval_task(model, task, limits)?);
    }
    let pass_rate =
        results.iter().filter(|t| t.passed).count() as f64 / results.len() as f64;
    Ok(EvalReport { tasks: results, pass_rate })
}
