//! Operator surface for the mixture-of-roles toolkit.
//!
//! Every artifact-producing command (`train`, `infer`, `eval`) writes a
//! run manifest next to its outputs: the resolved configuration, the
//! seed, and sha256 stamps of every input and output file. `rerun`
//! re-executes a manifest into a fresh directory and verifies the new
//! artifacts are bit-identical.
//!
//! Exit codes: 0 success, 1 validation failure (bad data, failed check,
//! reproduction drift), 2 usage or environment error.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use moragent::adapter::RoleId;
use moragent::backbone::checkpoint::{load_checkpoint, payload_path};
use moragent::backbone::config::{BackboneConfig, MorConfig};
use moragent::backbone::geometry::{count_trainable_params, GeometrySpec, ModuleKind};
use moragent::backbone::model::{inject_mor, Backbone, MorModel};
use moragent::backbone::tokenizer::Tokenizer;
use moragent::datapipe::{
    complete_roles, corpus_stats, parse_record, segment_roles, serialize_record,
    validate_record, verify_record, CannedClient, TokenizedSample, TrajectoryRecord,
};
use moragent::datapipe::synth::{memorization_corpus, random_corpus, seed_defects};
use moragent::evalkit::{eval_pass_rate, EvalTask};
use moragent::objectives::LoadStats;
use moragent::orchestrator::{
    build_environment, run_episode, EpisodeLimits, ToolBinding, TrainedRoleModel,
};
use moragent::trainer::{
    finite_diff_gradcheck, gradcheck_preset, train, TrainConfig,
};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "moragent", version, about = "Mixture-of-roles adapters: train, infer, evaluate, and manage trajectory data")]
struct Cli {
    /// Output mode: human-readable text or one JSON record per line.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Records,
}

#[derive(Subcommand)]
enum Command {
    /// Fit adapters on a trajectory corpus; writes checkpoints, metrics,
    /// and a run manifest into the output directory.
    Train(TrainArgs),
    /// Answer one query with a trained checkpoint, optionally over tools.
    Infer(InferArgs),
    /// Score a trained checkpoint against a task-suite file.
    Eval(EvalArgs),
    /// Trajectory corpus utilities.
    #[command(subcommand)]
    Data(DataCommand),
    /// Trainable-parameter budget for a projection geometry.
    CountParams(CountParamsArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Router load statistics of a checkpoint over a corpus.
    InspectRouting(InspectRoutingArgs),
    /// Re-execute a recorded run and verify bit-identical outputs.
    Rerun(RerunArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with `backbone`, `mor`, and `train` sections; every
    /// field is optional and defaults to the desk-scale configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training corpus, one trajectory record per line.
    #[arg(long)]
    data: PathBuf,
    /// Directory for checkpoints, metrics.jsonl, and manifest.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides the config file's shuffle seed (and MORAGENT_SEED).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint manifest written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// The user query to answer.
    #[arg(long)]
    query: String,
    /// JSON file with tool bindings (spec + built-in handler config).
    #[arg(long)]
    tools: Option<PathBuf>,
    /// Executor turns allowed before the episode is forced to summarize.
    #[arg(long, default_value_t = 6)]
    max_steps: usize,
    /// Token budget per generated message.
    #[arg(long, default_value_t = 256)]
    max_new: usize,
    /// Transcript destination (record line + episode summary line).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint manifest written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON array of tasks: query, tools, gold actions, gold keywords.
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, default_value_t = 6)]
    max_steps: usize,
    #[arg(long, default_value_t = 256)]
    max_new: usize,
    /// Report destination (single JSON object).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum DataCommand {
    /// Check structure and function-call consistency; writes a findings
    /// file and exits 1 when anything is wrong.
    Validate {
        #[arg(long)]
        input: PathBuf,
        /// Findings destination; defaults to `<input>.findings.json`.
        #[arg(long)]
        findings: Option<PathBuf>,
    },
    /// Re-serialize records into canonical single-line form.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Fill missing reasoner/summarizer turns using a completion client.
    Complete {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Offline canned-client response used for every gap.
        #[arg(long)]
        canned: String,
        #[arg(long, default_value_t = 3)]
        max_attempts: usize,
    },
    /// Corpus-level aggregates: authors, token histograms, findings.
    Stats {
        #[arg(long)]
        input: PathBuf,
    },
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        /// Record count (random corpus only).
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: PathBuf,
        /// Fraction of records to corrupt with verification defects.
        #[arg(long)]
        defect_rate: Option<f64>,
        /// Ground-truth destination for the seeded defects.
        #[arg(long)]
        defects_out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SynthKind {
    /// Seeded mixture of tool-calling and free-form records.
    Random,
    /// The fixed 64-record corpus used by memorization checks.
    Memorization,
}

#[derive(Args)]
struct CountParamsArgs {
    /// Geometry description (JSON); defaults to the built-in 1B-class
    /// decoder geometry.
    #[arg(long)]
    geometry: Option<PathBuf>,
    /// Adapter layout (JSON); defaults to rank 16, pair totals 5/5/4,
    /// all seven projection kinds.
    #[arg(long)]
    mor: Option<PathBuf>,
    /// Explicitly request the built-in defaults for whatever `--geometry`
    /// and `--mor` leave unspecified (which is also the implicit
    /// behaviour; the flag exists so scripts can say it out loud).
    #[arg(long)]
    defaults: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step_h: f64,
    /// Relative-error denominator floor.
    #[arg(long, default_value_t = 1e-5)]
    floor: f64,
    /// Maximum acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
}

#[derive(Args)]
struct InspectRoutingArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus whose tokens are routed, one record per line.
    #[arg(long)]
    input: PathBuf,
    /// Restrict to one layer.
    #[arg(long)]
    layer: Option<usize>,
    /// Restrict to one projection kind (query, key, value, out, gate,
    /// up, down).
    #[arg(long)]
    module: Option<String>,
}

#[derive(Args)]
struct RerunArgs {
    /// Manifest written by a previous train/infer/eval run.
    #[arg(long)]
    manifest: PathBuf,
    /// Fresh directory for the reproduced artifacts.
    #[arg(long)]
    out_dir: PathBuf,
}

/// Non-usage result of a command: clean success or a validation failure
/// that the process reports via exit code 1.
enum Outcome {
    Ok,
    ValidationFailed,
}

fn main() {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(Outcome::Ok) => {}
        Ok(Outcome::ValidationFailed) => std::process::exit(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}

fn dispatch(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Train(args) => cmd_train(args, cli.format),
        Command::Infer(args) => cmd_infer(args, cli.format),
        Command::Eval(args) => cmd_eval(args, cli.format),
        Command::Data(cmd) => match cmd {
            DataCommand::Validate { input, findings } => {
                cmd_data_validate(input, findings.as_deref(), cli.format)
            }
            DataCommand::Convert { input, output } => cmd_data_convert(input, output),
            DataCommand::Complete { input, output, canned, max_attempts } => {
                cmd_data_complete(input, output, canned, *max_attempts)
            }
            DataCommand::Stats { input } => cmd_data_stats(input, cli.format),
            DataCommand::Synth { kind, count, seed, output, defect_rate, defects_out } => {
                cmd_data_synth(*kind, *count, *seed, output, *defect_rate, defects_out.as_deref())
            }
        },
        Command::CountParams(args) => cmd_count_params(args, cli.format),
        Command::Gradcheck(args) => cmd_gradcheck(args, cli.format),
        Command::InspectRouting(args) => cmd_inspect_routing(args, cli.format),
        Command::Rerun(args) => cmd_rerun(args, cli.format),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// Seed precedence: explicit flag, then MORAGENT_SEED, then none.
fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("MORAGENT_SEED") {
        Ok(v) => Ok(Some(
            v.trim().parse().context("MORAGENT_SEED must be an unsigned integer")?,
        )),
        Err(_) => Ok(None),
    }
}

/// Progress notes go to stderr unless MORAGENT_LOG=quiet.
fn note(msg: &str) {
    if std::env::var("MORAGENT_LOG").map(|v| v == "quiet").unwrap_or(false) {
        return;
    }
    eprintln!("{msg}");
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        fs::read(path).with_context(|| format!("reading {} for checksum", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileStamp {
    path: String,
    sha256: String,
}

fn stamp(path: &Path) -> Result<FileStamp> {
    Ok(FileStamp { path: path.display().to_string(), sha256: sha256_file(path)? })
}

/// Everything needed to reproduce a run: the command, its resolved
/// configuration, the seed, and checksums of inputs and outputs. Wall
/// clock is informational and never compared.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    seed: u64,
    inputs: BTreeMap<String, FileStamp>,
    outputs: BTreeMap<String, FileStamp>,
    wall_clock_seconds: f64,
}

fn write_manifest(manifest: &RunManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(path, text + "\n")
        .with_context(|| format!("writing manifest {}", path.display()))?;
    Ok(())
}

fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading manifest {}", path.display()))?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing manifest {}", path.display()))
}

/// Resolved training setup; the on-disk config file uses the same shape
/// with every section and field optional.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    backbone: BackboneConfig,
    mor: MorConfig,
    train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: BackboneConfig::default(),
            mor: MorConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {what} {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {what} {}", path.display()))
}

/// Parse a JSONL corpus, reporting the 1-based line of the first failure.
fn read_corpus(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading corpus {}", path.display()))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record =
            parse_record(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        records.push(record);
    }
    Ok(records)
}

fn write_corpus(records: &[TrajectoryRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for (i, record) in records.iter().enumerate() {
        let line = serialize_record(record).with_context(|| format!("record {i}"))?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn tokenize_corpus(
    records: &[TrajectoryRecord],
    max_seq_len: usize,
) -> Result<Vec<TokenizedSample>> {
    let tok = Tokenizer;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| segment_roles(r, &tok, max_seq_len).with_context(|| format!("record {i}")))
        .collect()
}

fn build_model(cfg: &RunConfig) -> Result<MorModel> {
    let backbone = Backbone::new(cfg.backbone.clone())?;
    Ok(inject_mor(backbone, cfg.mor.clone())?)
}

fn load_tools(path: Option<&Path>) -> Result<Vec<ToolBinding>> {
    match path {
        None => Ok(Vec::new()),
        Some(p) => load_json(p, "tools file"),
    }
}

fn parse_module_kind(s: &str) -> Result<ModuleKind> {
    ModuleKind::ALL
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| anyhow!("unknown module kind \"{s}\"; expected query, key, value, out, gate, up, or down"))
}

// ---------------------------------------------------------------------------
// train / infer / eval
// ---------------------------------------------------------------------------

fn cmd_train(args: &TrainArgs, format: Format) -> Result<Outcome> {
    let started = Instant::now();
    let mut cfg = load_run_config(args.config.as_deref())?;
    if let Some(seed) = resolve_seed(args.seed)? {
        cfg.train.seed = seed;
    }

    let records = match read_corpus(&args.data) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("invalid corpus: {e:#}");
            return Ok(Outcome::ValidationFailed);
        }
    };
    let samples = match tokenize_corpus(&records, cfg.backbone.max_seq_len) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("invalid corpus: {e:#}");
            return Ok(Outcome::ValidationFailed);
        }
    };

    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let mut model = build_model(&cfg)?;
    note(&format!(
        "training on {} records for {} epochs (seed {})",
        samples.len(),
        cfg.train.epochs,
        cfg.train.seed
    ));

    let metrics_path = args.out_dir.join("metrics.jsonl");
    let mut metrics = fs::File::create(&metrics_path)
        .with_context(|| format!("creating {}", metrics_path.display()))?;
    let report = train(&mut model, &samples, &cfg.train, Some(&args.out_dir), &mut metrics)?;
    metrics.flush()?;
    drop(metrics);

    let mut outputs = BTreeMap::new();
    let mut names: Vec<_> = fs::read_dir(&args.out_dir)?
        .map(|e| Ok(e?.file_name().to_string_lossy().into_owned()))
        .collect::<Result<Vec<_>>>()?;
    names.sort();
    for name in names {
        if name == "manifest.json" {
            continue;
        }
        outputs.insert(name.clone(), stamp(&args.out_dir.join(&name))?);
    }

    let manifest = RunManifest {
        command: "train".into(),
        config: serde_json::to_value(&cfg)?,
        seed: cfg.train.seed,
        inputs: [("data".to_string(), stamp(&args.data)?)].into(),
        outputs,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_manifest(&manifest, &args.out_dir.join("manifest.json"))?;

    match format {
        Format::Records => {
            println!(
                "{}",
                json!({
                    "kind": "train_report",
                    "steps_run": report.steps_run,
                    "stopped_early": report.stopped_early,
                    "final_ce": report.final_ce,
                    "final_total": report.final_total,
                    "final_accuracy": report.final_accuracy,
                })
            );
        }
        Format::Text => {
            println!(
                "trained {} steps{}; final ce {:.6}, total {:.6}, accuracy {:.4}",
                report.steps_run,
                if report.stopped_early { " (stopped early)" } else { "" },
                report.final_ce,
                report.final_total,
                report.final_accuracy
            );
        }
    }
    Ok(Outcome::Ok)
}

/// Episode wiring shared by `infer`, `eval`, and their reruns.
fn episode_model<'a>(model: &'a MorModel, max_new: usize) -> TrainedRoleModel<'a> {
    TrainedRoleModel { model, tokenizer: Tokenizer, max_new }
}

fn cmd_infer(args: &InferArgs, format: Format) -> Result<Outcome> {
    let started = Instant::now();
    let model = load_checkpoint(&args.checkpoint)?;
    let bindings = load_tools(args.tools.as_deref())?;
    let mut env = build_environment(&bindings)?;
    let mut role_model = episode_model(&model, args.max_new);
    let limits = EpisodeLimits { max_executor_steps: args.max_steps };

    let report = run_episode(&mut role_model, &mut env, &args.query, limits);
    let transcript_line = serialize_record(&report.transcript)
        .map_err(|e| anyhow!("episode produced an unserializable transcript: {e}"))?;
    let summary = json!({
        "kind": "episode",
        "outcome": report.outcome,
        "executor_turns": report.executor_turns,
        "malformed_detail": report.malformed_detail,
    });
    fs::write(&args.out, format!("{transcript_line}\n{summary}\n"))
        .with_context(|| format!("writing {}", args.out.display()))?;

    let mut inputs = BTreeMap::new();
    inputs.insert("checkpoint".to_string(), stamp(&args.checkpoint)?);
    inputs.insert(
        "checkpoint_payload".to_string(),
        stamp(&payload_path(&args.checkpoint))?,
    );
    if let Some(tools) = &args.tools {
        inputs.insert("tools".to_string(), stamp(tools)?);
    }
    let manifest = RunManifest {
        command: "infer".into(),
        config: json!({
            "query": args.query,
            "max_steps": args.max_steps,
            "max_new": args.max_new,
        }),
        seed: 0,
        inputs,
        outputs: [("transcript".to_string(), stamp(&args.out)?)].into(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_manifest(&manifest, &manifest_sibling(&args.out))?;

    match format {
        Format::Records => println!("{summary}"),
        Format::Text => {
            for m in &report.transcript.messages {
                println!("{}: {}", m.author.label(), m.content);
            }
            println!(
                "outcome: {:?} after {} executor turn(s)",
                report.outcome, report.executor_turns
            );
        }
    }
    Ok(Outcome::Ok)
}

/// `<out>.manifest.json` next to a single-file artifact.
fn manifest_sibling(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn cmd_eval(args: &EvalArgs, format: Format) -> Result<Outcome> {
    let started = Instant::now();
    let model = load_checkpoint(&args.checkpoint)?;
    let tasks: Vec<EvalTask> = load_json(&args.tasks, "tasks file")?;
    let mut role_model = episode_model(&model, args.max_new);
    let limits = EpisodeLimits { max_executor_steps: args.max_steps };

    let report = eval_pass_rate(&mut role_model, &tasks, limits)?;
    let report_json = serde_json::to_string(&report)?;
    fs::write(&args.out, format!("{report_json}\n"))
        .with_context(|| format!("writing {}", args.out.display()))?;

    let mut inputs = BTreeMap::new();
    inputs.insert("checkpoint".to_string(), stamp(&args.checkpoint)?);
    inputs.insert(
        "checkpoint_payload".to_string(),
        stamp(&payload_path(&args.checkpoint))?,
    );
    inputs.insert("tasks".to_string(), stamp(&args.tasks)?);
    let manifest = RunManifest {
        command: "eval".into(),
        config: json!({ "max_steps": args.max_steps, "max_new": args.max_new }),
        seed: 0,
        inputs,
        outputs: [("report".to_string(), stamp(&args.out)?)].into(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_manifest(&manifest, &manifest_sibling(&args.out))?;

    match format {
        Format::Records => println!("{report_json}"),
        Format::Text => print!("{}", report.render_text()),
    }
    Ok(Outcome::Ok)
}

// ---------------------------------------------------------------------------
// data subcommands
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct LineFinding {
    line: usize,
    kind: String,
    detail: String,
}

fn cmd_data_validate(
    input: &Path,
    findings_path: Option<&Path>,
    format: Format,
) -> Result<Outcome> {
    let text = fs::read_to_string(input)
        .with_context(|| format!("reading corpus {}", input.display()))?;
    let mut findings: Vec<LineFinding> = Vec::new();
    let mut records = 0usize;
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        records += 1;
        let line = i + 1;
        let record = match parse_record(raw) {
            Ok(r) => r,
            Err(e) => {
                findings.push(LineFinding { line, kind: "parse".into(), detail: e.to_string() });
                continue;
            }
        };
        if let Err(e) = validate_record(&record) {
            findings.push(LineFinding { line, kind: "structure".into(), detail: e.to_string() });
            continue;
        }
        let report = verify_record(&record, None);
        for f in report.findings {
            findings.push(LineFinding {
                line,
                kind: serde_json::to_value(f.category)?.as_str().unwrap_or("finding").into(),
                detail: format!("message {}: {}", f.message_index, f.detail),
            });
        }
    }

    let default_path = input.with_file_name(format!(
        "{}.findings.json",
        input.file_name().unwrap_or_default().to_string_lossy()
    ));
    let findings_path = findings_path.map(Path::to_path_buf).unwrap_or(default_path);
    let body = json!({ "records": records, "findings": findings });
    fs::write(&findings_path, serde_json::to_string_pretty(&body)? + "\n")
        .with_context(|| format!("writing {}", findings_path.display()))?;

    match format {
        Format::Records => println!(
            "{}",
            json!({ "kind": "validate", "records": records, "findings": findings.len() })
        ),
        Format::Text => println!(
            "{} record(s), {} finding(s); details in {}",
            records,
            findings.len(),
            findings_path.display()
        ),
    }
    Ok(if findings.is_empty() { Outcome::Ok } else { Outcome::ValidationFailed })
}

fn cmd_data_convert(input: &Path, output: &Path) -> Result<Outcome> {
    let records = match read_corpus(input) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("invalid corpus: {e:#}");
            return Ok(Outcome::ValidationFailed);
        }
    };
    write_corpus(&records, output)?;
    note(&format!("converted {} record(s)", records.len()));
    Ok(Outcome::Ok)
}

fn cmd_data_complete(
    input: &Path,
    output: &Path,
    canned: &str,
    max_attempts: usize,
) -> Result<Outcome> {
    let records = match read_corpus(input) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("invalid corpus: {e:#}");
            return Ok(Outcome::ValidationFailed);
        }
    };
    let client = CannedClient { response: canned.to_string() };
    let mut completed = Vec::with_capacity(records.len());
    for (i, record) in records.iter().enumerate() {
        match complete_roles(record, &client, &format!("line {}", i + 1), max_attempts) {
            Ok(r) => completed.push(r),
            Err(e) => {
                eprintln!("completion failed: {e}");
                return Ok(Outcome::ValidationFailed);
            }
        }
    }
    write_corpus(&completed, output)?;
    note(&format!("completed {} record(s)", completed.len()));
    Ok(Outcome::Ok)
}

fn cmd_data_stats(input: &Path, format: Format) -> Result<Outcome> {
    let records = match read_corpus(input) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("invalid corpus: {e:#}");
            return Ok(Outcome::ValidationFailed);
        }
    };
    let stats = corpus_stats(&records, &Tokenizer);
    match format {
        Format::Records => println!("{}", serde_json::to_string(&stats)?),
        Format::Text => {
            println!("records            {}", stats.records);
            println!("  invalid          {}", stats.invalid_records);
            println!("  with functions   {}", stats.with_functions);
            println!("  without          {}", stats.without_functions);
            println!("tokens             {}", stats.tokens_total);
            for (author, n) in &stats.messages_by_author {
                println!("messages[{author}] {n}");
            }
            for (role, n) in &stats.supervised_tokens_by_role {
                println!("supervised[{role}] {n}");
            }
            for (cat, n) in &stats.findings_by_category {
                println!("findings[{cat}] {n}");
            }
        }
    }
    Ok(Outcome::Ok)
}

fn cmd_data_synth(
    kind: SynthKind,
    count: usize,
    seed: Option<u64>,
    output: &Path,
    defect_rate: Option<f64>,
    defects_out: Option<&Path>,
) -> Result<Outcome> {
    let seed = resolve_seed(seed)?.unwrap_or(0);
    let mut records = match kind {
        SynthKind::Random => random_corpus(count, seed),
        SynthKind::Memorization => memorization_corpus(),
    };
    if let Some(rate) = defect_rate {
        if !(0.0..=1.0).contains(&rate) {
            bail!("--defect-rate must lie in [0, 1]");
        }
        let truth = seed_defects(&mut records, seed ^ 0xDEFE_C7, rate);
        if let Some(path) = defects_out {
            fs::write(path, serde_json::to_string_pretty(&truth)? + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
        }
        note(&format!("seeded {} defect(s)", truth.len()));
    }
    write_corpus(&records, output)?;
    note(&format!("wrote {} record(s) to {}", records.len(), output.display()));
    Ok(Outcome::Ok)
}

// ---------------------------------------------------------------------------
// count-params / gradcheck / inspect-routing
// ---------------------------------------------------------------------------

fn cmd_count_params(args: &CountParamsArgs, format: Format) -> Result<Outcome> {
    let geom: GeometrySpec = match &args.geometry {
        Some(p) => load_json(p, "geometry")?,
        None => GeometrySpec::llama3_2_1b(),
    };
    let mor: MorConfig = match &args.mor {
        Some(p) => load_json(p, "adapter config")?,
        None => MorConfig::default(),
    };
    let total = count_trainable_params(&geom, &mor);

    // Per-kind split: the count is additive over target kinds, so each
    // kind's share is the count under a one-kind target set.
    let mut breakdown = Vec::new();
    for kind in ModuleKind::ALL {
        if !mor.targets.contains(&kind) {
            continue;
        }
        let mut solo = mor.clone();
        solo.targets = [kind].into_iter().collect();
        breakdown.push((kind, count_trainable_params(&geom, &solo)));
    }
    debug_assert_eq!(breakdown.iter().map(|(_, n)| n).sum::<u64>(), total);

    match format {
        Format::Records => {
            for (kind, n) in &breakdown {
                println!("{}", json!({ "kind": "params", "module": kind.name(), "count": n }));
            }
            println!("{}", json!({ "kind": "params_total", "count": total }));
        }
        Format::Text => {
            for (kind, n) in &breakdown {
                println!("{:<8} {n}", kind.name());
            }
            println!("total    {total} ({:.3e})", total as f64);
        }
    }
    Ok(Outcome::Ok)
}

fn cmd_gradcheck(args: &GradcheckArgs, format: Format) -> Result<Outcome> {
    let seed = resolve_seed(args.seed)?.unwrap_or(0);
    note(&format!("gradient check, seed {seed}"));
    let (mut model, batch) = gradcheck_preset(seed)?;
    let report = finite_diff_gradcheck(&mut model, &batch, args.step_h, args.floor)?;
    let passed = report.max_rel_err <= args.threshold;
    match format {
        Format::Records => println!(
            "{}",
            json!({
                "kind": "gradcheck",
                "n_params": report.n_params,
                "max_rel_err": report.max_rel_err,
                "mean_rel_err": report.mean_rel_err,
                "worst": report.worst,
                "passed": passed,
            })
        ),
        Format::Text => {
            println!(
                "checked {} parameters: max rel err {:.3e}, mean {:.3e}",
                report.n_params, report.max_rel_err, report.mean_rel_err
            );
            println!(
                "worst at {} (analytic {:.6e}, numeric {:.6e})",
                report.worst, report.analytic_at_worst, report.numeric_at_worst
            );
            println!("{}", if passed { "PASS" } else { "FAIL" });
        }
    }
    Ok(if passed { Outcome::Ok } else { Outcome::ValidationFailed })
}

/// Token-weighted merge of per-record load statistics.
fn merge_load(acc: &mut LoadStats, add: &LoadStats) {
    if add.token_count == 0 {
        return;
    }
    if acc.token_count == 0 {
        *acc = add.clone();
        return;
    }
    let total = (acc.token_count + add.token_count) as f64;
    let wa = acc.token_count as f64 / total;
    let wb = add.token_count as f64 / total;
    for (a, b) in acc.f.iter_mut().zip(&add.f) {
        *a = *a * wa + *b * wb;
    }
    for (a, b) in acc.p.iter_mut().zip(&add.p) {
        *a = *a * wa + *b * wb;
    }
    acc.token_count += add.token_count;
}

fn cmd_inspect_routing(args: &InspectRoutingArgs, format: Format) -> Result<Outcome> {
    let model = load_checkpoint(&args.checkpoint)?;
    let module_filter = args.module.as_deref().map(parse_module_kind).transpose()?;
    let records = match read_corpus(&args.input) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("invalid corpus: {e:#}");
            return Ok(Outcome::ValidationFailed);
        }
    };
    let samples = match tokenize_corpus(&records, model.backbone.cfg.max_seq_len) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("invalid corpus: {e:#}");
            return Ok(Outcome::ValidationFailed);
        }
    };

    let mut pooled: BTreeMap<(usize, ModuleKind, RoleId), LoadStats> = BTreeMap::new();
    for sample in &samples {
        let trace = model.forward(&sample.ids, &sample.mask)?;
        for (&(layer, kind), per_role) in &trace.selections {
            if args.layer.is_some_and(|l| l != layer) {
                continue;
            }
            if module_filter.is_some_and(|m| m != kind) {
                continue;
            }
            for role in RoleId::ALL {
                let sel = &per_role[role.index()];
                let stats = moragent::objectives::compute_load_stats(
                    &[sel],
                    sel.n_experts(),
                )?;
                pooled
                    .entry((layer, kind, role))
                    .and_modify(|acc| merge_load(acc, &stats))
                    .or_insert(stats);
            }
        }
    }
    if pooled.is_empty() {
        bail!("no routed projections matched the layer/module filters");
    }

    for ((layer, kind, role), stats) in &pooled {
        match format {
            Format::Records => println!(
                "{}",
                json!({
                    "kind": "routing",
                    "layer": layer,
                    "module": kind.name(),
                    "role": role.name(),
                    "f": stats.f,
                    "p": stats.p,
                    "tokens": stats.token_count,
                })
            ),
            Format::Text => {
                let f: Vec<String> = stats.f.iter().map(|v| format!("{v:.4}")).collect();
                let p: Vec<String> = stats.p.iter().map(|v| format!("{v:.4}")).collect();
                println!(
                    "layer {layer} {:<5} {:<10} tokens {:<5} f=[{}] p=[{}]",
                    kind.name(),
                    role.name(),
                    stats.token_count,
                    f.join(", "),
                    p.join(", ")
                );
            }
        }
    }
    Ok(Outcome::Ok)
}

// ---------------------------------------------------------------------------
// rerun
// ---------------------------------------------------------------------------

fn cmd_rerun(args: &RerunArgs, format: Format) -> Result<Outcome> {
    let manifest = read_manifest(&args.manifest)?;

    // A reproduction is only meaningful over the original inputs.
    for (name, stamp_rec) in &manifest.inputs {
        let path = Path::new(&stamp_rec.path);
        let now = sha256_file(path)
            .with_context(|| format!("input \"{name}\" ({})", stamp_rec.path))?;
        if now != stamp_rec.sha256 {
            eprintln!(
                "input \"{name}\" ({}) changed since the recorded run",
                stamp_rec.path
            );
            return Ok(Outcome::ValidationFailed);
        }
    }

    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;

    let reproduced: BTreeMap<String, FileStamp> = match manifest.command.as_str() {
        "train" => {
            let cfg: RunConfig = serde_json::from_value(manifest.config.clone())
                .context("manifest config is not a training config")?;
            let data = PathBuf::from(&manifest.inputs["data"].path);
            let train_args = TrainArgs {
                config: None,
                data,
                out_dir: args.out_dir.clone(),
                seed: None,
            };
            rerun_train(&cfg, &train_args)?
        }
        "infer" => {
            let checkpoint = PathBuf::from(&manifest.inputs["checkpoint"].path);
            let tools = manifest.inputs.get("tools").map(|s| PathBuf::from(&s.path));
            let out = args.out_dir.join(original_name(&manifest, "transcript")?);
            let infer_args = InferArgs {
                checkpoint,
                query: manifest.config["query"]
                    .as_str()
                    .context("manifest config lacks query")?
                    .to_string(),
                tools,
                max_steps: manifest.config["max_steps"].as_u64().unwrap_or(6) as usize,
                max_new: manifest.config["max_new"].as_u64().unwrap_or(256) as usize,
                out,
            };
            cmd_infer(&infer_args, Format::Records)?;
            [("transcript".to_string(), stamp(&infer_args.out)?)].into()
        }
        "eval" => {
            let checkpoint = PathBuf::from(&manifest.inputs["checkpoint"].path);
            let tasks = PathBuf::from(&manifest.inputs["tasks"].path);
            let out = args.out_dir.join(original_name(&manifest, "report")?);
            let eval_args = EvalArgs {
                checkpoint,
                tasks,
                max_steps: manifest.config["max_steps"].as_u64().unwrap_or(6) as usize,
                max_new: manifest.config["max_new"].as_u64().unwrap_or(256) as usize,
                out,
            };
            cmd_eval(&eval_args, Format::Records)?;
            [("report".to_string(), stamp(&eval_args.out)?)].into()
        }
        other => bail!("manifest command \"{other}\" is not rerunnable"),
    };

    let mut drift = Vec::new();
    for (name, original) in &manifest.outputs {
        match reproduced.get(name) {
            None => drift.push(format!("output \"{name}\" was not reproduced")),
            Some(new) if new.sha256 != original.sha256 => {
                drift.push(format!("output \"{name}\" differs from the recorded artifact"))
            }
            Some(_) => {}
        }
    }
    for name in reproduced.keys() {
        if !manifest.outputs.contains_key(name) {
            drift.push(format!("unexpected extra output \"{name}\""));
        }
    }

    match format {
        Format::Records => println!(
            "{}",
            json!({
                "kind": "rerun",
                "command": manifest.command,
                "outputs": reproduced.len(),
                "identical": drift.is_empty(),
            })
        ),
        Format::Text => {
            if drift.is_empty() {
                println!(
                    "rerun of \"{}\": {} output(s) bit-identical",
                    manifest.command,
                    reproduced.len()
                );
            } else {
                for line in &drift {
                    println!("{line}");
                }
            }
        }
    }
    Ok(if drift.is_empty() { Outcome::Ok } else { Outcome::ValidationFailed })
}

fn original_name(manifest: &RunManifest, key: &str) -> Result<std::ffi::OsString> {
    let recorded = manifest
        .outputs
        .get(key)
        .with_context(|| format!("manifest lacks output \"{key}\""))?;
    Path::new(&recorded.path)
        .file_name()
        .map(|n| n.to_os_string())
        .with_context(|| format!("output path {} has no file name", recorded.path))
}

/// Training rerun from a resolved config: the normal train path minus
/// config-file loading and seed overrides.
fn rerun_train(cfg: &RunConfig, args: &TrainArgs) -> Result<BTreeMap<String, FileStamp>> {
    let records = read_corpus(&args.data)?;
    let samples = tokenize_corpus(&records, cfg.backbone.max_seq_len)?;
    let mut model = build_model(cfg)?;
    let metrics_path = args.out_dir.join("metrics.jsonl");
    let mut metrics = fs::File::create(&metrics_path)?;
    train(&mut model, &samples, &cfg.train, Some(&args.out_dir), &mut metrics)?;
    metrics.flush()?;
    drop(metrics);

    let mut outputs = BTreeMap::new();
    let mut names: Vec<_> = fs::read_dir(&args.out_dir)?
        .map(|e| Ok(e?.file_name().to_string_lossy().into_owned()))
        .collect::<Result<Vec<_>>>()?;
    names.sort();
    for name in names {
        if name == "manifest.json" {
            continue;
        }
        outputs.insert(name.clone(), stamp(&args.out_dir.join(&name))?);
    }
    Ok(outputs)
}
