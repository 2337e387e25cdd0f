//! `proact` — preprocess / simulate / train / evaluate / profile.
//!
//! Config precedence: command-line flags > environment (PROACT_SEED,
//! PROACT_CONFIG) > config file defaults > built-in defaults.
//! Exit codes: 0 success, 2 config error, 3 I/O or input-format error,
//! 4 numeric failure.

use clap::{Args, Parser, Subcommand};
use proact_core::data::{derive_labels, segment_clips, split_caption, stratify, AsrSegment, StratifyQuotas};
use proact_core::losses::{train_head, LabelTimeline, LossConfig, TrainOptions};
use proact_core::metrics::{pauc, temporal_f1, timediff, GtInterval, PredTimeline, TimeDiffConfig};
use proact_core::model::{Action, Model, ModelConfig, ModelWeights};
use proact_core::streaming::{profile_row, profile_table, ChunkInput, EngineConfig, StepRecord, StreamEngine};
use proact_core::tokenizer::Tokenizer;
use proact_core::{Checkpoint, CheckpointError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Debug)]
enum CliError {
    Config(String),
    Io(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Model(m) => CliError::Config(m.to_string()),
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<proact_core::streaming::StreamError> for CliError {
    fn from(e: proact_core::streaming::StreamError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<proact_core::losses::LossError> for CliError {
    fn from(e: proact_core::losses::LossError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<proact_core::metrics::MetricError> for CliError {
    fn from(e: proact_core::metrics::MetricError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<proact_core::data::DataError> for CliError {
    fn from(e: proact_core::data::DataError) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Optional defaults file pointed to by PROACT_CONFIG.
#[derive(Debug, Default, Deserialize)]
struct FileConfig {
    seed: Option<u64>,
    tau: Option<f64>,
    window: Option<usize>,
    steps: Option<usize>,
    alpha: Option<f64>,
    gamma: Option<f64>,
    learning_rate: Option<f64>,
    system_prompt: Option<String>,
}

fn load_file_config() -> Result<FileConfig, CliError> {
    match std::env::var("PROACT_CONFIG") {
        Ok(path) => {
            let raw = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Io(format!("PROACT_CONFIG {path}: {e}")))?;
            serde_json::from_str(&raw)
                .map_err(|e| CliError::Config(format!("PROACT_CONFIG {path}: {e}")))
        }
        Err(_) => Ok(FileConfig::default()),
    }
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var("PROACT_SEED") {
        Ok(v) => v
            .parse()
            .map(Some)
            .map_err(|e| CliError::Config(format!("PROACT_SEED: {e}"))),
        Err(_) => Ok(None),
    }
}

fn resolve<T>(flag: Option<T>, env: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(env).or(file).unwrap_or(default)
}

#[derive(Parser)]
#[command(name = "proact", version, about = "Streaming proactive-response pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// ASR transcript -> per-second captions, labels, and a clip manifest.
    Preprocess(PreprocessArgs),
    /// Run a checkpoint over a chunk stream, producing a decision log.
    Simulate(SimulateArgs),
    /// Train the response head on labeled chunk streams.
    Train(TrainArgs),
    /// Score a decision log against ground-truth intervals.
    Evaluate(EvaluateArgs),
    /// Timing table across window sizes (and optional frame-token counts).
    Profile(ProfileArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// ASR JSONL: {"start","end","text","speaker"} per line.
    #[arg(long)]
    asr: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 36)]
    clip_len: u64,
    #[arg(long, default_value_t = 18)]
    overlap: u64,
    /// Label horizon in seconds; default covers the last caption.
    #[arg(long)]
    horizon: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Stream JSONL: {"t","visual","query","history"} per line.
    #[arg(long)]
    stream: PathBuf,
    /// Checkpoint JSON produced by `train`.
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    system_prompt: Option<String>,
    /// Write zeroed timings for byte-reproducible output.
    #[arg(long, default_value_t = false)]
    no_timings: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of stream JSONL files.
    #[arg(long)]
    streams: PathBuf,
    /// Directory of label JSON files ([0,1,...]) matching stream stems.
    #[arg(long)]
    labels: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss-curve CSV path.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Starting checkpoint; omitted -> fresh seeded weights.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    system_prompt: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Decision log JSONL from `simulate`.
    #[arg(long)]
    run: PathBuf,
    /// Ground-truth intervals JSON: [{"a": int, "b": int}, ...].
    #[arg(long)]
    gt: PathBuf,
    /// Judge scores JSONL {"t","score"}; omitted -> no pauc field.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Report path; omitted -> stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    delta: i64,
    #[arg(long, default_value_t = 1.0)]
    penalty_alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    omega: f64,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    stream: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Comma-separated window sizes, one table row each.
    #[arg(long, value_delimiter = ',', default_value = "8192,16384")]
    windows: Vec<usize>,
    /// Comma-separated visual-token counts; each gets its own table.
    #[arg(long, value_delimiter = ',')]
    frame_tokens: Vec<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    system_prompt: Option<String>,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| {
            CliError::Io(format!("{} line {}: {e}", path.display(), i + 1))
        })?;
        out.push(v);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut f, item)
            .map_err(|e| CliError::Io(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn cmd_preprocess(a: &PreprocessArgs, file_cfg: &FileConfig) -> Result<(), CliError> {
    let segments: Vec<AsrSegment> = read_jsonl(&a.asr)?;
    std::fs::create_dir_all(&a.out_dir)?;

    let mut captions = Vec::new();
    for seg in &segments {
        captions.extend(split_caption(seg)?);
    }
    captions.sort_by_key(|c| c.second);
    let horizon = a
        .horizon
        .unwrap_or_else(|| captions.last().map_or(1, |c| c.second + 1));
    write_jsonl(&a.out_dir.join("captions.jsonl"), &captions)?;

    let labels = if captions.is_empty() {
        Vec::new()
    } else {
        derive_labels(&captions, horizon)?.labels().to_vec()
    };
    std::fs::write(
        a.out_dir.join("labels.json"),
        serde_json::to_string(&labels).map_err(|e| CliError::Io(e.to_string()))?,
    )?;

    let mut clips = segment_clips(horizon, a.clip_len, a.overlap)?;
    for c in &mut clips {
        let span = &labels
            .get(c.start_s as usize..c.end_s as usize)
            .unwrap_or(&[]);
        if !span.is_empty() {
            c.response_rate =
                span.iter().map(|&y| y as f64).sum::<f64>() / span.len() as f64;
        }
    }
    let seed = resolve(a.seed, env_seed()?, file_cfg.seed, 0);
    let sampled = stratify(&clips, &StratifyQuotas::default(), seed);
    let manifest = serde_json::json!({
        "clip_len": a.clip_len,
        "overlap": a.overlap,
        "horizon": horizon,
        "clips": clips,
        "sampled": sampled,
    });
    std::fs::write(
        a.out_dir.join("clips.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?,
    )?;

    println!(
        "preprocess: {} segments, {} caption seconds, {} clips ({} sampled)",
        segments.len(),
        captions.len(),
        clips.len(),
        sampled.len()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(Model, Tokenizer), CliError> {
    let ckpt = Checkpoint::load(path)?;
    Ok(ckpt.into_model()?)
}

fn cmd_simulate(a: &SimulateArgs, file_cfg: &FileConfig) -> Result<(), CliError> {
    let (model, tokenizer) = load_model(&a.weights)?;
    let chunks: Vec<ChunkInput> = read_jsonl(&a.stream)?;
    let tau = resolve(a.tau, None, file_cfg.tau, 0.3);
    let window = resolve(a.window, None, file_cfg.window, model.config().max_window);
    let system = a
        .system_prompt
        .clone()
        .or_else(|| file_cfg.system_prompt.clone())
        .unwrap_or_else(|| "respond when the scene calls for it".to_string());

    let cfg = EngineConfig {
        tau,
        ..EngineConfig::default()
    };
    let mut engine = StreamEngine::with_window(&model, &tokenizer, &system, cfg, window)?;
    let mut record = engine.run_stream(&chunks)?;
    if a.no_timings {
        for s in &mut record.steps {
            s.timing = proact_core::streaming::ChunkTiming {
                cache_s: 0.0,
                forward_s: 0.0,
                chunk_s: 0.0,
                token_s: None,
            };
        }
    }
    write_jsonl(&a.out, &record.steps)?;
    let spoken = record
        .steps
        .iter()
        .filter(|s| s.action == Action::Speak)
        .count();
    eprintln!(
        "simulate: {} chunks, {} speak, {} evictions",
        record.steps.len(),
        spoken,
        record.evictions.len()
    );
    Ok(())
}

/// Stream/label pairs matched by file stem.
fn load_training_pairs(
    streams_dir: &Path,
    labels_dir: &Path,
) -> Result<Vec<(Vec<ChunkInput>, LabelTimeline)>, CliError> {
    let mut stems: Vec<PathBuf> = std::fs::read_dir(streams_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(CliError::Config(format!(
            "no .jsonl streams in {}",
            streams_dir.display()
        )));
    }
    let mut pairs = Vec::new();
    for stream_path in stems {
        let stem = stream_path.file_stem().unwrap().to_string_lossy();
        let label_path = labels_dir.join(format!("{stem}.json"));
        let chunks: Vec<ChunkInput> = read_jsonl(&stream_path)?;
        let raw = std::fs::read_to_string(&label_path)
            .map_err(|e| CliError::Io(format!("{}: {e}", label_path.display())))?;
        let ys: Vec<u8> = serde_json::from_str(&raw)
            .map_err(|e| CliError::Io(format!("{}: {e}", label_path.display())))?;
        if ys.len() != chunks.len() {
            return Err(CliError::Config(format!(
                "{stem}: {} labels for {} chunks",
                ys.len(),
                chunks.len()
            )));
        }
        let labels = LabelTimeline::new(ys).map_err(|e| CliError::Config(e.to_string()))?;
        pairs.push((chunks, labels));
    }
    Ok(pairs)
}

/// Tokenizer sized to the training corpus: visual range covers every index
/// seen; word list from queries and histories.
fn tokenizer_for_streams(pairs: &[(Vec<ChunkInput>, LabelTimeline)]) -> Tokenizer {
    let mut max_visual = 31u32;
    let mut words = Vec::new();
    for (chunks, _) in pairs {
        for c in chunks {
            max_visual = max_visual.max(c.visual.iter().copied().max().unwrap_or(0));
            for text in c.query.iter().chain(c.history.iter()) {
                words.extend(text.split_whitespace().map(str::to_string));
            }
        }
    }
    Tokenizer::from_words(max_visual as usize + 1, words)
}

fn cmd_train(a: &TrainArgs, file_cfg: &FileConfig) -> Result<(), CliError> {
    let pairs = load_training_pairs(&a.streams, &a.labels)?;
    let seed = resolve(a.seed, env_seed()?, file_cfg.seed, 0);
    let (mut model, tokenizer) = match &a.init {
        Some(path) => load_model(path)?,
        None => {
            let tokenizer = tokenizer_for_streams(&pairs);
            let cfg = ModelConfig::desk_scale(tokenizer.vocab_size());
            let weights = ModelWeights::seeded(cfg, seed)
                .map_err(|e| CliError::Config(e.to_string()))?;
            (
                Model::new(weights).map_err(|e| CliError::Config(e.to_string()))?,
                tokenizer,
            )
        }
    };

    let steps = resolve(a.steps, None, file_cfg.steps, 2000);
    let loss_cfg = LossConfig {
        alpha: resolve(a.alpha, None, file_cfg.alpha, 0.2),
        gamma: resolve(a.gamma, None, file_cfg.gamma, 5.0),
        ..LossConfig::default()
    };
    let opts = TrainOptions {
        steps,
        learning_rate: resolve(a.learning_rate, None, file_cfg.learning_rate, 0.01),
    };
    let window = resolve(a.window, None, file_cfg.window, 512);
    let system = a
        .system_prompt
        .clone()
        .or_else(|| file_cfg.system_prompt.clone())
        .unwrap_or_else(|| "respond when the scene calls for it".to_string());

    let samples = proact_core::synthetic::build_head_samples(
        &model, &tokenizer, &system, &pairs, window,
    )?;
    let (head, curve) = train_head(&samples, model.response_head(), &loss_cfg, &opts)?;
    model.set_response_head(head);

    if let Some(csv) = &a.loss_csv {
        let mut f = std::io::BufWriter::new(std::fs::File::create(csv)?);
        writeln!(f, "step,main,cls,reg,total")?;
        for p in &curve {
            writeln!(f, "{},{},{},{},{}", p.step, p.main, p.cls, p.reg, p.total)?;
        }
    }
    let weights = model.weights().clone();
    Checkpoint::new(tokenizer, weights).save(&a.out)?;
    let final_loss = curve.last().map(|p| p.total);
    println!(
        "train: {} streams, {} steps, final loss {}",
        pairs.len(),
        steps,
        final_loss.map_or("n/a".to_string(), |l| format!("{l:.6}"))
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
struct ScoreLine {
    t: i64,
    score: u8,
}

#[derive(Debug, Serialize)]
struct MetricsReport {
    timediff: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pauc: Option<f64>,
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let steps: Vec<StepRecord> = read_jsonl(&a.run)?;
    let raw = std::fs::read_to_string(&a.gt)
        .map_err(|e| CliError::Io(format!("{}: {e}", a.gt.display())))?;
    let gt: Vec<GtInterval> = serde_json::from_str(&raw)
        .map_err(|e| CliError::Io(format!("{}: {e}", a.gt.display())))?;

    let pred = PredTimeline::from_speak_seconds(
        steps
            .iter()
            .filter(|s| s.action == Action::Speak)
            .map(|s| s.t as i64),
    );
    let horizon = steps.iter().map(|s| s.t as i64 + 1).max().unwrap_or(1);

    let td_cfg = TimeDiffConfig {
        delta: a.delta,
        penalty_alpha: a.penalty_alpha,
    };
    let (_, td) = timediff(&gt, &pred, &td_cfg)?;
    let f1 = temporal_f1(&gt, &pred, horizon)?;
    let pauc_val = match &a.scores {
        Some(path) => {
            let lines: Vec<ScoreLine> = read_jsonl(path)?;
            let scores: BTreeMap<i64, u8> = lines.into_iter().map(|s| (s.t, s.score)).collect();
            Some(pauc(&gt, &pred, &scores, a.omega, 0.0)?)
        }
        None => None,
    };
    let report = MetricsReport {
        timediff: td,
        precision: f1.precision,
        recall: f1.recall,
        f1: f1.f1,
        pauc: pauc_val,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?;
    match &a.out {
        Some(path) => std::fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_profile(a: &ProfileArgs, file_cfg: &FileConfig) -> Result<(), CliError> {
    let (model, tokenizer) = load_model(&a.weights)?;
    let base_chunks: Vec<ChunkInput> = read_jsonl(&a.stream)?;
    if a.windows.is_empty() {
        return Err(CliError::Config("need at least one --windows value".into()));
    }
    let tau = resolve(a.tau, None, file_cfg.tau, 0.3);
    let system = a
        .system_prompt
        .clone()
        .or_else(|| file_cfg.system_prompt.clone())
        .unwrap_or_else(|| "respond when the scene calls for it".to_string());

    let frame_settings: Vec<Option<usize>> = if a.frame_tokens.is_empty() {
        vec![None]
    } else {
        a.frame_tokens.iter().map(|&k| Some(k)).collect()
    };

    for ft in frame_settings {
        let chunks: Vec<ChunkInput> = match ft {
            None => base_chunks.clone(),
            Some(k) => base_chunks
                .iter()
                .map(|c| {
                    let mut v = c.visual.clone();
                    if v.is_empty() {
                        v = vec![0; k];
                    } else {
                        while v.len() < k {
                            v.push(v[v.len() % c.visual.len().max(1)]);
                        }
                        v.truncate(k);
                    }
                    ChunkInput {
                        visual: v,
                        ..c.clone()
                    }
                })
                .collect(),
        };
        let max_visual = chunks.iter().map(|c| c.visual.len()).max().unwrap_or(0);
        let mut rows = Vec::new();
        for &ws in &a.windows {
            let cfg = EngineConfig {
                tau,
                max_visual_per_chunk: max_visual.max(EngineConfig::default().max_visual_per_chunk),
            };
            let mut engine =
                StreamEngine::with_window(&model, &tokenizer, &system, cfg, ws)?;
            let record = engine.run_stream(&chunks)?;
            rows.push(profile_row(ws, &record));
        }
        if let Some(k) = ft {
            println!("frame_tokens = {k}");
        }
        print!("{}", profile_table(&rows));
    }
    Ok(())
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    let file_cfg = load_file_config()?;
    match &cli.cmd {
        Cmd::Preprocess(a) => cmd_preprocess(a, &file_cfg),
        Cmd::Simulate(a) => cmd_simulate(a, &file_cfg),
        Cmd::Train(a) => cmd_train(a, &file_cfg),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Profile(a) => cmd_profile(a, &file_cfg),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
