//! Subcommands behind the `dtloss` binary: corpus generation, training,
//! evaluation and transition-matrix export. Every run writes a manifest
//! recording its arguments, resolved configuration and file hashes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use dtloss_core::datagen::{infer_classes, read_dataset, synthetic_corpus, write_dataset, SyntheticConfig};
use dtloss_core::eval::{evaluate, pr_table};
use dtloss_core::noise::TransitionMatrix;
use dtloss_core::trainer::{
    load_checkpoint, prepare_items, save_checkpoint, train, BaselineMode, Checkpoint, LossType, TrainConfig,
    TrainState,
};
use dtloss_core::{Error, Result};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const TRANSITION_FILE: &str = "noise_transition.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Parser, Debug)]
#[command(name = "dtloss", version, about = "Noisy-label training with a doubly transitional loss")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic noisy-label corpus with a known noise process.
    Gen(GenArgs),
    /// Train a model on a generated or prepared corpus.
    Train(TrainArgs),
    /// Score a trained model on a labelled dataset.
    Eval(EvalArgs),
    /// Write a model's transition matrix as CSV.
    ExportTransition(ExportArgs),
}

fn unit_interval(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn mode(s: &str) -> std::result::Result<BaselineMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GenArgs {
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    /// Training instances.
    #[arg(long, default_value_t = 10_000)]
    pub train: usize,
    /// Held-out instances.
    #[arg(long, default_value_t = 2_000)]
    pub test: usize,
    /// Probability that a label is kept correct.
    #[arg(long, default_value_t = 0.7, value_parser = unit_interval)]
    pub noise_keep: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "DTLOSS_OUT_DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 400)]
    pub vocab: usize,
    #[arg(long, default_value_t = 10)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0.5, value_parser = unit_interval)]
    pub signal_strength: f64,
    #[arg(long, default_value_t = 8)]
    pub signal_tokens: usize,
    #[arg(long, default_value_t = 2)]
    pub span_len: usize,
    #[arg(long, default_value_t = 4)]
    pub max_bag_size: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainArgs {
    /// Corpus directory (with train.jsonl) or a dataset file.
    #[arg(long)]
    pub data: PathBuf,
    /// TOML file of training settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = mode)]
    pub mode: Option<BaselineMode>,
    #[arg(long, env = "DTLOSS_OUT_DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub main_epochs: Option<usize>,
    #[arg(long)]
    pub j_steps: Option<usize>,
    #[arg(long)]
    pub t_update_every: Option<usize>,
    #[arg(long)]
    pub em_iterations: Option<usize>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many optimizer steps and save a resumable checkpoint.
    #[arg(long)]
    pub halt_after_steps: Option<usize>,
}

impl TrainArgs {
    fn has_overrides(&self) -> bool {
        self.config.is_some()
            || self.mode.is_some()
            || self.seed.is_some()
            || self.learning_rate.is_some()
            || self.batch_size.is_some()
            || self.pretrain_epochs.is_some()
            || self.main_epochs.is_some()
            || self.j_steps.is_some()
            || self.t_update_every.is_some()
            || self.em_iterations.is_some()
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve_config(&self) -> Result<TrainConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = self.mode {
            config.mode = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.learning_rate {
            config.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = self.pretrain_epochs {
            config.pretrain_epochs = v;
        }
        if let Some(v) = self.main_epochs {
            config.main_epochs = v;
        }
        if let Some(v) = self.j_steps {
            config.j_steps = v;
        }
        if let Some(v) = self.t_update_every {
            config.t_update_every = v;
        }
        if let Some(v) = self.em_iterations {
            config.em_iterations = v;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct EvalArgs {
    /// Training output directory or checkpoint file.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset file to score.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub na_class: usize,
    /// JSON report path; the PR table and manifest are written beside it.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ExportArgs {
    /// Training output directory or checkpoint file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// 0 ok, 1 I/O or input mismatch, 2 validation, 3 numeric failure.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Io { .. } | Error::Checkpoint(_) | Error::Shape(_) => 1,
        Error::Numeric(_)
        | Error::NonFinite { .. }
        | Error::DegeneratePosterior(_)
        | Error::DegenerateRow { .. }
        | Error::Constraint(_)
        | Error::Inversion(_)
        | Error::Projection(_) => 3,
        _ => 2,
    }
}

pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::ExportTransition(args) => cmd_export_transition(args),
    }
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub args: Value,
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

impl RunManifest {
    fn new(subcommand: &str, args: &impl Serialize, config: Value, seed: Option<u64>) -> Self {
        Self {
            tool: "dtloss".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            args: serde_json::to_value(args).expect("arguments serialize"),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.push(file_record(role, path)?);
        Ok(())
    }

    fn output(&mut self, role: &str, path: &Path) -> Result<()> {
        self.outputs.push(file_record(role, path)?);
        Ok(())
    }

    fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &pretty(self))
    }
}

fn file_record(role: &str, path: &Path) -> Result<FileRecord> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    Ok(FileRecord {
        role: role.into(),
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

fn pretty(value: &impl Serialize) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    text
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

fn sibling(path: &Path, extension: &str) -> PathBuf {
    path.with_extension(extension)
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

pub fn cmd_gen(args: &GenArgs) -> Result<String> {
    let synthetic = SyntheticConfig {
        classes: args.classes,
        vocab: args.vocab,
        seq_len: args.seq_len,
        instances: args.train,
        signal_strength: args.signal_strength,
        signal_tokens_per_class: args.signal_tokens,
        span_len: args.span_len,
        max_bag_size: args.max_bag_size,
        seed: args.seed,
    };
    let corpus = synthetic_corpus(&synthetic, args.test, args.noise_keep)?;
    create_dir(&args.out)?;
    let train_path = args.out.join(TRAIN_FILE);
    let test_path = args.out.join(TEST_FILE);
    let t_path = args.out.join(TRANSITION_FILE);
    write_dataset(&corpus.train, &train_path)?;
    write_dataset(&corpus.test, &test_path)?;
    corpus.noise.transition.write_csv(&t_path)?;

    let config = json!({
        "synthetic": synthetic,
        "test_instances": args.test,
        "noise": corpus.noise,
        "transition_csv": TRANSITION_FILE,
    });
    let mut manifest = RunManifest::new("gen", args, config, Some(args.seed));
    manifest.output("train", &train_path)?;
    manifest.output("test", &test_path)?;
    manifest.output("transition", &t_path)?;
    manifest.write(&args.out.join(MANIFEST_FILE))?;
    Ok(format!(
        "wrote {} train and {} test instances to {}",
        corpus.train.len(),
        corpus.test.len(),
        args.out.display()
    ))
}

/// Class count and vocabulary size recorded by `gen`, if the directory has a
/// generation manifest.
fn corpus_shape(dir: &Path) -> Option<(usize, usize)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE)).ok()?;
    let manifest: RunManifest = serde_json::from_str(&text).ok()?;
    if manifest.subcommand != "gen" {
        return None;
    }
    let synthetic = manifest.config.get("synthetic")?;
    Some((
        synthetic.get("classes")?.as_u64()? as usize,
        synthetic.get("vocab")?.as_u64()? as usize,
    ))
}

fn data_dir(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn cmd_train(args: &TrainArgs) -> Result<String> {
    let train_path = if args.data.is_dir() {
        args.data.join(TRAIN_FILE)
    } else {
        args.data.clone()
    };
    let raw = read_dataset(&train_path, None)?;
    let (classes, vocab) = match corpus_shape(&data_dir(&args.data)) {
        Some(shape) => shape,
        None => (
            infer_classes(&raw).max(2),
            raw.iter().flat_map(|i| i.tokens.iter().copied()).max().map_or(0, |m| m + 1),
        ),
    };
    if let Some((line, inst)) = raw.iter().enumerate().find(|(_, i)| i.validate(classes).is_err()) {
        let (field, message) = inst.validate(classes).unwrap_err();
        return Err(Error::Schema {
            line: line + 1,
            field: field.into(),
            message,
        });
    }

    create_dir(&args.out)?;
    let ckpt_path = args.out.join(CHECKPOINT_FILE);
    let log_path = args.out.join(LOG_FILE);
    let (config, mut state) = if args.resume {
        if args.has_overrides() {
            return Err(Error::Config("settings cannot change when resuming".into()));
        }
        let ckpt = load_checkpoint(&ckpt_path, Some(classes))?;
        (ckpt.config.clone(), ckpt.into_state())
    } else {
        let config = args.resolve_config()?;
        let state = TrainState::new(&config, vocab, classes)?;
        (config, state)
    };
    let items = prepare_items(&raw, config.max_len)?;
    let log = train(&mut state, &config, &items, args.halt_after_steps)?;

    save_checkpoint(&Checkpoint::new(&config, &state), &ckpt_path)?;
    let mut file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(args.resume)
        .truncate(!args.resume)
        .open(&log_path)
        .map_err(|e| io_error(&log_path, e))?;
    for record in &log {
        writeln!(file, "{}", serde_json::to_string(record).expect("log record serializes"))
            .map_err(|e| io_error(&log_path, e))?;
    }
    drop(file);

    let config_value = serde_json::to_value(&config).expect("config serializes");
    let mut manifest = RunManifest::new("train", args, config_value, Some(config.seed));
    manifest.input("train", &train_path)?;
    if let Some(path) = &args.config {
        manifest.input("config", path)?;
    }
    manifest.output("checkpoint", &ckpt_path)?;
    manifest.output("log", &log_path)?;
    manifest.write(&args.out.join(MANIFEST_FILE))?;

    let em = log.iter().filter(|r| r.loss_type == LossType::Em).count();
    Ok(format!(
        "{} mode: {} steps ({} total), {} EM updates, {} skipped instances; {}",
        config.mode,
        log.len() - em,
        state.progress.global_step,
        em,
        state.progress.skipped,
        if state.is_done() { "finished" } else { "halted" }
    ))
}

// ---------------------------------------------------------------------------
// eval / export
// ---------------------------------------------------------------------------

fn checkpoint_path(model: &Path) -> PathBuf {
    if model.is_dir() {
        model.join(CHECKPOINT_FILE)
    } else {
        model.to_path_buf()
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let ckpt_path = checkpoint_path(&args.model);
    let ckpt = load_checkpoint(&ckpt_path, None)?;
    let k = ckpt.classes;
    let data = read_dataset(&args.data, None)?;
    let dir = data_dir(&args.data);
    let data_classes = corpus_shape(&dir).map_or_else(|| infer_classes(&data), |(c, _)| c);
    let mismatch = match corpus_shape(&dir) {
        Some(_) => data_classes != k,
        None => data_classes > k,
    };
    if mismatch {
        return Err(Error::Shape(format!("model has {k} classes, data has {data_classes}")));
    }

    let t_path = dir.join(TRANSITION_FILE);
    let t_star = if t_path.is_file() {
        Some(TransitionMatrix::read_csv(&t_path)?)
    } else {
        None
    };
    let report = evaluate(&ckpt.params, &data, args.na_class, ckpt.config.max_len, t_star.as_ref())?;

    if let Some(parent) = args.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let table_path = sibling(&args.report, "pr.tsv");
    write_text(&args.report, &pretty(&report))?;
    write_text(&table_path, &pr_table(&report.pr_curve))?;

    let config = json!({ "train_config": ckpt.config, "na_class": args.na_class });
    let mut manifest = RunManifest::new("eval", args, config, Some(ckpt.seed));
    manifest.input("checkpoint", &ckpt_path)?;
    manifest.input("data", &args.data)?;
    if t_star.is_some() {
        manifest.input("transition", &t_path)?;
    }
    manifest.output("report", &args.report)?;
    manifest.output("pr_table", &table_path)?;
    manifest.write(&sibling(&args.report, "manifest.json"))?;

    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    Ok(format!(
        "accuracy {} AP {} over {} bags",
        fmt(report.accuracy),
        fmt(report.average_precision),
        report.bags
    ))
}

pub fn cmd_export_transition(args: &ExportArgs) -> Result<String> {
    let ckpt_path = checkpoint_path(&args.model);
    let ckpt = load_checkpoint(&ckpt_path, None)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    ckpt.params.transition.write_csv(&args.out)?;
    let mut manifest = RunManifest::new("export-transition", args, Value::Null, Some(ckpt.seed));
    manifest.input("checkpoint", &ckpt_path)?;
    manifest.output("transition", &args.out)?;
    manifest.write(&sibling(&args.out, "manifest.json"))?;
    let k = ckpt.classes;
    Ok(format!("wrote {k}x{k} transition matrix to {}", args.out.display()))
}
