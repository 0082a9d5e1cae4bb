//! The `saids` command line.
//!
//! Subcommands: `stats`, `train`, `eval`, `gen-synth`. `train` reads an
//! optional flat config file (`key = value` lines, `#` comments) and applies
//! command-line flags on top. The effective configuration is written next to
//! the run's artifacts so the run can be repeated with `--config`.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::dataset::{
    compute_stats, gen_synthetic, load_dataset, split_train_validation, DatasetError, SplitRole,
};
use crate::embeddings::{
    load_embedding_table, save_embedding_table, EmbeddingError, EmbeddingProvider, ToyEncoder,
};
use crate::metrics::{evaluate, MetricsError};
use crate::model::{
    build_baseline, build_model, BaselineKind, ModelConfig, ModelError, SaidsModel,
};
use crate::training::{train, TrainConfig, TrainError};

pub const CHECKPOINT_FILE: &str = "checkpoint.smc";
pub const TRACE_FILE: &str = "trace.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective.conf";
pub const TOY_ENCODER_FILE: &str = "toy_encoder.bin";
pub const SYNTH_CSV_FILE: &str = "data.csv";
pub const SYNTH_EMBEDDINGS_FILE: &str = "embeddings.seb";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Argument(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EmbeddingError> for CliError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::Argument(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Config(e.to_string()),
            ModelError::Compute(_) => CliError::Config(e.to_string()),
            ModelError::Format(_) | ModelError::Io(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Embedding(inner) => inner.into(),
            MetricsError::Model(inner) => inner.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Data(inner) => inner.into(),
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Model(inner) => inner.into(),
            TrainError::Metrics(inner) => inner.into(),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(
    name = "saids",
    version,
    about = "Informed multi-task sentiment, sarcasm and dialect classifier"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print label counts, cross tabulations and per-dialect sarcasm rates.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a model and write checkpoint, trace, report and effective config.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Generate a synthetic planted-dependency dataset and its embeddings.
    GenSynth(GenSynthArgs),
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, conflicts_with = "toy_encoder")]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub toy_encoder: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Embedding length for the toy encoder (an SEB1 file fixes its own).
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub hidden_layers: Option<usize>,
    #[arg(long)]
    pub hidden_size: Option<usize>,
    /// output | hidden | hidden-plus-output
    #[arg(long)]
    pub exposure: Option<String>,
    /// none | sarcasm | dialect | both
    #[arg(long)]
    pub informed: Option<String>,
    #[arg(long)]
    pub no_softmax: bool,
    /// full | partial | unlimited
    #[arg(long)]
    pub backprop: Option<String>,
    /// all | seq1 | seq2 | seq3
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    /// none | b1 | b2 | b3: train a sentiment-only baseline instead.
    #[arg(long)]
    pub baseline: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(
        long,
        required_unless_present = "toy_encoder",
        conflicts_with = "toy_encoder"
    )]
    pub embeddings: Option<PathBuf>,
    /// Use the toy encoder saved next to the checkpoint.
    #[arg(long)]
    pub toy_encoder: bool,
    /// Report file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.9)]
    pub coupling: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for data.csv and embeddings.seb.
    #[arg(long)]
    pub out: PathBuf,
}

/// Everything a training run needs, after merging file and flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub toy_encoder: bool,
    pub out: PathBuf,
    pub seed: u64,
    pub vocab_size: usize,
    pub validation_fraction: f64,
    pub baseline: Option<BaselineKind>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            embeddings: None,
            toy_encoder: false,
            out: PathBuf::from("out"),
            seed: 0,
            vocab_size: 4096,
            validation_fraction: 0.1,
            baseline: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(CliError::Config(format!(
            "invalid boolean `{value}` for `{key}`"
        ))),
    }
}

fn parse_baseline(value: &str) -> Result<Option<BaselineKind>, CliError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "none" | "" => Ok(None),
        "b1" => Ok(Some(BaselineKind::B1)),
        "b2" => Ok(Some(BaselineKind::B2)),
        "b3" => Ok(Some(BaselineKind::B3)),
        other => Err(CliError::Config(format!("unrecognized baseline `{other}`"))),
    }
}

fn keyword<T: std::str::FromStr<Err = String>>(value: &str) -> Result<T, CliError> {
    value.parse().map_err(CliError::Config)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let path = || (!value.trim().is_empty()).then(|| PathBuf::from(value.trim()));
        match key {
            "data" => self.data = path(),
            "embeddings" => self.embeddings = path(),
            "toy_encoder" => self.toy_encoder = parse_bool(key, value)?,
            "out" => self.out = PathBuf::from(value.trim()),
            "seed" => self.seed = parse(key, value)?,
            "dim" => self.model.dim = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "validation_fraction" => self.validation_fraction = parse(key, value)?,
            "baseline" => self.baseline = parse_baseline(value)?,
            "hidden_layers" => self.model.hidden_layers = parse(key, value)?,
            "hidden_size" => self.model.hidden_size = parse(key, value)?,
            "exposure" => self.model.exposure = keyword(value)?,
            "informed" => self.model.informed = keyword(value)?,
            "softmax" => self.model.softmax_outputs = parse_bool(key, value)?,
            "backprop" => self.model.backprop = keyword(value)?,
            "schedule" => self.train.schedule = keyword(value)?,
            "lr" => self.train.learning_rate = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "loss_weight_sentiment" => self.train.loss_weights.sentiment = parse(key, value)?,
            "loss_weight_sarcasm" => self.train.loss_weights.sarcasm = parse(key, value)?,
            "loss_weight_dialect" => self.train.loss_weights.dialect = parse(key, value)?,
            other => return Err(CliError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("config line {}: expected `key = value`", n + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_flags(&mut self, a: &TrainArgs) -> Result<(), CliError> {
        if let Some(p) = &a.data {
            self.data = Some(p.clone());
        }
        if let Some(p) = &a.embeddings {
            self.embeddings = Some(p.clone());
            self.toy_encoder = false;
        }
        if a.toy_encoder {
            self.toy_encoder = true;
            self.embeddings = None;
        }
        if let Some(p) = &a.out {
            self.out = p.clone();
        }
        if let Some(v) = a.seed {
            self.seed = v;
        }
        if let Some(v) = a.dim {
            self.model.dim = v;
        }
        if let Some(v) = a.vocab_size {
            self.vocab_size = v;
        }
        if let Some(v) = a.hidden_layers {
            self.model.hidden_layers = v;
        }
        if let Some(v) = a.hidden_size {
            self.model.hidden_size = v;
        }
        if let Some(v) = &a.exposure {
            self.model.exposure = keyword(v)?;
        }
        if let Some(v) = &a.informed {
            self.model.informed = keyword(v)?;
        }
        if a.no_softmax {
            self.model.softmax_outputs = false;
        }
        if let Some(v) = &a.backprop {
            self.model.backprop = keyword(v)?;
        }
        if let Some(v) = &a.schedule {
            self.train.schedule = keyword(v)?;
        }
        if let Some(v) = a.lr {
            self.train.learning_rate = v;
        }
        if let Some(v) = a.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = a.batch_size {
            self.train.batch_size = v;
        }
        if let Some(v) = a.validation_fraction {
            self.validation_fraction = v;
        }
        if let Some(v) = &a.baseline {
            self.baseline = parse_baseline(v)?;
        }
        Ok(())
    }

    /// The effective configuration, one `key = value` line per field.
    pub fn to_conf_string(&self) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let baseline = match self.baseline {
            None => "none",
            Some(BaselineKind::B1) => "b1",
            Some(BaselineKind::B2) => "b2",
            Some(BaselineKind::B3) => "b3",
        };
        let m = &self.model;
        let t = &self.train;
        let mut s = String::from("# effective configuration\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("data", path(&self.data));
        kv("embeddings", path(&self.embeddings));
        kv("toy_encoder", self.toy_encoder.to_string());
        kv("out", self.out.display().to_string());
        kv("seed", self.seed.to_string());
        kv("dim", m.dim.to_string());
        kv("vocab_size", self.vocab_size.to_string());
        kv(
            "validation_fraction",
            format!("{:?}", self.validation_fraction),
        );
        kv("baseline", baseline.to_string());
        kv("hidden_layers", m.hidden_layers.to_string());
        kv("hidden_size", m.hidden_size.to_string());
        kv("exposure", m.exposure.to_string());
        kv("informed", m.informed.to_string());
        kv("softmax", m.softmax_outputs.to_string());
        kv("backprop", m.backprop.to_string());
        kv("schedule", t.schedule.to_string());
        kv("lr", format!("{:?}", t.learning_rate));
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv(
            "loss_weight_sentiment",
            format!("{:?}", t.loss_weights.sentiment),
        );
        kv(
            "loss_weight_sarcasm",
            format!("{:?}", t.loss_weights.sarcasm),
        );
        kv(
            "loss_weight_dialect",
            format!("{:?}", t.loss_weights.dialect),
        );
        s
    }

    pub fn from_args(a: &TrainArgs) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &a.config {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        cfg.apply_flags(a)?;
        Ok(cfg)
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{rendered}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{rendered}");
                    1
                }
            };
        }
    };
    let result = match cli.command {
        Command::Stats { data } => cmd_stats(&data, stdout),
        Command::Train(args) => RunConfig::from_args(&args).and_then(|cfg| cmd_train(&cfg, stdout)),
        Command::Eval(args) => cmd_eval(&args, stdout),
        Command::GenSynth(args) => cmd_gen_synth(&args, stdout),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn cmd_stats(data: &Path, stdout: &mut dyn Write) -> Result<(), CliError> {
    let ds = load_dataset(data, SplitRole::Train)?;
    let stats = compute_stats(&ds)?;
    write!(stdout, "{}", stats.render()).map_err(|e| CliError::Data(e.to_string()))
}

enum Provider {
    Table(crate::embeddings::EmbeddingTable),
    Toy(ToyEncoder),
}

impl Provider {
    fn as_dyn(&self) -> &dyn EmbeddingProvider {
        match self {
            Provider::Table(t) => t,
            Provider::Toy(t) => t,
        }
    }

    fn as_dyn_mut(&mut self) -> &mut dyn EmbeddingProvider {
        match self {
            Provider::Table(t) => t,
            Provider::Toy(t) => t,
        }
    }
}

/// Builds the model described by `cfg` (SAIDS or a baseline).
pub fn build_configured_model(cfg: &RunConfig) -> Result<SaidsModel, CliError> {
    let m = &cfg.model;
    let model = match cfg.baseline {
        None => build_model(m, cfg.seed)?,
        Some(kind) => {
            let reference = match kind {
                BaselineKind::B3 => build_model(m, cfg.seed)?.param_count(),
                _ => 0,
            };
            build_baseline(kind, m.dim, m.hidden_size, reference, cfg.seed)?
        }
    };
    Ok(model)
}

pub fn cmd_train(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = cfg.clone();
    let data_path = cfg
        .data
        .clone()
        .ok_or_else(|| CliError::Config("no dataset given (`data` / --data)".into()))?;
    match (&cfg.embeddings, cfg.toy_encoder) {
        (Some(_), true) => {
            return Err(CliError::Config(
                "select either embeddings or toy_encoder, not both".into(),
            ))
        }
        (None, false) => {
            return Err(CliError::Config(
                "no embedding source (--embeddings or --toy-encoder)".into(),
            ))
        }
        _ => {}
    }

    let mut provider = match &cfg.embeddings {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::Config(format!(
                    "{}: no such file",
                    path.display()
                )));
            }
            let table = load_embedding_table(path)?;
            cfg.model.dim = table.dim();
            Provider::Table(table)
        }
        None => Provider::Toy(ToyEncoder::new(
            cfg.vocab_size,
            cfg.model.dim,
            cfg.seed,
            true,
        )?),
    };
    if !data_path.exists() {
        return Err(CliError::Config(format!(
            "{}: no such file",
            data_path.display()
        )));
    }
    let full = load_dataset(&data_path, SplitRole::Train)?;
    let (train_set, val_set) = split_train_validation(&full, cfg.validation_fraction, cfg.seed)?;

    let mut model = build_configured_model(&cfg)?;
    let tcfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let trace = train(
        &mut model,
        provider.as_dyn_mut(),
        &train_set,
        Some(&val_set),
        &tcfg,
    )?;
    let report = evaluate(&model, provider.as_dyn(), &val_set)?;

    fs::create_dir_all(&cfg.out).map_err(|e| io_err(&cfg.out, e))?;
    let write_file = |name: &str, f: &dyn Fn(&mut BufWriter<fs::File>) -> Result<(), CliError>| {
        let path = cfg.out.join(name);
        let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush().map_err(|e| io_err(&path, e))
    };
    write_file(CHECKPOINT_FILE, &|w| Ok(model.write_checkpoint(w)?))?;
    write_file(TRACE_FILE, &|w| {
        trace
            .write_csv(w)
            .map_err(|e| CliError::Data(e.to_string()))
    })?;
    write_file(REPORT_FILE, &|w| {
        w.write_all(report.to_kv_string().as_bytes())
            .map_err(|e| CliError::Data(e.to_string()))
    })?;
    write_file(EFFECTIVE_CONFIG_FILE, &|w| {
        w.write_all(cfg.to_conf_string().as_bytes())
            .map_err(|e| CliError::Data(e.to_string()))
    })?;
    if let Provider::Toy(enc) = &provider {
        write_file(TOY_ENCODER_FILE, &|w| {
            enc.write_to(w).map_err(|e| CliError::Data(e.to_string()))
        })?;
    }

    let _ = writeln!(
        stdout,
        "trained {} epochs on {} examples ({} validation), {} head parameters",
        tcfg.epochs,
        train_set.len(),
        val_set.len(),
        model.param_count()
    );
    let _ = write!(stdout, "{}", report.to_kv_string());
    let _ = writeln!(stdout, "artifacts written to {}", cfg.out.display());
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let file = fs::File::open(&args.checkpoint)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.checkpoint.display())))?;
    let model = SaidsModel::read_checkpoint(BufReader::new(file))?;

    let provider = if args.toy_encoder {
        let dir = args.checkpoint.parent().unwrap_or(Path::new("."));
        let path = dir.join(TOY_ENCODER_FILE);
        let file = fs::File::open(&path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Provider::Toy(ToyEncoder::read_from(BufReader::new(file))?)
    } else {
        let path = args
            .embeddings
            .as_ref()
            .expect("clap requires an embedding source");
        Provider::Table(load_embedding_table(path)?)
    };
    if provider.as_dyn().dim() != model.dim() {
        return Err(CliError::Config(format!(
            "checkpoint expects dim {}, embeddings have dim {}",
            model.dim(),
            provider.as_dyn().dim()
        )));
    }
    let data = load_dataset(&args.data, SplitRole::Test)?;
    let report = evaluate(&model, provider.as_dyn(), &data)?;
    let text = report.to_kv_string();
    fs::write(&args.out, &text).map_err(|e| io_err(&args.out, e))?;
    let _ = write!(stdout, "{text}");
    Ok(())
}

pub fn cmd_gen_synth(args: &GenSynthArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let (ds, table) = gen_synthetic(args.n, args.dim, args.seed, args.coupling)?;
    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let csv_path = args.out.join(SYNTH_CSV_FILE);
    let file = fs::File::create(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    ds.write_csv(BufWriter::new(file))?;
    let seb_path = args.out.join(SYNTH_EMBEDDINGS_FILE);
    save_embedding_table(&table, &seb_path)?;
    let _ = writeln!(
        stdout,
        "wrote {} examples to {} and {}",
        ds.len(),
        csv_path.display(),
        seb_path.display()
    );
    Ok(())
}
