//! Command implementations behind the `crener` binary.

pub mod config;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use crener::checkpoint::{self, Checkpoint, CheckpointError};
use crener::corpus::{load_corpus, CorpusError, CorpusFormat, CorpusStats, Sentence};
use crener::decode::{decode_grid, DecodeMode, GridDump};
use crener::encoder::{ContextVectors, EncoderError};
use crener::training::{self, TrainError, TrainOptions};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 1,
            Self::Data(_) => 2,
            Self::Divergence(_) => 3,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => Self::Config(c.0),
            TrainError::Divergence { .. } => Self::Divergence(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "crener", version, about = "Character-relation grid tagging for Chinese NER")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint directory.
    Train {
        /// TOML run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config key, e.g. `--set optimizer.epochs=5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a labelled corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Where to write the json report (default: <checkpoint>/report.json).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Contextual-vector sidecar for checkpoints trained without a lookup table.
        #[arg(long)]
        vectors: Option<PathBuf>,
    },
    /// Predict entities for a corpus and write jsonl.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output file (default: stdout).
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        vectors: Option<PathBuf>,
    },
    /// Decode a jsonl file of grid dumps and print the mentions.
    DecodeGrid {
        grid: PathBuf,
        #[arg(long, value_enum, default_value = "contiguous")]
        mode: ModeArg,
    },
    /// Print sentence, character and entity counts for corpora.
    CorpusStats {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum ModeArg {
    Contiguous,
    Discontinuous,
}

impl From<ModeArg> for DecodeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Contiguous => DecodeMode::Contiguous,
            ModeArg::Discontinuous => DecodeMode::Discontinuous,
        }
    }
}

fn load(path: &Path) -> Result<Vec<Sentence>, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("{}: no such file", path.display())));
    }
    Ok(load_corpus(path, CorpusFormat::from_path(path))?)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_vectors(path: Option<&Path>, width: usize) -> Result<Option<ContextVectors>, CliError> {
    path.map(|p| ContextVectors::load(p, width)).transpose().map_err(CliError::from)
}

fn cmd_train(config_path: Option<&Path>, overrides: &[String], out: &mut dyn Write) -> Result<(), CliError> {
    let seed_env = std::env::var(config::SEED_ENV).ok();
    let run = config::load(config_path, overrides, seed_env.as_deref())?;
    let train_path = run.paths.train.clone().ok_or_else(|| CliError::Data("paths.train is not set".into()))?;
    let ckpt_dir =
        run.paths.checkpoint_dir.clone().ok_or_else(|| CliError::Config("paths.checkpoint_dir is not set".into()))?;
    let train_set = load(&train_path)?;
    let dev_set = match &run.paths.dev {
        Some(p) => load(p)?,
        None => train_set.clone(),
    };
    let vectors = load_vectors(run.paths.vectors_sidecar.as_deref(), run.model.encoder.d_context)?;
    fs::create_dir_all(&ckpt_dir).map_err(|e| CliError::Data(format!("{}: {e}", ckpt_dir.display())))?;
    let outcome = training::train(
        run.model.clone(),
        &train_set,
        &dev_set,
        TrainOptions { vectors: vectors.as_ref(), log_path: Some(ckpt_dir.join("train_log.jsonl")) },
    )?;
    for r in &outcome.history {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "epoch {:>3}  loss {:.6}  dev P {:.4} R {:.4} F1 {:.4}  ({:.1}s)",
            m.epoch, m.train_loss, m.dev_p, m.dev_r, m.dev_f1, r.seconds
        );
    }
    let ckpt = Checkpoint {
        model: outcome.model,
        epoch: outcome.best_epoch,
        history: outcome.history.iter().map(|r| r.metrics.clone()).collect(),
        optimizer: outcome.optimizer,
    };
    checkpoint::save(&ckpt_dir, &ckpt)?;
    let _ = writeln!(out, "saved epoch {} to {}", ckpt.epoch, ckpt_dir.display());
    if let Some(test_path) = &run.paths.test {
        let report = training::evaluate(&ckpt.model, &load(test_path)?, vectors.as_ref())?;
        let _ = write!(out, "test set\n{}", report.table());
    }
    Ok(())
}

fn cmd_eval(
    ckpt_dir: &Path,
    data: &Path,
    report_path: Option<&Path>,
    vectors: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let ckpt = checkpoint::load(ckpt_dir)?;
    let corpus = load(data)?;
    let vectors = load_vectors(vectors, ckpt.model.config.encoder.d_context)?;
    let report = training::evaluate(&ckpt.model, &corpus, vectors.as_ref())?;
    let path = report_path.map(Path::to_path_buf).unwrap_or_else(|| ckpt_dir.join("report.json"));
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_file(&path, json.as_bytes())?;
    let _ = write!(out, "{}", report.table());
    Ok(())
}

fn cmd_predict(
    ckpt_dir: &Path,
    input: &Path,
    output: Option<&Path>,
    vectors: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<(), CliError> {
    let ckpt = checkpoint::load(ckpt_dir)?;
    let sentences = load(input)?;
    let vectors = load_vectors(vectors, ckpt.model.config.encoder.d_context)?;
    let mut text = String::new();
    let mut failures = 0;
    for result in training::predict(&ckpt.model, &sentences, vectors.as_ref()) {
        match result {
            Ok(s) => {
                text.push_str(&serde_json::to_string(&s).expect("sentences serialize"));
                text.push('\n');
            }
            Err(e) => {
                failures += 1;
                let _ = writeln!(err, "{e}");
            }
        }
    }
    match output {
        Some(path) => write_file(path, text.as_bytes())?,
        None => {
            let _ = out.write_all(text.as_bytes());
        }
    }
    if failures > 0 {
        return Err(CliError::Data(format!("{failures} sentence(s) could not be predicted")));
    }
    Ok(())
}

fn cmd_decode_grid(path: &Path, mode: DecodeMode, out: &mut dyn Write) -> Result<(), CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let located =
            |e: crener::decode::DecodeError| CliError::Data(format!("{}:{}: {e}", path.display(), lineno + 1));
        let (grid, vocab) = GridDump::parse(&line).and_then(|d| d.to_grid()).map_err(located)?;
        for mention in decode_grid(&grid, &vocab, mode) {
            let _ = writeln!(out, "{mention}");
        }
    }
    Ok(())
}

fn cmd_corpus_stats(paths: &[PathBuf], out: &mut dyn Write) -> Result<(), CliError> {
    let rows = paths
        .iter()
        .map(|p| Ok((p.display().to_string(), CorpusStats::compute(&load(p)?))))
        .collect::<Result<Vec<_>, CliError>>()?;
    let width = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(0).max(6);
    let _ = writeln!(
        out,
        "{:<width$}  {:>9}  {:>10}  {:>8}  {:>5}  {:>7}  types",
        "corpus", "sentences", "characters", "entities", "max_n", "overlap"
    );
    for (name, s) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>10}  {:>8}  {:>5}  {:>7}  {}",
            name,
            s.sentences,
            s.characters,
            s.entities,
            s.max_len,
            s.cell_collisions,
            s.type_names.join(",")
        );
    }
    Ok(())
}

pub fn execute(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Train { config, overrides } => cmd_train(config.as_deref(), &overrides, out),
        Command::Eval { checkpoint, data, report, vectors } => {
            cmd_eval(&checkpoint, &data, report.as_deref(), vectors.as_deref(), out)
        }
        Command::Predict { checkpoint, input, output, vectors } => {
            cmd_predict(&checkpoint, &input, output.as_deref(), vectors.as_deref(), out, err)
        }
        Command::DecodeGrid { grid, mode } => cmd_decode_grid(&grid, mode.into(), out),
        Command::CorpusStats { paths } => cmd_corpus_stats(&paths, out),
    }
}

/// Parses arguments and runs one command; usage errors exit with the config code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let (mut out, mut err) = (std::io::stdout().lock(), std::io::stderr());
    match execute(cli.command, &mut out, &mut err) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
