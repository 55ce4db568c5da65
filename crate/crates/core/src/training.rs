//! Training loop, evaluation and prediction.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Gradients, Tape};
use crate::config::{ConfigError, ModelConfig};
use crate::corpus::{CorpusError, Sentence, TagVocabulary};
use crate::encoder::{CharVocab, ContextVectors, EncoderError};
use crate::metrics::EvalReport;
use crate::model::Model;
use crate::nn::ForwardCtx;
use crate::optim::Optimizer;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("the training corpus is empty")]
    EmptyCorpus,
    #[error("entity type {0:?} in the dev corpus never occurs in the training corpus")]
    VocabMismatch(String),
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("cannot write training log {path}: {source}")]
    Log { path: PathBuf, source: std::io::Error },
}

/// Per-epoch metrics as stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_p: f64,
    pub dev_r: f64,
    pub dev_f1: f64,
}

/// One training-log line: metrics plus wall-clock seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    #[serde(flatten)]
    pub metrics: MetricRecord,
    pub seconds: f64,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Sidecar contextual vectors; when absent a lookup table is trained.
    pub vectors: Option<&'a ContextVectors>,
    /// Destination of the jsonl epoch log.
    pub log_path: Option<PathBuf>,
}

pub struct TrainOutcome {
    /// Parameters of the best dev-F1 epoch (the initialization if no epoch ran).
    pub model: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub optimizer: Optimizer,
}

/// Mean per-cell loss of one sentence under the current parameters.
pub fn sentence_loss(model: &Model, sentence: &Sentence, vectors: Option<&ContextVectors>) -> Result<f64, TrainError> {
    let input = model.prepare(sentence, vectors)?;
    let gold = model.gold_grid(sentence)?;
    let mut tape = Tape::new(&model.store);
    let (loss, cells) = model.loss(&mut tape, &input, &gold, &mut ForwardCtx::eval());
    Ok(tape.value(loss)[[0, 0]] / cells as f64)
}

pub fn train(
    config: ModelConfig,
    train_set: &[Sentence],
    dev_set: &[Sentence],
    options: TrainOptions<'_>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let types = TagVocabulary::build(train_set);
    if let Some(e) = dev_set.iter().flat_map(|s| &s.entities).find(|e| types.type_index(&e.entity_type).is_none()) {
        return Err(TrainError::VocabMismatch(e.entity_type.clone()));
    }
    let chars = CharVocab::build(train_set.iter().flat_map(|s| s.chars.iter()));
    let opt_cfg = config.optimizer.clone();
    let mut model = Model::new(config, &types, chars, options.vectors.is_none(), opt_cfg.seed);

    let examples = train_set
        .iter()
        .map(|s| Ok((model.prepare(s, options.vectors)?, model.gold_grid(s)?)))
        .collect::<Result<Vec<_>, TrainError>>()?;

    let mut log = match &options.log_path {
        Some(path) => Some(File::create(path).map_err(|source| TrainError::Log { path: path.clone(), source })?),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opt_cfg.seed.wrapping_add(1));
    let mut optimizer = Optimizer::new(&opt_cfg, &model.store);
    let mut best = (model.store.clone(), 0usize, f64::NEG_INFINITY);
    let mut history = Vec::with_capacity(opt_cfg.epochs);
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for epoch in 1..=opt_cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut epoch_cells) = (0.0, 0usize);
        for (batch_idx, batch) in order.chunks(opt_cfg.batch_size).enumerate() {
            let mut grads = Gradients::zeros_like(&model.store);
            let (mut batch_loss, mut batch_cells) = (0.0, 0usize);
            for &k in batch {
                let (input, gold) = &examples[k];
                let mut ctx = ForwardCtx::train(ChaCha8Rng::seed_from_u64(rng.random()));
                let mut tape = Tape::new(&model.store);
                let (loss, cells) = model.loss(&mut tape, input, gold, &mut ctx);
                batch_loss += tape.value(loss)[[0, 0]];
                batch_cells += cells;
                grads.merge(&tape.backward(loss));
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::Divergence { epoch, batch: batch_idx });
            }
            grads.scale(1.0 / batch_cells as f64);
            optimizer.apply(&mut model.store, grads);
            if !model.store.all_finite() {
                return Err(TrainError::Divergence { epoch, batch: batch_idx });
            }
            epoch_loss += batch_loss;
            epoch_cells += batch_cells;
        }
        let report = evaluate(&model, dev_set, options.vectors)?;
        let metrics = MetricRecord {
            epoch,
            train_loss: epoch_loss / epoch_cells as f64,
            dev_p: report.precision,
            dev_r: report.recall,
            dev_f1: report.f1,
        };
        let record = EpochRecord { metrics, seconds: start.elapsed().as_secs_f64() };
        if let (Some(file), Some(path)) = (log.as_mut(), &options.log_path) {
            let line = serde_json::to_string(&record).expect("records serialize");
            writeln!(file, "{line}").map_err(|source| TrainError::Log { path: path.clone(), source })?;
        }
        if report.f1 > best.2 {
            best = (model.store.clone(), epoch, report.f1);
        }
        history.push(record);
        if opt_cfg.stop_at_dev_f1.is_some_and(|t| report.f1 >= t) {
            break;
        }
    }
    model.store = best.0;
    Ok(TrainOutcome { model, best_epoch: best.1, history, optimizer })
}

pub fn evaluate(
    model: &Model,
    corpus: &[Sentence],
    vectors: Option<&ContextVectors>,
) -> Result<EvalReport, EncoderError> {
    let mut pairs = Vec::with_capacity(corpus.len());
    for s in corpus {
        pairs.push((s.entity_set(), model.predict_entities(s, vectors)?));
    }
    Ok(EvalReport::from_sets(pairs.iter().map(|(g, p)| (g, p))))
}

/// Sentences with predicted entities in place of gold ones; failures are
/// reported per sentence.
pub fn predict(
    model: &Model,
    sentences: &[Sentence],
    vectors: Option<&ContextVectors>,
) -> Vec<Result<Sentence, EncoderError>> {
    sentences
        .iter()
        .map(|s| {
            let entities: BTreeSet<_> = model.predict_entities(s, vectors)?;
            Ok(Sentence { id: s.id.clone(), chars: s.chars.clone(), entities: entities.into_iter().collect() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, EntityMention, GeneratorOptions};

    fn data(seed: u64, count: usize) -> Vec<Sentence> {
        generate_synthetic_corpus(seed, count, 8, &["LOC".into(), "PER".into()], GeneratorOptions::default())
    }

    fn config(epochs: usize) -> ModelConfig {
        let mut c = ModelConfig::tiny();
        c.optimizer.epochs = epochs;
        c.optimizer.batch_size = 4;
        c.encoder.dropout = 0.1;
        c
    }

    #[test]
    fn zero_epochs_keep_initialization() {
        let train_set = data(1, 6);
        let out = train(config(0), &train_set, &train_set, TrainOptions::default()).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.best_epoch, 0);
        let fresh = Model::new(
            config(0),
            &TagVocabulary::build(&train_set),
            CharVocab::build(train_set.iter().flat_map(|s| s.chars.iter())),
            true,
            42,
        );
        assert_eq!(out.model.store, fresh.store);
        evaluate(&out.model, &train_set, None).unwrap();
    }

    #[test]
    fn seeded_runs_are_identical() {
        let train_set = data(2, 8);
        let run = || {
            let out = train(config(2), &train_set, &train_set, TrainOptions::default()).unwrap();
            out.history.iter().map(|r| r.metrics.clone()).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|r| r.train_loss.is_finite()));
    }

    #[test]
    fn training_reduces_loss() {
        let train_set = data(3, 8);
        let mut cfg = config(8);
        cfg.optimizer.learning_rate = 1e-2;
        let out = train(cfg, &train_set, &train_set, TrainOptions::default()).unwrap();
        let first = out.history.first().unwrap().metrics.train_loss;
        let last = out.history.last().unwrap().metrics.train_loss;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn log_has_one_record_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train_log.jsonl");
        let train_set = data(4, 4);
        train(config(3), &train_set, &train_set, TrainOptions { vectors: None, log_path: Some(path.clone()) }).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let rec: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        for key in ["epoch", "train_loss", "dev_p", "dev_r", "dev_f1", "seconds"] {
            assert!(rec.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn dev_types_must_be_known() {
        let train_set = data(5, 4);
        let mut dev = data(6, 1);
        dev[0].entities = vec![EntityMention::new(vec![0], "ORG")];
        assert!(matches!(
            train(config(1), &train_set, &dev, TrainOptions::default()),
            Err(TrainError::VocabMismatch(t)) if t == "ORG"
        ));
        assert!(matches!(train(config(1), &[], &dev, TrainOptions::default()), Err(TrainError::EmptyCorpus)));
    }

    #[test]
    fn predict_is_deterministic_and_keeps_text() {
        let train_set = data(7, 4);
        let out = train(config(1), &train_set, &train_set, TrainOptions::default()).unwrap();
        assert!(predict(&out.model, &[], None).is_empty());
        let a: Vec<_> = predict(&out.model, &train_set, None).into_iter().map(Result::unwrap).collect();
        let b: Vec<_> = predict(&out.model, &train_set, None).into_iter().map(Result::unwrap).collect();
        assert_eq!(a, b);
        for (p, s) in a.iter().zip(&train_set) {
            assert_eq!(p.chars, s.chars);
            p.validate().unwrap();
        }
    }
}
