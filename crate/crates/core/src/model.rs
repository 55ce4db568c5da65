//! The full tagging model: encoder, grid, enhancement rounds and predictors.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mat, ParamStore, Tape, Var};
use crate::config::{ModelConfig, PredictionMode};
use crate::corpus::{encode_grid, CorpusError, EntityMention, Sentence, TagGrid, TagVocabulary};
use crate::decode::decode_grid;
use crate::encoder::{self, CharVocab, ContextVectors, EncoderError, EncoderInput, EncoderParams, UNK};
use crate::enhance::{self, EnhanceParams, GridInputs};
use crate::grid::{self, GridParams};
use crate::nn::{ForwardCtx, Init};
use crate::predictor::{self, PredictorParams};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub grid: GridParams,
    /// Absent when enhancement is ablated.
    pub enhance: Option<EnhanceParams>,
    pub predictor: PredictorParams,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    /// Output tag vocabulary (with an explicit NONE in softmax mode).
    pub tags: TagVocabulary,
    pub chars: CharVocab,
    /// `true` when contextual embeddings come from a trained lookup table.
    pub lookup: bool,
    pub store: ParamStore,
    pub params: ModelParams,
}

impl Model {
    /// Builds and initializes a model. `types` has implicit NONE; the output
    /// vocabulary gains an explicit NONE in softmax mode.
    pub fn new(config: ModelConfig, types: &TagVocabulary, chars: CharVocab, lookup: bool, seed: u64) -> Self {
        let tags = match config.predictor.mode {
            PredictionMode::Threshold => TagVocabulary::new(types.entity_types.clone(), true),
            PredictionMode::Softmax => types.with_explicit_none(),
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { store: &mut store, rng: &mut rng };
        let d_h = config.encoder.d_h();
        let abl = &config.ablations;
        let encoder = EncoderParams::init(&mut init, &config.encoder, chars.len(), lookup);
        let grid = GridParams::init(&mut init, &config.grid, abl, d_h);
        let q_channels = grid.q_channels(init.store);
        let enhance =
            (!abl.no_enhancement).then(|| EnhanceParams::init(&mut init, &config.enhance, abl, q_channels, d_h));
        let tf_channels = enhance.as_ref().map_or(q_channels, |e| e.tf_channels(init.store));
        let predictor = PredictorParams::init(&mut init, &config.predictor, abl, d_h, tf_channels, tags.len());
        Self { config, tags, chars, lookup, store, params: ModelParams { encoder, grid, enhance, predictor } }
    }

    /// Copies every tensor of `from` whose name and shape match a parameter of
    /// this model; returns how many were copied.
    pub fn copy_matching_params(&mut self, from: &ParamStore) -> usize {
        let mut copied = 0;
        for id in from.ids() {
            if let Some(own) = self.store.id(from.name(id)) {
                if self.store.get(own).dim() == from.get(id).dim() {
                    self.store.get_mut(own).assign(from.get(id));
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Entity-type vocabulary with implicit NONE, as used for decoding.
    pub fn types(&self) -> TagVocabulary {
        TagVocabulary::new(self.tags.entity_types.clone(), true)
    }

    pub fn prepare(&self, sentence: &Sentence, vectors: Option<&ContextVectors>) -> Result<EncoderInput, EncoderError> {
        let n = sentence.len();
        let max_len = self.config.encoder.max_len;
        if n > max_len {
            return Err(EncoderError::TooLong { id: sentence.id.clone(), len: n, max_len });
        }
        let ids = sentence
            .chars
            .iter()
            .map(|c| match self.chars.get(c) {
                Some(i) => Ok(i),
                None if self.config.encoder.unk_fallback => Ok(UNK),
                None => Err(EncoderError::UnknownChar { id: sentence.id.clone(), ch: c.clone() }),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let context = if self.lookup {
            None
        } else {
            let table = vectors.ok_or_else(|| EncoderError::MissingVectors(sentence.id.clone()))?;
            let m = table.vectors.get(&sentence.id).ok_or_else(|| EncoderError::MissingVectors(sentence.id.clone()))?;
            if m.nrows() != n || m.ncols() != self.config.encoder.d_context {
                return Err(EncoderError::Sidecar(format!(
                    "sentence {}: sidecar holds {}×{} vectors, expected {n}×{}",
                    sentence.id,
                    m.nrows(),
                    m.ncols(),
                    self.config.encoder.d_context
                )));
            }
            Some(m.clone())
        };
        Ok(EncoderInput { ids, mask: vec![true; n], context })
    }

    /// Fused `(n·n) × |R|` scores for one (possibly padded) input.
    pub fn forward(&self, tape: &mut Tape<'_>, input: &EncoderInput, ctx: &mut ForwardCtx) -> Var {
        let cfg = &self.config;
        let abl = &cfg.ablations;
        let enc = encoder::encode(tape, &self.params.encoder, &cfg.encoder, abl, input, ctx);
        let cells = grid::cell_mask(&input.mask);
        let inputs = GridInputs { grid: &cfg.grid, ablations: abl, attention: &enc.attention, mask: &input.mask };
        let pred = &self.params.predictor;
        let mlp = pred.mlp.as_ref().map(|mlp| {
            let features = match &self.params.enhance {
                Some(e) => {
                    enhance::run_enhancement(tape, &self.params.grid, e, &inputs, &enc.repr, cfg.rounds(), ctx).tf
                }
                None => {
                    let (s, o) = grid::project_subject_object(tape, &self.params.grid, enc.repr.values, &input.mask);
                    enhance::grid_pass(tape, &self.params.grid, &inputs, s, o, ctx)
                }
            };
            predictor::mlp_scores(tape, mlp, features.values, &cells)
        });
        let biaffine = pred.biaffine.as_ref().map(|b| predictor::biaffine_scores(tape, b, &enc.repr, pred.num_tags));
        predictor::fuse(tape, biaffine, mlp)
    }

    /// Summed loss over real cells and the number of those cells.
    pub fn loss(
        &self,
        tape: &mut Tape<'_>,
        input: &EncoderInput,
        gold: &TagGrid,
        ctx: &mut ForwardCtx,
    ) -> (Var, usize) {
        let scores = self.forward(tape, input, ctx);
        predictor::multi_tag_loss(tape, scores, gold, &self.tags, &input.mask, self.config.predictor.s0)
    }

    pub fn gold_grid(&self, sentence: &Sentence) -> Result<TagGrid, CorpusError> {
        encode_grid(sentence, &self.tags)
    }

    pub fn scores(&self, input: &EncoderInput) -> Mat {
        let mut tape = Tape::new(&self.store);
        let s = self.forward(&mut tape, input, &mut ForwardCtx::eval());
        tape.value(s).clone()
    }

    pub fn predict_grid(&self, input: &EncoderInput) -> TagGrid {
        let p = &self.config.predictor;
        predictor::predict_grid(&self.scores(input), &input.mask, p.mode, p.s0, &self.tags)
    }

    pub fn predict_entities(
        &self,
        sentence: &Sentence,
        vectors: Option<&ContextVectors>,
    ) -> Result<BTreeSet<EntityMention>, EncoderError> {
        let input = self.prepare(sentence, vectors)?;
        Ok(decode_grid(&self.predict_grid(&input), &self.tags, self.config.predictor.decode))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, GeneratorOptions};

    fn corpus() -> Vec<Sentence> {
        generate_synthetic_corpus(3, 4, 6, &["LOC".into(), "PER".into()], GeneratorOptions::default())
    }

    fn model(config: ModelConfig) -> Model {
        let data = corpus();
        let types = TagVocabulary::build(&data);
        let chars = CharVocab::build(data.iter().flat_map(|s| s.chars.iter()));
        Model::new(config, &types, chars, true, 7)
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        let m = model(ModelConfig::tiny());
        for s in corpus() {
            let input = m.prepare(&s, None).unwrap();
            let scores = m.scores(&input);
            assert_eq!(scores.dim(), (s.len() * s.len(), m.tags.len()));
            assert!(scores.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn padding_does_not_change_real_cells() {
        let m = model(ModelConfig::tiny());
        let s = &corpus()[0];
        let input = m.prepare(s, None).unwrap();
        let n = input.len();
        let plain = m.scores(&input);
        let padded = m.scores(&input.padded(3));
        let np = n + 3;
        for i in 0..n {
            for j in 0..n {
                for t in 0..m.tags.len() {
                    assert!((plain[[i * n + j, t]] - padded[[i * np + j, t]]).abs() < 1e-9);
                }
            }
        }
        for c in 0..np * np {
            if c / np >= n || c % np >= n {
                assert!(padded.row(c).iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn input_errors() {
        let mut cfg = ModelConfig::tiny();
        cfg.encoder.unk_fallback = false;
        cfg.encoder.max_len = 5;
        let m = model(cfg);
        let long = Sentence { id: "x".into(), chars: vec!["一".into(); 6], entities: vec![] };
        assert!(matches!(m.prepare(&long, None), Err(EncoderError::TooLong { len: 6, .. })));
        let odd = Sentence { id: "y".into(), chars: vec!["龘".into()], entities: vec![] };
        assert!(matches!(m.prepare(&odd, None), Err(EncoderError::UnknownChar { .. })));

        let m = model(ModelConfig::tiny());
        assert_eq!(m.prepare(&odd, None).unwrap().ids, vec![UNK]);
    }

    #[test]
    fn sidecar_backend_uses_supplied_vectors() {
        let data = corpus();
        let types = TagVocabulary::build(&data);
        let chars = CharVocab::build(data.iter().flat_map(|s| s.chars.iter()));
        let cfg = ModelConfig::tiny();
        let m = Model::new(cfg.clone(), &types, chars, false, 1);
        assert!(m.params.encoder.context.is_none());
        let s = &data[0];
        assert!(matches!(m.prepare(s, None), Err(EncoderError::MissingVectors(_))));
        let mut vectors = ContextVectors { width: cfg.encoder.d_context, ..Default::default() };
        vectors.vectors.insert(s.id.clone(), Mat::from_elem((s.len(), cfg.encoder.d_context), 0.1));
        let input = m.prepare(s, Some(&vectors)).unwrap();
        assert!(m.scores(&input).iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_mode_adds_none_output() {
        let mut cfg = ModelConfig::tiny();
        cfg.predictor.mode = PredictionMode::Softmax;
        let m = model(cfg);
        assert_eq!(m.tags.len(), m.types().len() + 1);
        let input = m.prepare(&corpus()[1], None).unwrap();
        assert_eq!(m.scores(&input).ncols(), m.tags.len());
    }

    #[test]
    fn every_ablation_changes_the_loss() {
        let data = corpus();
        let base = model(ModelConfig::tiny());
        let loss = |m: &Model| -> f64 {
            data.iter()
                .map(|s| {
                    let input = m.prepare(s, None).unwrap();
                    let gold = m.gold_grid(s).unwrap();
                    let mut tape = Tape::new(&m.store);
                    let (l, _) = m.loss(&mut tape, &input, &gold, &mut ForwardCtx::eval());
                    tape.value(l)[[0, 0]]
                })
                .sum()
        };
        let reference = loss(&base);
        for (name, ablations) in crate::config::Ablations::single_flag_variants() {
            let mut m = model(ModelConfig { ablations, ..ModelConfig::tiny() });
            assert!(m.copy_matching_params(&base.store) > 0);
            let l = loss(&m);
            assert!(l.is_finite() && l != reference, "{name} left the loss at {l}");
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = model(ModelConfig::tiny());
        let b = model(ModelConfig::tiny());
        for id in a.store.ids() {
            assert_eq!(a.store.get(id), b.store.get(id));
        }
    }
}
