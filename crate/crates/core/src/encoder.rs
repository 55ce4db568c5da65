//! Character encoder: four embedding strategies followed by a transformer
//! whose attention is unscaled and aware of signed relative distance.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Mat, ParamId, Tape, Var};
use crate::config::{Ablations, EncoderConfig};
use crate::nn::{ForwardCtx, Init, LayerNorm, Linear};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("sentence {id} has {len} characters, more than max_len = {max_len}")]
    TooLong { id: String, len: usize, max_len: usize },
    #[error("sentence {id}: character {ch:?} is not in the alphabet")]
    UnknownChar { id: String, ch: String },
    #[error("no contextual vectors for sentence {0}")]
    MissingVectors(String),
    #[error("{0}")]
    Sidecar(String),
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Character alphabet with reserved `<pad>` and `<unk>` entries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharVocab {
    chars: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl CharVocab {
    pub fn build<'a>(chars: impl IntoIterator<Item = &'a String>) -> Self {
        let mut seen: Vec<String> = chars.into_iter().cloned().collect();
        seen.sort();
        seen.dedup();
        let mut all = vec!["<pad>".to_string(), "<unk>".to_string()];
        all.extend(seen.into_iter().filter(|c| c != "<pad>" && c != "<unk>"));
        Self::from_chars(all)
    }

    pub fn from_chars(chars: Vec<String>) -> Self {
        let index = chars.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        Self { chars, index }
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(self) -> Self {
        Self::from_chars(self.chars)
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn get(&self, ch: &str) -> Option<usize> {
        self.index.get(ch).copied()
    }

    pub fn chars(&self) -> &[String] {
        &self.chars
    }
}

/// Precomputed contextual vectors keyed by sentence id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContextVectors {
    pub width: usize,
    pub vectors: HashMap<String, Mat>,
}

#[derive(Deserialize)]
struct SidecarRecord {
    id: String,
    vectors: Vec<Vec<f32>>,
}

impl ContextVectors {
    /// Reads a jsonl sidecar of `{"id": ..., "vectors": [[f32; width]; N]}`.
    pub fn load(path: &Path, width: usize) -> Result<Self, EncoderError> {
        let file = File::open(path).map_err(|e| EncoderError::Sidecar(format!("{}: {e}", path.display())))?;
        let mut vectors = HashMap::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| EncoderError::Sidecar(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SidecarRecord = serde_json::from_str(&line)
                .map_err(|e| EncoderError::Sidecar(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            let rows = rec.vectors.len();
            if let Some(bad) = rec.vectors.iter().find(|r| r.len() != width) {
                return Err(EncoderError::Sidecar(format!(
                    "{}:{}: vector width {} does not match d_context = {width}",
                    path.display(),
                    lineno + 1,
                    bad.len()
                )));
            }
            let flat: Vec<f64> = rec.vectors.into_iter().flatten().map(f64::from).collect();
            let m = Mat::from_shape_vec((rows, width), flat).expect("validated widths");
            vectors.insert(rec.id, m);
        }
        Ok(Self { width, vectors })
    }
}

/// Query/key/value maps of the single attention pass over raw embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RawAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdaptedLayer {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_kr: ParamId,
    /// Global content bias, `1 × d_model`, split per head.
    pub u: ParamId,
    /// Global position bias, `1 × d_model`, split per head.
    pub v: ParamId,
    pub out: Linear,
    pub ln_attn: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ln_ff: LayerNorm,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderParams {
    /// Lookup table; absent when contextual vectors come from a sidecar.
    pub context: Option<ParamId>,
    pub position: ParamId,
    pub region: ParamId,
    pub raw_attn: RawAttention,
    pub layers: Vec<AdaptedLayer>,
}

impl EncoderParams {
    pub fn init(init: &mut Init<'_>, cfg: &EncoderConfig, vocab_size: usize, lookup: bool) -> Self {
        let d = cfg.d_h();
        let bound = 1.0 / (d as f64).sqrt();
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("encoder.layer{l}");
                AdaptedLayer {
                    w_q: init.uniform(&format!("{p}.w_q"), d, d, bound),
                    w_k: init.uniform(&format!("{p}.w_k"), d, d, bound),
                    w_v: init.uniform(&format!("{p}.w_v"), d, d, bound),
                    w_kr: init.uniform(&format!("{p}.w_kr"), d, d, bound),
                    u: init.embedding(&format!("{p}.u"), 1, d),
                    v: init.embedding(&format!("{p}.v"), 1, d),
                    out: init.linear(&format!("{p}.out"), d, d),
                    ln_attn: init.layer_norm(&format!("{p}.ln_attn"), d),
                    ff_in: init.linear(&format!("{p}.ff_in"), d, cfg.d_ff),
                    ff_out: init.linear(&format!("{p}.ff_out"), cfg.d_ff, d),
                    ln_ff: init.layer_norm(&format!("{p}.ln_ff"), d),
                }
            })
            .collect();
        Self {
            context: lookup.then(|| init.embedding("encoder.context", vocab_size, cfg.d_context)),
            position: init.embedding("encoder.position", cfg.max_len, cfg.d_pos),
            region: init.embedding("encoder.region", 2, cfg.d_region),
            raw_attn: RawAttention {
                q: init.linear("encoder.raw_attn.q", cfg.d_context, cfg.d_attn),
                k: init.linear("encoder.raw_attn.k", cfg.d_context, cfg.d_attn),
                v: init.linear("encoder.raw_attn.v", cfg.d_context, cfg.d_attn),
            },
            layers,
        }
    }
}

/// One (possibly padded) sentence prepared for the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput {
    pub ids: Vec<usize>,
    /// `true` for real characters.
    pub mask: Vec<bool>,
    /// Sidecar rows, padded with zeros to `ids.len()`.
    pub context: Option<Mat>,
}

impl EncoderInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Appends `extra` padding positions.
    pub fn padded(&self, extra: usize) -> Self {
        let mut ids = self.ids.clone();
        ids.extend(std::iter::repeat_n(PAD, extra));
        let mut mask = self.mask.clone();
        mask.extend(std::iter::repeat_n(false, extra));
        let context = self.context.as_ref().map(|c| {
            let mut m = Mat::zeros((c.nrows() + extra, c.ncols()));
            m.slice_mut(ndarray::s![..c.nrows(), ..]).assign(c);
            m
        });
        Self { ids, mask, context }
    }
}

/// Signed-distance sinusoidal encodings, row `i·n + j` holding `R_{i,j}` for
/// `d = i − j`. Even components are sines, odd components cosines.
pub fn relative_position_embedding(n: usize, d_model: usize) -> Mat {
    let mut out = Mat::zeros((n * n, d_model));
    for i in 0..n {
        for j in 0..n {
            let d = i as f64 - j as f64;
            let mut row = out.row_mut(i * n + j);
            for k in 0..d_model.div_ceil(2) {
                let angle = d / 10000f64.powf(2.0 * k as f64 / d_model as f64);
                row[2 * k] = angle.sin();
                if 2 * k + 1 < d_model {
                    row[2 * k + 1] = angle.cos();
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct CharRepr {
    pub values: Var,
    pub mask: Vec<bool>,
}

/// Encoder result plus the attention maps the grid features need.
pub struct EncoderOutput {
    pub repr: CharRepr,
    /// Mean over heads of the last attention layer, `n × n`.
    pub attention: Mat,
}

pub fn embed_characters(
    tape: &mut Tape<'_>,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    input: &EncoderInput,
    ctx: &mut ForwardCtx,
) -> (CharRepr, Mat) {
    let n = input.len();
    let contextual = match (params.context, &input.context) {
        (_, Some(vectors)) => tape.constant(vectors.clone()),
        (Some(table), None) => {
            let table = tape.param(table);
            tape.gather_rows(table, input.ids.iter().map(|&i| Some(i)).collect())
        }
        (None, None) => panic!("encoder has neither a lookup table nor sidecar vectors"),
    };
    let position = tape.param(params.position);
    let position = tape.gather_rows(position, (0..n).map(Some).collect());
    let region = tape.param(params.region);
    let region = tape.gather_rows(region, (0..n).map(|i| Some(i % 2)).collect());

    let q = params.raw_attn.q.forward(tape, contextual);
    let k = params.raw_attn.k.forward(tape, contextual);
    let v = params.raw_attn.v.forward(tape, contextual);
    let logits = tape.matmul_t(q, k);
    let logits = tape.scale(logits, 1.0 / (cfg.d_attn as f64).sqrt());
    let weights = tape.softmax_rows(logits, Some(&input.mask));
    let raw_weights = tape.value(weights).clone();
    let attended = tape.matmul(weights, v);

    let h = tape.concat_cols(&[contextual, position, region, attended]);
    let h = ctx.dropout(tape, h, cfg.dropout);
    let h = tape.mask_rows(h, &input.mask);
    (CharRepr { values: h, mask: input.mask.clone() }, raw_weights)
}

/// Per-head relative attention logits
/// `Q_i·K_j + Q_i·(R_{ij} W_kR) + u·K_j + v·R_{ij}` (unmasked, unscaled).
pub fn relative_scores(tape: &mut Tape<'_>, layer: &AdaptedLayer, h: Var, heads: usize) -> Vec<Var> {
    let (n, d) = tape.shape(h);
    let dk = d / heads;
    let w_q = tape.param(layer.w_q);
    let w_k = tape.param(layer.w_k);
    let w_kr = tape.param(layer.w_kr);
    let u = tape.param(layer.u);
    let v = tape.param(layer.v);
    let q = tape.matmul(h, w_q);
    let k = tape.matmul(h, w_k);
    let rel = tape.constant(relative_position_embedding(n, d));
    let rel_k = tape.matmul(rel, w_kr);
    let row_of_pair: Vec<Option<usize>> = (0..n * n).map(|c| Some(c / n)).collect();
    (0..heads)
        .map(|hd| {
            let (a, b) = (hd * dk, (hd + 1) * dk);
            let qh = tape.slice_cols(q, a, b);
            let kh = tape.slice_cols(k, a, b);
            let content = tape.matmul_t(qh, kh);

            let q_pairs = tape.gather_rows(qh, row_of_pair.clone());
            let rel_kh = tape.slice_cols(rel_k, a, b);
            let qr = tape.mul(q_pairs, rel_kh);
            let qr = tape.sum_cols(qr);
            let qr = tape.reshape(qr, n, n);

            let uh = tape.slice_cols(u, a, b);
            let uk = tape.matmul_t(uh, kh);

            let rh = tape.slice_cols(rel, a, b);
            let vh = tape.slice_cols(v, a, b);
            let vr = tape.matmul_t(rh, vh);
            let vr = tape.reshape(vr, n, n);

            let s = tape.add(content, qr);
            let s = tape.add_row(s, uk);
            tape.add(s, vr)
        })
        .collect()
}

pub struct AttentionOutput {
    pub repr: CharRepr,
    /// Attention weights per head, each `n × n`.
    pub weights: Vec<Mat>,
}

pub fn adapted_attention(
    tape: &mut Tape<'_>,
    layer: &AdaptedLayer,
    input: &CharRepr,
    cfg: &EncoderConfig,
    scaled: bool,
    ctx: &mut ForwardCtx,
) -> AttentionOutput {
    let h = input.values;
    let d = tape.shape(h).1;
    let dk = d / cfg.heads;
    let scores = relative_scores(tape, layer, h, cfg.heads);
    let w_v = tape.param(layer.w_v);
    let values = tape.matmul(h, w_v);
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for (hd, s) in scores.into_iter().enumerate() {
        let s = if scaled { tape.scale(s, 1.0 / (dk as f64).sqrt()) } else { s };
        let attn = tape.softmax_rows(s, Some(&input.mask));
        weights.push(tape.value(attn).clone());
        let vh = tape.slice_cols(values, hd * dk, (hd + 1) * dk);
        heads.push(tape.matmul(attn, vh));
    }
    let cat = tape.concat_cols(&heads);
    let attended = layer.out.forward(tape, cat);
    let attended = ctx.dropout(tape, attended, cfg.dropout);
    let x = tape.add(h, attended);
    let x = layer.ln_attn.forward(tape, x);
    let ff = layer.ff_in.forward(tape, x);
    let ff = tape.gelu(ff);
    let ff = layer.ff_out.forward(tape, ff);
    let ff = ctx.dropout(tape, ff, cfg.dropout);
    let y = tape.add(x, ff);
    let y = layer.ln_ff.forward(tape, y);
    let y = tape.mask_rows(y, &input.mask);
    AttentionOutput { repr: CharRepr { values: y, mask: input.mask.clone() }, weights }
}

pub fn encode(
    tape: &mut Tape<'_>,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    ablations: &Ablations,
    input: &EncoderInput,
    ctx: &mut ForwardCtx,
) -> EncoderOutput {
    let (mut repr, mut attention) = embed_characters(tape, params, cfg, input, ctx);
    if !ablations.no_adapted_transformer {
        for layer in &params.layers {
            let out = adapted_attention(tape, layer, &repr, cfg, ablations.use_scaling_factor, ctx);
            let n = out.weights[0].nrows();
            attention = out.weights.iter().fold(Mat::zeros((n, n)), |acc, w| acc + w) / out.weights.len() as f64;
            repr = out.repr;
        }
    }
    EncoderOutput { repr, attention }
}
