//! Per-cell relation scores: a biaffine head over character representations,
//! an MLP head over tag-aware grid features, their fusion, and the loss.

use ndarray::Array2;

use crate::autodiff::{log_sum_exp, Mat, ParamId, Tape, Var};
use crate::config::{Ablations, PredictionMode, PredictorConfig};
use crate::corpus::{GoldGrid, TagGrid, TagId, TagVocabulary};
use crate::encoder::CharRepr;
use crate::nn::{Init, Linear};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Biaffine {
    pub subject: Linear,
    pub object: Linear,
    /// `d_b × (|R| · d_b)`; slice `r` is the bilinear form of tag `r`.
    pub u: ParamId,
    pub w_s: ParamId,
    pub w_o: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutputMlp {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictorParams {
    pub biaffine: Option<Biaffine>,
    pub mlp: Option<OutputMlp>,
    pub num_tags: usize,
}

impl PredictorParams {
    pub fn init(
        init: &mut Init<'_>,
        cfg: &PredictorConfig,
        abl: &Ablations,
        d_h: usize,
        tf_channels: usize,
        num_tags: usize,
    ) -> Self {
        let d_b = cfg.d_biaffine;
        let bound = 1.0 / (d_b as f64).sqrt();
        let biaffine = (!abl.no_biaffine_predictor).then(|| Biaffine {
            subject: init.linear("predictor.biaffine.subject", d_h, d_b),
            object: init.linear("predictor.biaffine.object", d_h, d_b),
            u: init.uniform("predictor.biaffine.u", d_b, num_tags * d_b, bound),
            w_s: init.uniform("predictor.biaffine.w_s", d_b, num_tags, bound),
            w_o: init.uniform("predictor.biaffine.w_o", d_b, num_tags, bound),
            b: init.constant("predictor.biaffine.b", 1, num_tags, 0.0),
        });
        let mlp = (!abl.no_mlp_predictor).then(|| OutputMlp {
            hidden: init.linear("predictor.mlp.hidden", tf_channels, cfg.d_mlp),
            out: init.linear("predictor.mlp.out", cfg.d_mlp, num_tags),
        });
        Self { biaffine, mlp, num_tags }
    }
}

/// `y'_ij = s_iᵀ U o_j + W[s_i; o_j] + b` with `s = GELU(Linear(h))`,
/// `o = GELU(Linear(h))`. Rows are cells `i·n + j`.
pub fn biaffine_scores(tape: &mut Tape<'_>, p: &Biaffine, h: &CharRepr, num_tags: usize) -> Var {
    let n = h.mask.len();
    let s = p.subject.forward(tape, h.values);
    let s = tape.gelu(s);
    let o = p.object.forward(tape, h.values);
    let o = tape.gelu(o);
    let d_b = tape.shape(s).1;
    let u = tape.param(p.u);
    let su = tape.matmul(s, u);
    let per_tag: Vec<Var> = (0..num_tags)
        .map(|r| {
            let slice = tape.slice_cols(su, r * d_b, (r + 1) * d_b);
            let grid = tape.matmul_t(slice, o);
            tape.reshape(grid, n * n, 1)
        })
        .collect();
    let bilinear = tape.concat_cols(&per_tag);
    let w_s = tape.param(p.w_s);
    let w_o = tape.param(p.w_o);
    let ls = tape.matmul(s, w_s);
    let lo = tape.matmul(o, w_o);
    let ls = tape.gather_rows(ls, (0..n * n).map(|c| Some(c / n)).collect());
    let lo = tape.gather_rows(lo, (0..n * n).map(|c| Some(c % n)).collect());
    let y = tape.add(bilinear, ls);
    let y = tape.add(y, lo);
    let b = tape.param(p.b);
    let y = tape.add_row(y, b);
    tape.mask_rows(y, &crate::grid::cell_mask(&h.mask))
}

/// `y''_ij = MLP(TF_ij)`.
pub fn mlp_scores(tape: &mut Tape<'_>, p: &OutputMlp, tf: Var, cell_mask: &[bool]) -> Var {
    let x = p.hidden.forward(tape, tf);
    let x = tape.gelu(x);
    let y = p.out.forward(tape, x);
    tape.mask_rows(y, cell_mask)
}

/// Sum of the available heads.
pub fn fuse(tape: &mut Tape<'_>, biaffine: Option<Var>, mlp: Option<Var>) -> Var {
    match (biaffine, mlp) {
        (Some(a), Some(b)) => tape.add(a, b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => panic!("at least one predictor head is required"),
    }
}

/// Tag set of one cell's fused scores.
pub fn predict_cell(scores: &[f64], mode: PredictionMode, s0: f64, vocab: &TagVocabulary) -> Vec<TagId> {
    match mode {
        PredictionMode::Threshold => (0..scores.len()).filter(|&t| scores[t] > s0).map(TagId).collect(),
        PredictionMode::Softmax => {
            let best = (0..scores.len()).fold(0, |b, t| if scores[t] > scores[b] { t } else { b });
            if vocab.none() == Some(TagId(best)) {
                Vec::new()
            } else {
                vec![TagId(best)]
            }
        }
    }
}

/// Predicted grid from an `(n·n) × |R|` score matrix.
pub fn predict_grid(scores: &Mat, mask: &[bool], mode: PredictionMode, s0: f64, vocab: &TagVocabulary) -> TagGrid {
    let n = mask.len();
    let mut grid = TagGrid::new(n);
    for i in (0..n).filter(|&i| mask[i]) {
        for j in (0..n).filter(|&j| mask[j]) {
            let row = scores.row(i * n + j).to_vec();
            for t in predict_cell(&row, mode, s0, vocab) {
                grid.insert(i, j, t);
            }
        }
    }
    grid
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(scores);
    scores.iter().map(|s| (s - lse).exp()).collect()
}

/// Gold target matrix; with an explicit NONE class, empty real cells target it.
pub fn gold_targets(gold: &GoldGrid, vocab: &TagVocabulary, mask: &[bool]) -> Array2<bool> {
    let n = mask.len();
    let mut out = Array2::from_elem((n * n, vocab.len()), false);
    for (&(i, j), tags) in &gold.cells {
        for t in tags {
            out[[i * n + j, t.0]] = true;
        }
    }
    if let Some(none) = vocab.none() {
        for c in 0..n * n {
            if mask[c / n] && mask[c % n] && !out.row(c).iter().any(|&x| x) {
                out[[c, none.0]] = true;
            }
        }
    }
    out
}

/// Threshold loss of one cell: `log(e^{-s0} + Σ_pos e^{-s}) + log(e^{s0} + Σ_neg e^{s})`.
pub fn cell_loss(pos: &[f64], neg: &[f64], s0: f64) -> f64 {
    let p: Vec<f64> = std::iter::once(-s0).chain(pos.iter().map(|s| -s)).collect();
    let q: Vec<f64> = std::iter::once(s0).chain(neg.iter().copied()).collect();
    log_sum_exp(&p) + log_sum_exp(&q)
}

/// The same loss written as `log(1 + Σ_pos e^{s0 - s}) + log(1 + Σ_neg e^{s - s0})`.
pub fn cell_loss_expanded(pos: &[f64], neg: &[f64], s0: f64) -> f64 {
    let p: f64 = pos.iter().map(|s| (s0 - s).exp()).sum();
    let q: f64 = neg.iter().map(|s| (s - s0).exp()).sum();
    p.ln_1p() + q.ln_1p()
}

/// Summed multi-tag loss over real cells plus the number of cells summed.
pub fn multi_tag_loss(
    tape: &mut Tape<'_>,
    scores: Var,
    gold: &GoldGrid,
    vocab: &TagVocabulary,
    mask: &[bool],
    s0: f64,
) -> (Var, usize) {
    let targets = gold_targets(gold, vocab, mask);
    let cells = crate::grid::cell_mask(mask);
    let count = cells.iter().filter(|&&c| c).count();
    (tape.multi_tag_loss(scores, &targets, &cells, s0), count)
}
