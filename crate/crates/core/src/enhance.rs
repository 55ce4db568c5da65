//! Tag-aware grid features and iterative refinement of the subject/object
//! character representations that feed grid construction.

use crate::autodiff::{Mat, ParamStore, Tape, Var};
use crate::config::{Ablations, EnhanceConfig, GridConfig};
use crate::encoder::CharRepr;
use crate::grid::{self, GridParams, PairGrid};
use crate::nn::{ForwardCtx, Init, LayerNorm, Linear, MultiHeadAttention};

/// Tag groups in feature order.
pub const TAG_GROUPS: [&str; 4] = ["nnc", "pnc", "htc", "thc"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SideParams {
    pub pool: Linear,
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub post: Linear,
    pub norm: LayerNorm,
}

impl SideParams {
    fn init(init: &mut Init<'_>, name: &str, d_in: usize, d_h: usize, heads: usize) -> Self {
        Self {
            pool: init.linear(&format!("{name}.pool"), d_in, d_h),
            self_attn: init.attention(&format!("{name}.self_attn"), d_h, heads),
            cross_attn: init.attention(&format!("{name}.cross_attn"), d_h, heads),
            post: init.linear(&format!("{name}.post"), d_h, d_h),
            norm: init.layer_norm(&format!("{name}.norm"), d_h),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnhanceParams {
    /// One projection per tag group, or a single shared one when tied.
    pub groups: Vec<Linear>,
    pub subject: SideParams,
    pub object: SideParams,
}

impl EnhanceParams {
    pub fn init(init: &mut Init<'_>, cfg: &EnhanceConfig, abl: &Ablations, q_channels: usize, d_h: usize) -> Self {
        let groups = if abl.no_tag_relations {
            vec![init.linear("enhance.tag_shared", q_channels, cfg.d_r)]
        } else {
            TAG_GROUPS.iter().map(|g| init.linear(&format!("enhance.tag_{g}"), q_channels, cfg.d_r)).collect()
        };
        let width = TAG_GROUPS.len() * cfg.d_r;
        Self {
            groups,
            subject: SideParams::init(init, "enhance.subject", width, d_h, cfg.heads),
            object: SideParams::init(init, "enhance.object", width, d_h, cfg.heads),
        }
    }

    pub fn tf_channels(&self, store: &ParamStore) -> usize {
        TAG_GROUPS.len() * self.groups[0].d_out(store)
    }
}

/// `TF = [W_g Q + b_g]` over the four tag groups.
pub fn tag_features(tape: &mut Tape<'_>, params: &EnhanceParams, q: &PairGrid) -> PairGrid {
    let parts: Vec<Var> = if params.groups.len() == 1 {
        let shared = params.groups[0].forward(tape, q.values);
        vec![shared; TAG_GROUPS.len()]
    } else {
        params.groups.iter().map(|g| g.forward(tape, q.values)).collect()
    };
    let tf = tape.concat_cols(&parts);
    PairGrid { values: tape.mask_rows(tf, &q.mask), mask: q.mask.clone(), n: q.n }
}

/// Row-wise (subject) and column-wise (object) max over real cells.
pub fn pool_grid(tape: &mut Tape<'_>, tf: &PairGrid) -> (Var, Var) {
    let n = tf.n;
    let rows: Vec<Vec<usize>> = (0..n).map(|i| (0..n).map(|j| i * n + j).filter(|&c| tf.mask[c]).collect()).collect();
    let cols: Vec<Vec<usize>> = (0..n).map(|j| (0..n).map(|i| i * n + j).filter(|&c| tf.mask[c]).collect()).collect();
    (tape.segment_max(tf.values, &rows), tape.segment_max(tf.values, &cols))
}

pub fn pool_recover(tape: &mut Tape<'_>, params: &EnhanceParams, tf: &PairGrid, mask: &[bool]) -> (Var, Var) {
    let (s, o) = pool_grid(tape, tf);
    let recover = |tape: &mut Tape<'_>, side: &SideParams, x: Var| {
        let y = side.pool.forward(tape, x);
        let y = tape.gelu(y);
        tape.mask_rows(y, mask)
    };
    (recover(tape, &params.subject, s), recover(tape, &params.object, o))
}

fn enhance_side(tape: &mut Tape<'_>, side: &SideParams, recovered: Var, original: Var, mask: &[bool]) -> Var {
    let (tt, _) = side.self_attn.forward(tape, recovered, recovered, mask);
    let (ct, _) = side.cross_attn.forward(tape, tt, original, mask);
    let ct = side.post.forward(tape, ct);
    let ct = tape.gelu(ct);
    let sum = tape.add(recovered, ct);
    let y = side.norm.forward(tape, sum);
    tape.mask_rows(y, mask)
}

/// One refinement step: self-attention over the recovered representations,
/// cross-attention onto the original projections, `Linear + GELU`, then a
/// residual layer norm.
pub fn enhance_round(
    tape: &mut Tape<'_>,
    params: &EnhanceParams,
    recovered_s: Var,
    recovered_o: Var,
    original_s: Var,
    original_o: Var,
    mask: &[bool],
) -> (Var, Var) {
    (
        enhance_side(tape, &params.subject, recovered_s, original_s, mask),
        enhance_side(tape, &params.object, recovered_o, original_o, mask),
    )
}

/// Shared state of one grid pass.
pub struct GridInputs<'c> {
    pub grid: &'c GridConfig,
    pub ablations: &'c Ablations,
    pub attention: &'c Mat,
    pub mask: &'c [bool],
}

/// CLN, pair features and dilated convolutions for one subject/object pair.
pub fn grid_pass(
    tape: &mut Tape<'_>,
    params: &GridParams,
    inputs: &GridInputs<'_>,
    subject: Var,
    object: Var,
    ctx: &mut ForwardCtx,
) -> PairGrid {
    let v = grid::conditional_layer_norm(tape, &params.cln_gain, &params.cln_bias, subject, object, inputs.mask);
    let c = grid::pair_features(tape, params, inputs.grid, inputs.ablations, &v, inputs.attention, ctx);
    grid::dilated_convolutions(tape, params, &c)
}

pub struct EnhanceOutput {
    pub tf: PairGrid,
    pub subject: Var,
    pub object: Var,
}

/// Runs `rounds` grid passes, each followed by tag features, pooling recovery
/// and an enhancement step whose outputs condition the next pass.
pub fn run_enhancement(
    tape: &mut Tape<'_>,
    grid_params: &GridParams,
    params: &EnhanceParams,
    inputs: &GridInputs<'_>,
    h: &CharRepr,
    rounds: usize,
    ctx: &mut ForwardCtx,
) -> EnhanceOutput {
    assert!(rounds >= 1, "enhancement needs at least one round");
    let (hs, ho) = grid::project_subject_object(tape, grid_params, h.values, &h.mask);
    let (mut cur_s, mut cur_o) = (hs, ho);
    let mut tf = None;
    for _ in 0..rounds {
        let q = grid_pass(tape, grid_params, inputs, cur_s, cur_o, ctx);
        let features = tag_features(tape, params, &q);
        let (rs, ro) = pool_recover(tape, params, &features, &h.mask);
        (cur_s, cur_o) = enhance_round(tape, params, rs, ro, hs, ho, &h.mask);
        tf = Some(features);
    }
    EnhanceOutput { tf: tf.expect("at least one round"), subject: cur_s, object: cur_o }
}
