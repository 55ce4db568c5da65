//! Character-pair grid construction: subject/object projections, conditional
//! layer normalization, relative pair features and dilated convolutions.

use crate::autodiff::{Mat, ParamId, ParamStore, Tape, Var};
use crate::config::{Ablations, GridConfig};
use crate::nn::{ForwardCtx, Init, Linear};

/// Nineteen signed log-scale distance buckets plus one reserved padding row.
pub const DISTANCE_BUCKETS: usize = 20;
pub const ATTN_BUCKETS: usize = 16;

pub const REGION_LOWER: usize = 0;
pub const REGION_DIAGONAL: usize = 1;
pub const REGION_UPPER: usize = 2;

fn magnitude_bucket(d: u64) -> usize {
    match d {
        0..=4 => d as usize,
        5..=7 => 5,
        8..=15 => 6,
        16..=31 => 7,
        32..=63 => 8,
        _ => 9,
    }
}

/// Bucket of the signed offset `j − i`; always in `1..DISTANCE_BUCKETS`.
pub fn distance_bucket(delta: i64) -> usize {
    let m = magnitude_bucket(delta.unsigned_abs());
    if delta < 0 {
        10 - m
    } else {
        10 + m
    }
}

pub fn region_index(i: usize, j: usize) -> usize {
    match i.cmp(&j) {
        std::cmp::Ordering::Greater => REGION_LOWER,
        std::cmp::Ordering::Equal => REGION_DIAGONAL,
        std::cmp::Ordering::Less => REGION_UPPER,
    }
}

pub fn attn_bucket(weight: f64, buckets: usize) -> usize {
    let b = (weight.clamp(0.0, 1.0) * buckets as f64).floor() as usize;
    b.min(buckets - 1)
}

/// `(n·n) × channels` grid with a per-cell mask (both positions real).
#[derive(Clone, Debug)]
pub struct PairGrid {
    pub values: Var,
    pub mask: Vec<bool>,
    pub n: usize,
}

pub fn cell_mask(mask: &[bool]) -> Vec<bool> {
    let n = mask.len();
    (0..n * n).map(|c| mask[c / n] && mask[c % n]).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv {
    pub dilation: usize,
    /// Kernel flattened as `(kernel² · c_in) × c_out`, offset-major.
    pub weight: Linear,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridParams {
    pub subject: Linear,
    pub object: Linear,
    pub cln_gain: Linear,
    pub cln_bias: Linear,
    pub distance: ParamId,
    pub region: ParamId,
    pub attn: ParamId,
    pub reduce: Linear,
    pub convs: Vec<Conv>,
    pub kernel: usize,
}

impl GridParams {
    pub fn init(init: &mut Init<'_>, cfg: &GridConfig, abl: &Ablations, d_h: usize) -> Self {
        let cln_gain = init.linear("grid.cln_gain", d_h, d_h);
        init.store.get_mut(cln_gain.b).fill(1.0);
        let cln_bias = init.linear("grid.cln_bias", d_h, d_h);
        init.store.get_mut(cln_bias.b).fill(0.0);
        let d_in = d_h
            + if abl.no_distance_matrix { 0 } else { cfg.d_dist }
            + if abl.no_region_matrix { 0 } else { cfg.d_region }
            + if abl.no_attn_matrix { 0 } else { cfg.d_attn };
        let convs = if abl.no_dilated_conv {
            Vec::new()
        } else {
            cfg.dilations
                .iter()
                .map(|&d| Conv {
                    dilation: d,
                    weight: init.linear(&format!("grid.conv{d}"), cfg.kernel * cfg.kernel * cfg.d_reduced, cfg.d_c),
                })
                .collect()
        };
        Self {
            subject: init.linear("grid.subject", d_h, d_h),
            object: init.linear("grid.object", d_h, d_h),
            cln_gain,
            cln_bias,
            distance: init.embedding("grid.distance", DISTANCE_BUCKETS, cfg.d_dist),
            region: init.embedding("grid.region", 3, cfg.d_region),
            attn: init.embedding("grid.attn", cfg.attn_buckets, cfg.d_attn),
            reduce: init.linear("grid.reduce", d_in, cfg.d_reduced),
            convs,
            kernel: cfg.kernel,
        }
    }

    /// Channels of the convolution output (the input of the tag projections).
    pub fn q_channels(&self, store: &ParamStore) -> usize {
        if self.convs.is_empty() {
            self.reduce.d_out(store)
        } else {
            self.convs.iter().map(|c| c.weight.d_out(store)).sum()
        }
    }
}

pub fn project_subject_object(tape: &mut Tape<'_>, params: &GridParams, h: Var, mask: &[bool]) -> (Var, Var) {
    let s = params.subject.forward(tape, h);
    let o = params.object.forward(tape, h);
    (tape.mask_rows(s, mask), tape.mask_rows(o, mask))
}

/// `V_ij = γ(h_i^s) ⊙ norm(h_j^o) + λ(h_i^s)` over every cell.
pub fn conditional_layer_norm(
    tape: &mut Tape<'_>,
    gain: &Linear,
    bias: &Linear,
    subject: Var,
    object: Var,
    mask: &[bool],
) -> PairGrid {
    let n = mask.len();
    let gamma = gain.forward(tape, subject);
    let lambda = bias.forward(tape, subject);
    let normed = tape.layer_norm_rows(object, crate::nn::LN_EPS);
    let rows: Vec<Option<usize>> = (0..n * n).map(|c| Some(c / n)).collect();
    let cols: Vec<Option<usize>> = (0..n * n).map(|c| Some(c % n)).collect();
    let g = tape.gather_rows(gamma, rows.clone());
    let l = tape.gather_rows(lambda, rows);
    let o = tape.gather_rows(normed, cols);
    let v = tape.mul(g, o);
    let v = tape.add(v, l);
    let cells = cell_mask(mask);
    PairGrid { values: tape.mask_rows(v, &cells), mask: cells, n }
}

/// Concatenates `V` with distance, region and attention embeddings and reduces
/// the result through `Linear + GELU`.
pub fn pair_features(
    tape: &mut Tape<'_>,
    params: &GridParams,
    cfg: &GridConfig,
    abl: &Ablations,
    v: &PairGrid,
    attn_weights: &Mat,
    ctx: &mut ForwardCtx,
) -> PairGrid {
    let n = v.n;
    assert_eq!(attn_weights.dim(), (n, n), "attention weights must be n × n");
    let mut parts = vec![v.values];
    if !abl.no_distance_matrix {
        let idx = (0..n * n).map(|c| Some(distance_bucket((c % n) as i64 - (c / n) as i64))).collect();
        let table = tape.param(params.distance);
        parts.push(tape.gather_rows(table, idx));
    }
    if !abl.no_region_matrix {
        let idx = (0..n * n).map(|c| Some(region_index(c / n, c % n))).collect();
        let table = tape.param(params.region);
        parts.push(tape.gather_rows(table, idx));
    }
    if !abl.no_attn_matrix {
        let idx = (0..n * n).map(|c| Some(attn_bucket(attn_weights[[c / n, c % n]], cfg.attn_buckets))).collect();
        let table = tape.param(params.attn);
        parts.push(tape.gather_rows(table, idx));
    }
    let cat = tape.concat_cols(&parts);
    let c = params.reduce.forward(tape, cat);
    let c = tape.gelu(c);
    let c = ctx.dropout(tape, c, cfg.dropout);
    PairGrid { values: tape.mask_rows(c, &v.mask), mask: v.mask.clone(), n }
}

/// Source row for every `(cell, kernel offset)` pair, offset-major per cell;
/// out-of-grid and masked neighbours map to `None` (zero padding).
fn im2col_index(n: usize, kernel: usize, dilation: usize, cells: &[bool]) -> Vec<Option<usize>> {
    let half = (kernel / 2) as i64;
    let d = dilation as i64;
    let mut idx = Vec::with_capacity(n * n * kernel * kernel);
    for i in 0..n as i64 {
        for j in 0..n as i64 {
            for a in -half..=half {
                for b in -half..=half {
                    let (si, sj) = (i + a * d, j + b * d);
                    let inside = (0..n as i64).contains(&si) && (0..n as i64).contains(&sj);
                    let src = inside.then(|| (si * n as i64 + sj) as usize).filter(|&s| cells[s]);
                    idx.push(src);
                }
            }
        }
    }
    idx
}

/// `GELU(DConv_ι(C))` per dilation, concatenated over channels. Without
/// convolutions (ablation) `C` passes through unchanged.
pub fn dilated_convolutions(tape: &mut Tape<'_>, params: &GridParams, c: &PairGrid) -> PairGrid {
    if params.convs.is_empty() {
        return c.clone();
    }
    let n = c.n;
    let channels = tape.shape(c.values).1;
    let k2 = params.kernel * params.kernel;
    let input = tape.mask_rows(c.values, &c.mask);
    let outs: Vec<Var> = params
        .convs
        .iter()
        .map(|conv| {
            let cols = tape.gather_rows(input, im2col_index(n, params.kernel, conv.dilation, &c.mask));
            let cols = tape.reshape(cols, n * n, k2 * channels);
            let y = conv.weight.forward(tape, cols);
            tape.gelu(y)
        })
        .collect();
    let q = tape.concat_cols(&outs);
    PairGrid { values: tape.mask_rows(q, &c.mask), mask: c.mask.clone(), n }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &GridConfig, abl: &Ablations, d_h: usize) -> (ParamStore, GridParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = GridParams::init(&mut Init { store: &mut store, rng: &mut rng }, cfg, abl, d_h);
        (store, p)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Mat {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn buckets() {
        assert_eq!(distance_bucket(0), 10);
        assert_eq!(distance_bucket(1), 11);
        assert_eq!(distance_bucket(-1), 9);
        assert_eq!(distance_bucket(6), 15);
        assert_eq!(distance_bucket(100), 19);
        assert_eq!(distance_bucket(-100), 1);
        let all: std::collections::BTreeSet<usize> = (-200..200).map(distance_bucket).collect();
        assert_eq!(all.len(), DISTANCE_BUCKETS - 1);
        assert_eq!(region_index(2, 2), REGION_DIAGONAL);
        assert_eq!(region_index(3, 1), REGION_LOWER);
        assert_eq!(attn_bucket(1.0, 16), 15);
        assert_eq!(attn_bucket(0.0, 16), 0);
    }

    #[test]
    fn projection_identity_constant_and_loop() {
        let (mut store, p) = setup(&GridConfig::default(), &Ablations::default(), 3);
        let h = random(4, 3, 1);
        store.get_mut(p.subject.w).assign(&Mat::eye(3));
        store.get_mut(p.subject.b).fill(0.0);
        store.get_mut(p.object.w).fill(0.0);
        store.get_mut(p.object.b).assign(&ndarray::array![[0.5, -1.0, 2.0]]);
        let mut tape = Tape::new(&store);
        let x = tape.constant(h.clone());
        let (s, o) = project_subject_object(&mut tape, &p, x, &[true; 4]);
        assert_eq!(tape.value(s), &h);
        for row in tape.value(o).rows() {
            assert_eq!(row.to_vec(), vec![0.5, -1.0, 2.0]);
        }

        let (store, p) = setup(&GridConfig::default(), &Ablations::default(), 3);
        let mut tape = Tape::new(&store);
        let x = tape.constant(h.clone());
        let (s, _) = project_subject_object(&mut tape, &p, x, &[true; 4]);
        let (w, b) = (store.get(p.subject.w), store.get(p.subject.b));
        for i in 0..4 {
            for k in 0..3 {
                let expect: f64 = (0..3).map(|r| h[[i, r]] * w[[r, k]]).sum::<f64>() + b[[0, k]];
                assert!((tape.value(s)[[i, k]] - expect).abs() < 1e-6);
            }
        }
    }

    fn plain_cln(store: &mut ParamStore, p: &GridParams) {
        store.get_mut(p.cln_gain.w).fill(0.0);
        store.get_mut(p.cln_gain.b).fill(1.0);
        store.get_mut(p.cln_bias.w).fill(0.0);
        store.get_mut(p.cln_bias.b).fill(0.0);
    }

    #[test]
    fn cln_two_component_example() {
        let (mut store, p) = setup(&GridConfig::default(), &Ablations::default(), 2);
        plain_cln(&mut store, &p);
        let mut tape = Tape::new(&store);
        let s = tape.constant(ndarray::array![[0.3, 0.9]]);
        let o = tape.constant(ndarray::array![[1.0, 3.0]]);
        let v = conditional_layer_norm(&mut tape, &p.cln_gain, &p.cln_bias, s, o, &[true]);
        let cell = tape.value(v.values).row(0).to_vec();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((cell[0] + expect).abs() < 1e-12 && (cell[1] - expect).abs() < 1e-12);
        assert!((cell[0] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn cln_degenerate_condition_is_plain_layer_norm() {
        let (mut store, p) = setup(&GridConfig::default(), &Ablations::default(), 6);
        plain_cln(&mut store, &p);
        let mut tape = Tape::new(&store);
        let s = tape.constant(random(3, 6, 2));
        let o = tape.constant(random(3, 6, 3));
        let v = conditional_layer_norm(&mut tape, &p.cln_gain, &p.cln_bias, s, o, &[true; 3]);
        let vals = tape.value(v.values);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(vals.row(i * 3 + j), vals.row(j));
                let row = vals.row(i * 3 + j);
                let mean = row.sum() / 6.0;
                let std = (row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0).sqrt();
                assert!(mean.abs() <= 1e-5 && (std - 1.0).abs() <= 1e-3);
            }
        }
    }

    #[test]
    fn cln_constant_object_yields_lambda() {
        let (mut store, p) = setup(&GridConfig::default(), &Ablations::default(), 4);
        store.get_mut(p.cln_bias.b).assign(&ndarray::array![[0.1, 0.2, 0.3, 0.4]]);
        store.get_mut(p.cln_bias.w).fill(0.0);
        let mut tape = Tape::new(&store);
        let s = tape.constant(random(2, 4, 4));
        let o = tape.constant(Mat::from_elem((2, 4), 7.0));
        let v = conditional_layer_norm(&mut tape, &p.cln_gain, &p.cln_bias, s, o, &[true; 2]);
        for row in tape.value(v.values).rows() {
            for (a, b) in row.iter().zip([0.1, 0.2, 0.3, 0.4]) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pair_features_shape_and_relative_rows() {
        let cfg = ModelConfig::tiny().grid;
        let abl = Ablations::default();
        let (store, p) = setup(&cfg, &abl, 16);
        let n = 4;
        let mut tape = Tape::new(&store);
        let v = tape.constant(random(n * n, 16, 5));
        let grid = PairGrid { values: v, mask: vec![true; n * n], n };
        let attn = Mat::from_elem((n, n), 0.25);
        let c = pair_features(&mut tape, &p, &cfg, &abl, &grid, &attn, &mut ForwardCtx::eval());
        assert_eq!(tape.shape(c.values), (n * n, cfg.d_reduced));
        for i in 0..n - 1 {
            for j in 0..n - 1 {
                let (a, b) = ((j as i64) - (i as i64), (j as i64 + 1) - (i as i64 + 1));
                assert_eq!(distance_bucket(a), distance_bucket(b));
                assert_eq!(region_index(i, j), region_index(i + 1, j + 1));
            }
            assert_eq!(distance_bucket(0), distance_bucket((i as i64) - (i as i64)));
            assert_eq!(region_index(i, i), REGION_DIAGONAL);
        }
    }

    #[test]
    fn padding_leaves_the_real_subgrid_unchanged() {
        let cfg = ModelConfig::tiny().grid;
        let abl = Ablations::default();
        let (store, p) = setup(&cfg, &abl, 16);
        let (n, padded) = (4, 6);
        let values = random(n * n, 16, 8);
        let attn = random(n, n, 9).mapv(f64::abs);
        let run = |m: usize| {
            let mut v = Mat::zeros((m * m, 16));
            let mut a = Mat::zeros((m, m));
            for i in 0..n {
                a.row_mut(i).slice_mut(ndarray::s![..n]).assign(&attn.row(i));
                for j in 0..n {
                    v.row_mut(i * m + j).assign(&values.row(i * n + j));
                }
            }
            let mask: Vec<bool> = (0..m).map(|i| i < n).collect();
            let mut tape = Tape::new(&store);
            let v = tape.constant(v);
            let grid = PairGrid { values: v, mask: cell_mask(&mask), n: m };
            let c = pair_features(&mut tape, &p, &cfg, &abl, &grid, &a, &mut ForwardCtx::eval());
            let q = dilated_convolutions(&mut tape, &p, &c);
            (tape.value(c.values).clone(), tape.value(q.values).clone())
        };
        let (c0, q0) = run(n);
        let (c1, q1) = run(padded);
        for i in 0..padded {
            for j in 0..padded {
                let cell = i * padded + j;
                if i < n && j < n {
                    let real = i * n + j;
                    assert!((&c1.row(cell) - &c0.row(real)).iter().all(|d| d.abs() <= 1e-5));
                    assert!((&q1.row(cell) - &q0.row(real)).iter().all(|d| d.abs() <= 1e-5));
                } else {
                    assert!(c1.row(cell).iter().chain(q1.row(cell)).all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn convolution_of_zero_grid_is_zero() {
        let cfg = ModelConfig::tiny().grid;
        let (mut store, p) = setup(&cfg, &Ablations::default(), 16);
        for conv in &p.convs {
            store.get_mut(conv.weight.b).fill(0.0);
        }
        let n = 3;
        let mut tape = Tape::new(&store);
        let c = tape.constant(Mat::zeros((n * n, cfg.d_reduced)));
        let q = dilated_convolutions(&mut tape, &p, &PairGrid { values: c, mask: vec![true; n * n], n });
        assert_eq!(tape.shape(q.values), (n * n, cfg.dilations.len() * cfg.d_c));
        assert!(tape.value(q.values).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pointwise_convolution_matches_loop() {
        let cfg = GridConfig { dilations: vec![1], kernel: 1, d_reduced: 3, d_c: 2, ..GridConfig::default() };
        let (store, p) = setup(&cfg, &Ablations::default(), 4);
        let n = 3;
        let input = random(n * n, 3, 6);
        let mut tape = Tape::new(&store);
        let c = tape.constant(input.clone());
        let q = dilated_convolutions(&mut tape, &p, &PairGrid { values: c, mask: vec![true; n * n], n });
        let (w, b) = (store.get(p.convs[0].weight.w), store.get(p.convs[0].weight.b));
        for cell in 0..n * n {
            for k in 0..2 {
                let pre: f64 = (0..3).map(|r| input[[cell, r]] * w[[r, k]]).sum::<f64>() + b[[0, k]];
                assert!((tape.value(q.values)[[cell, k]] - crate::autodiff::gelu(pre)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dilated_convolution_matches_direct_loop() {
        let cfg = GridConfig { dilations: vec![2], kernel: 3, d_reduced: 2, d_c: 2, ..GridConfig::default() };
        let (store, p) = setup(&cfg, &Ablations::default(), 4);
        let n = 5;
        let mut mask = vec![true; n];
        mask[4] = false;
        let cells = cell_mask(&mask);
        let input = random(n * n, 2, 7);
        let mut tape = Tape::new(&store);
        let c = tape.constant(input.clone());
        let q = dilated_convolutions(&mut tape, &p, &PairGrid { values: c, mask: cells.clone(), n });
        let (w, b) = (store.get(p.convs[0].weight.w), store.get(p.convs[0].weight.b));
        for i in 0..n {
            for j in 0..n {
                for k in 0..2 {
                    let mut pre = b[[0, k]];
                    for (o, (a, bb)) in (-1i64..=1).flat_map(|a| (-1i64..=1).map(move |b| (a, b))).enumerate() {
                        let (si, sj) = (i as i64 + 2 * a, j as i64 + 2 * bb);
                        if si < 0 || sj < 0 || si >= n as i64 || sj >= n as i64 {
                            continue;
                        }
                        let src = si as usize * n + sj as usize;
                        if !cells[src] {
                            continue;
                        }
                        for ch in 0..2 {
                            pre += input[[src, ch]] * w[[o * 2 + ch, k]];
                        }
                    }
                    let expect = if cells[i * n + j] { crate::autodiff::gelu(pre) } else { 0.0 };
                    assert!((tape.value(q.values)[[i * n + j, k]] - expect).abs() < 1e-9);
                }
            }
        }
    }
}
