//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every quantity flowing through the model is a 2-D matrix. Grids of shape
//! `n × n × c` are stored row-major as `(n·n) × c`, so cell `(i, j)` lives in
//! row `i·n + j`. A [`Tape`] records operations as they are evaluated and
//! [`Tape::backward`] replays them in reverse to accumulate gradients for the
//! parameters that were read from a [`ParamStore`].

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique name.
    ///
    /// Panics if the name is already taken; parameter layouts are built once
    /// from a validated config, so a duplicate is a programming error.
    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Gradients aligned with a [`ParamStore`]; `None` means "never touched".
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Mat) {
        match &mut self.grads[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, eps: f64 },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<Option<usize>>),
    Reshape(Var),
    SumCols(Var),
    SegmentMax { x: Var, argmax: Vec<Vec<Option<usize>>> },
    MultiTagLoss { scores: Var, weights: Mat },
}

struct Node {
    op: Op,
    value: Option<Mat>,
    param: Option<ParamId>,
}

/// Operation recorder. Values of parameter leaves are borrowed from the store.
pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable `log(Σ exp(values))`; `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.nodes.push(Node { op, value: Some(value), param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, node.param) {
            (Some(m), _) => m,
            (None, Some(p)) => self.store.get(p),
            (None, None) => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Trainable leaf; repeated reads of the same parameter share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node { op: Op::Leaf, value: None, param: Some(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), out)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(Op::MatMulT(a, b), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), out)
    }

    /// `a (r×c) + row (1×c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row shape mismatch");
        let out = self.value(a) + self.value(row);
        self.push(Op::AddRow(a, row), out)
    }

    /// `a (r×c) + col (r×1)` broadcast over columns.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (r, _) = self.shape(a);
        assert_eq!(self.shape(col), (r, 1), "add_col shape mismatch");
        let out = self.value(a) + self.value(col);
        self.push(Op::AddCol(a, col), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), out)
    }

    /// `a (r×c) ⊙ row (1×c)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (_, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row shape mismatch");
        let out = self.value(a) * self.value(row);
        self.push(Op::MulRow(a, row), out)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        self.push(Op::Scale(a, factor), out)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(Op::Gelu(a), out)
    }

    /// Row softmax where `col_mask[j] == false` columns get weight exactly 0.
    /// A row with every column masked is all zeros.
    pub fn softmax_rows(&mut self, a: Var, col_mask: Option<&[bool]>) -> Var {
        let x = self.value(a);
        let (r, c) = x.dim();
        if let Some(m) = col_mask {
            assert_eq!(m.len(), c, "softmax mask length");
        }
        let keep = |j: usize| col_mask.is_none_or(|m| m[j]);
        let mut out = Mat::zeros((r, c));
        for i in 0..r {
            let row = x.row(i);
            let max = (0..c).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in (0..c).filter(|&j| keep(j)) {
                let e = (row[j] - max).exp();
                out[[i, j]] = e;
                total += e;
            }
            out.row_mut(i).mapv_inplace(|v| v / total);
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    /// Per-row standardization `(x - μ) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let c = x.ncols() as f64;
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let mean = row.sum() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        self.push(Op::LayerNormRows { x: a, eps }, out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(Op::SliceCols(a, start), out)
    }

    /// Output row `k` is `a[idx[k]]`, or zeros when `idx[k]` is `None`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<Option<usize>>) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros((idx.len(), x.ncols()));
        for (k, src) in idx.iter().enumerate() {
            if let Some(src) = *src {
                out.row_mut(k).assign(&x.row(src));
            }
        }
        self.push(Op::GatherRows(a, idx), out)
    }

    /// Zeroes rows whose mask entry is false.
    pub fn mask_rows(&mut self, a: Var, mask: &[bool]) -> Var {
        let idx = mask.iter().enumerate().map(|(k, &m)| m.then_some(k)).collect();
        self.gather_rows(a, idx)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), rows * cols, "reshape size mismatch");
        let out = x.to_shape((rows, cols)).expect("reshape").into_owned();
        self.push(Op::Reshape(a), out)
    }

    /// Row sums as an `r × 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(Op::SumCols(a), out)
    }

    /// Output row `g` is the elementwise max over rows `groups[g]`; an empty
    /// group yields zeros.
    pub fn segment_max(&mut self, a: Var, groups: &[Vec<usize>]) -> Var {
        let x = self.value(a);
        let c = x.ncols();
        let mut out = Mat::zeros((groups.len(), c));
        let mut argmax = Vec::with_capacity(groups.len());
        for (g, rows) in groups.iter().enumerate() {
            let mut best: Vec<Option<usize>> = vec![None; c];
            for &r in rows {
                for ch in 0..c {
                    let v = x[[r, ch]];
                    if best[ch].is_none_or(|b| v > x[[b, ch]]) {
                        best[ch] = Some(r);
                    }
                }
            }
            for (ch, b) in best.iter().enumerate() {
                if let Some(b) = b {
                    out[[g, ch]] = x[[*b, ch]];
                }
            }
            argmax.push(best);
        }
        self.push(Op::SegmentMax { x: a, argmax }, out)
    }

    /// Threshold multi-tag loss summed over the cells where `cell_mask` is
    /// true. `positive[[k, t]]` marks tag `t` as a target of cell `k`.
    ///
    /// Per cell: `log(e^{-s0} + Σ_pos e^{-s}) + log(e^{s0} + Σ_neg e^{s})`.
    pub fn multi_tag_loss(&mut self, scores: Var, positive: &Array2<bool>, cell_mask: &[bool], s0: f64) -> Var {
        let x = self.value(scores);
        let (r, c) = x.dim();
        assert_eq!(positive.dim(), (r, c), "gold shape mismatch");
        assert_eq!(cell_mask.len(), r, "cell mask length");
        let mut weights = Mat::zeros((r, c));
        let mut total = 0.0;
        let mut pos_terms = Vec::with_capacity(c + 1);
        let mut neg_terms = Vec::with_capacity(c + 1);
        for k in (0..r).filter(|&k| cell_mask[k]) {
            pos_terms.clear();
            neg_terms.clear();
            pos_terms.push(-s0);
            neg_terms.push(s0);
            for t in 0..c {
                if positive[[k, t]] {
                    pos_terms.push(-x[[k, t]]);
                } else {
                    neg_terms.push(x[[k, t]]);
                }
            }
            let lp = log_sum_exp(&pos_terms);
            let ln = log_sum_exp(&neg_terms);
            total += lp + ln;
            for t in 0..c {
                let s = x[[k, t]];
                weights[[k, t]] = if positive[[k, t]] { -(-s - lp).exp() } else { (s - ln).exp() };
            }
        }
        self.push(Op::MultiTagLoss { scores, weights }, Mat::from_elem((1, 1), total))
    }

    /// Reverse pass from a `1 × 1` output, returning parameter gradients.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::ones((1, 1)));
        let mut result = Gradients::zeros_like(self.store);

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    if let Some(p) = node.param {
                        result.accumulate(p, &g);
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::AddCol(a, col) => {
                    acc(&mut grads, *col, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MulRow(a, row) => {
                    let grow = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ga = &g * self.value(*row);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *row, grow);
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g * *f),
                Op::Gelu(a) => {
                    let mut ga = self.value(*a).mapv(gelu_grad);
                    ga *= &g;
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value(Var(idx));
                    let mut ga = &g * y;
                    for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = row.sum();
                        row.zip_mut_with(&yrow, |v, &yv| *v -= yv * dot);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNormRows { x, eps } => {
                    let xin = self.value(*x);
                    let y = self.value(Var(idx));
                    let c = xin.ncols() as f64;
                    let mut gx = Mat::zeros(xin.dim());
                    for r in 0..xin.nrows() {
                        let xr = xin.row(r);
                        let mean = xr.sum() / c;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gr.sum() / c;
                        let mean_gy = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / c;
                        for k in 0..xin.ncols() {
                            gx[[r, k]] = inv * (gr[k] - mean_g - yr[k] * mean_gy);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, map) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    for (k, src) in map.iter().enumerate() {
                        if let Some(src) = *src {
                            let mut dst = ga.row_mut(src);
                            dst += &g.row(k);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let dim = self.value(*a).dim();
                    acc(&mut grads, *a, g.to_shape(dim).expect("reshape grad").into_owned());
                }
                Op::SumCols(a) => {
                    let (r, c) = self.value(*a).dim();
                    let ga = Mat::from_shape_fn((r, c), |(i, _)| g[[i, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::SegmentMax { x, argmax } => {
                    let mut gx = Mat::zeros(self.value(*x).dim());
                    for (gidx, best) in argmax.iter().enumerate() {
                        for (ch, b) in best.iter().enumerate() {
                            if let Some(b) = b {
                                gx[[*b, ch]] += g[[gidx, ch]];
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::MultiTagLoss { scores, weights } => {
                    acc(&mut grads, *scores, weights * g[[0, 0]]);
                }
            }
        }
        result
    }
}
