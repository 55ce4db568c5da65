//! Shared layers: parameter initialization, affine maps, layer norm, dropout
//! and scaled multi-head attention.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{Mat, ParamId, ParamStore, Tape, Var};

pub const LN_EPS: f64 = 1e-5;

/// Creates parameters in a store with the standard initialization scheme:
/// fan-in uniform for affine maps, `N(0, 0.02)` for embedding tables.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> ParamId {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let m = Mat::from_shape_fn((rows, cols), |_| dist.sample(self.rng));
        self.store.insert(name, m)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let m = Mat::from_shape_fn((rows, cols), |_| dist.sample(self.rng));
        self.store.insert(name, m)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        self.store.insert(name, Mat::from_elem((rows, cols), value))
    }

    pub fn embedding(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.normal(name, rows, cols, 0.02)
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        let bound = 1.0 / (d_in as f64).sqrt();
        Linear {
            w: self.uniform(&format!("{name}.w"), d_in, d_out, bound),
            b: self.uniform(&format!("{name}.b"), 1, d_out, bound),
        }
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> LayerNorm {
        LayerNorm {
            gain: self.constant(&format!("{name}.gain"), 1, d, 1.0),
            bias: self.constant(&format!("{name}.bias"), 1, d, 0.0),
        }
    }

    pub fn attention(&mut self, name: &str, d: usize, heads: usize) -> MultiHeadAttention {
        MultiHeadAttention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
            heads,
        }
    }
}

/// `x · W + b` with `W` stored as `d_in × d_out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }

    pub fn d_out(&self, store: &ParamStore) -> usize {
        store.get(self.w).ncols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let normed = tape.layer_norm_rows(x, LN_EPS);
        let gain = tape.param(self.gain);
        let bias = tape.param(self.bias);
        let scaled = tape.mul_row(normed, gain);
        tape.add_row(scaled, bias)
    }
}

/// Per-call forward state: training mode enables dropout.
pub struct ForwardCtx {
    pub train: bool,
    rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self { train: false, rng: None }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Self { train: true, rng: Some(rng) }
    }

    /// Inverted dropout; identity outside training or when `p == 0`.
    pub fn dropout(&mut self, tape: &mut Tape<'_>, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let rng = self.rng.as_mut().expect("training context carries an rng");
        let keep = 1.0 - p;
        let (r, c) = tape.shape(x);
        let mask = Mat::from_shape_fn((r, c), |_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 });
        let mask = tape.constant(mask);
        tape.mul(x, mask)
    }
}

/// Standard multi-head scaled dot-product attention with an output projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    /// Attends from `query` rows to `memory` rows; `key_mask[j] == false` keys
    /// receive zero weight. Returns the projected output and the mean
    /// attention weights over heads.
    pub fn forward(&self, tape: &mut Tape<'_>, query: Var, memory: Var, key_mask: &[bool]) -> (Var, Mat) {
        let q = self.q.forward(tape, query);
        let k = self.k.forward(tape, memory);
        let v = self.v.forward(tape, memory);
        let d = tape.shape(q).1;
        let dk = d / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut mean = Mat::zeros((tape.shape(q).0, tape.shape(k).0));
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dk, (h + 1) * dk);
            let kh = tape.slice_cols(k, h * dk, (h + 1) * dk);
            let vh = tape.slice_cols(v, h * dk, (h + 1) * dk);
            let logits = tape.matmul_t(qh, kh);
            let logits = tape.scale(logits, scale);
            let weights = tape.softmax_rows(logits, Some(key_mask));
            mean += tape.value(weights);
            outs.push(tape.matmul(weights, vh));
        }
        mean /= self.heads as f64;
        let cat = tape.concat_cols(&outs);
        (self.o.forward(tape, cat), mean)
    }
}
