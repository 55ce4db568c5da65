//! Central finite-difference verification of the model's analytic gradients.

use std::collections::BTreeMap;

use crate::autodiff::{Mat, Tape};
use crate::corpus::Sentence;
use crate::model::Model;
use crate::nn::ForwardCtx;

/// Largest relative error seen in one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub max_relative_error: f64,
    pub entries: usize,
}

/// Mean per-cell loss in evaluation mode.
pub fn mean_loss(model: &Model, sentence: &Sentence) -> f64 {
    let input = model.prepare(sentence, None).expect("sentence fits the model");
    let gold = model.gold_grid(sentence).expect("entities fit the vocabulary");
    let mut tape = Tape::new(&model.store);
    let (loss, cells) = model.loss(&mut tape, &input, &gold, &mut ForwardCtx::eval());
    tape.value(loss)[[0, 0]] / cells as f64
}

/// Compares every scalar parameter's analytic gradient against
/// `(L(θ + h) − L(θ − h)) / 2h`. The relative error of an entry is
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn check_gradients(model: &mut Model, sentence: &Sentence, step: f64, floor: f64) -> BTreeMap<String, TensorCheck> {
    let input = model.prepare(sentence, None).expect("sentence fits the model");
    let gold = model.gold_grid(sentence).expect("entities fit the vocabulary");
    let grads = {
        let mut tape = Tape::new(&model.store);
        let (loss, cells) = model.loss(&mut tape, &input, &gold, &mut ForwardCtx::eval());
        let mut g = tape.backward(loss);
        g.scale(1.0 / cells as f64);
        g
    };
    let ids: Vec<_> = model.store.ids().collect();
    let mut out = BTreeMap::new();
    for id in ids {
        let shape = model.store.get(id).dim();
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Mat::zeros(shape));
        let mut worst: f64 = 0.0;
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = model.store.get(id)[[r, c]];
                model.store.get_mut(id)[[r, c]] = orig + step;
                let plus = mean_loss(model, sentence);
                model.store.get_mut(id)[[r, c]] = orig - step;
                let minus = mean_loss(model, sentence);
                model.store.get_mut(id)[[r, c]] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                let a = analytic[[r, c]];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
            }
        }
        out.insert(
            model.store.name(id).to_string(),
            TensorCheck { max_relative_error: worst, entries: shape.0 * shape.1 },
        );
    }
    out
}
