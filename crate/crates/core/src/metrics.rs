//! Entity-level exact-match precision, recall and F1.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::EntityMention;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.gold)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

impl From<Counts> for TypeScores {
    fn from(counts: Counts) -> Self {
        Self { precision: counts.precision(), recall: counts.recall(), f1: counts.f1(), counts }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_type: BTreeMap<String, TypeScores>,
    pub counts: Counts,
}

impl EvalReport {
    /// Scores paired gold/predicted mention sets, one pair per sentence.
    pub fn from_sets<'a>(
        pairs: impl IntoIterator<Item = (&'a BTreeSet<EntityMention>, &'a BTreeSet<EntityMention>)>,
    ) -> Self {
        let mut total = Counts::default();
        let mut by_type: BTreeMap<String, Counts> = BTreeMap::new();
        for (gold, pred) in pairs {
            for g in gold {
                by_type.entry(g.entity_type.clone()).or_default().gold += 1;
            }
            for p in pred {
                let c = by_type.entry(p.entity_type.clone()).or_default();
                c.predicted += 1;
                if gold.contains(p) {
                    c.correct += 1;
                }
            }
            total.gold += gold.len();
            total.predicted += pred.len();
            total.correct += pred.intersection(gold).count();
        }
        Self {
            precision: total.precision(),
            recall: total.recall(),
            f1: total.f1(),
            per_type: by_type.into_iter().map(|(k, v)| (k, v.into())).collect(),
            counts: total,
        }
    }

    /// Aligned plain-text table with one row per type and an overall row.
    pub fn table(&self) -> String {
        let width = self.per_type.keys().map(|k| k.chars().count()).max().unwrap_or(0).max(7);
        let mut out = format!(
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>6}  {:>6}  {:>6}\n",
            "type", "precision", "recall", "f1", "gold", "pred", "correct"
        );
        let mut row = |name: &str, s: &TypeScores| {
            out.push_str(&format!(
                "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>6}  {:>6}  {:>6}\n",
                name, s.precision, s.recall, s.f1, s.counts.gold, s.counts.predicted, s.counts.correct
            ));
        };
        for (name, s) in &self.per_type {
            row(name, s);
        }
        row("overall", &TypeScores::from(self.counts));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[(&[usize], &str)]) -> BTreeSet<EntityMention> {
        items.iter().map(|(i, t)| EntityMention::new(i.to_vec(), *t)).collect()
    }

    #[test]
    fn perfect_predictions() {
        let g = set(&[(&[0, 1], "PER"), (&[3], "LOC")]);
        let r = EvalReport::from_sets([(&g, &g)]);
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn nothing_predicted() {
        let g = set(&[(&[0, 1], "PER")]);
        let r = EvalReport::from_sets([(&g, &BTreeSet::new())]);
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn partial_recall() {
        let g = set(&[(&[0, 1], "PER"), (&[3], "LOC"), (&[5, 6], "LOC")]);
        let p = set(&[(&[0, 1], "PER"), (&[3], "LOC")]);
        let r = EvalReport::from_sets([(&g, &p)]);
        assert_eq!(r.precision, 1.0);
        assert!((r.recall - 0.6667).abs() < 1e-4);
        assert!((r.f1 - 0.8).abs() < 1e-12);
        assert_eq!(r.per_type["LOC"].counts, Counts { gold: 2, predicted: 1, correct: 1 });
    }

    #[test]
    fn type_mismatch_is_wrong() {
        let g = set(&[(&[0, 1], "PER")]);
        let p = set(&[(&[0, 1], "LOC")]);
        let r = EvalReport::from_sets([(&g, &p)]);
        assert_eq!(r.counts.correct, 0);
        assert!(r.table().contains("overall"));
    }
}
